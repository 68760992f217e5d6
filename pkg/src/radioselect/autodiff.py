"""Reverse-mode automatic differentiation on dense nd-arrays.

A Tensor wraps a numpy array and remembers how it was produced; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every reachable leaf. Values are float32 by
default (float64 is supported end to end and is what the gradient checker
uses); reductions accumulate in 64-bit regardless of storage dtype.

Graph recording can be suspended with ``no_grad()`` for inference and
sampling loops; ops then keep no parents and no closures, so memory stays
flat no matter how long the loop runs.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, InputError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph; ``data`` is a numpy array."""

    def __init__(self, data, requires_grad: bool = False, parents=()):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy scalar (e.g. from 0-d arithmetic): keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        track = _GRAD_ENABLED and (requires_grad or any(p.requires_grad for p in parents))
        self.requires_grad = track
        self._parents = parents if track else ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


# -- elementwise ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g, b.data.shape))

        out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, parents=(a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(-g, b.data.shape))

        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g * a.data, b.data.shape))

        out._backward = bw
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g / a.data)

        out._backward = bw
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero where the clip engaged."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), parents=(a,))
    if out.requires_grad:
        passthrough = (a.data >= lo) & (a.data <= hi)

        def bw(g):
            a.accumulate(g * passthrough)

        out._backward = bw
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0), parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g * (a.data > 0))

        out._backward = bw
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = expit(x).astype(x.dtype, copy=False)
    out = Tensor(s, parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g * s * (1.0 - s))

        out._backward = bw
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t, parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g * (1.0 - t * t))

        out._backward = bw
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = expit(x)
    out = Tensor((x * s).astype(x.dtype, copy=False), parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g * (s * (1.0 + x * (1.0 - s))))

        out._backward = bw
    return out


def spatial_center(a) -> Tensor:
    """Subtract the per-(batch, channel) spatial mean from a (B, C, D, H, W)
    tensor, so every channel's response sums to zero across positions."""
    a = as_tensor(a)
    x = a.data
    if x.ndim != 5:
        raise UsageError(f"spatial_center expects a (B, C, D, H, W) tensor, got {x.shape}")
    mu = x.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64)
    out = Tensor((x - mu).astype(x.dtype, copy=False), parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g - g.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64))

        out._backward = bw
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data, parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g * 2.0 * a.data)

        out._backward = bw
    return out


# -- reductions (64-bit accumulation) ------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64)), parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(np.broadcast_to(g, a.data.shape))

        out._backward = bw
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64) / n), parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(np.broadcast_to(g / n, a.data.shape))

        out._backward = bw
    return out


# -- shape ops ------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))
    if out.requires_grad:

        def bw(g):
            a.accumulate(g.reshape(a.data.shape))

        out._backward = bw
    return out


def flatten_batch(a) -> Tensor:
    """(B, ...) -> (B, prod(...))."""
    a = as_tensor(a)
    return reshape(a, (a.data.shape[0], -1))


def concat_channels(tensors) -> Tensor:
    """Concatenate (B, C, D, H, W) tensors along the channel axis."""
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), parents=tuple(tensors))
    if out.requires_grad:
        splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

        def bw(g):
            for t, part in zip(tensors, np.split(g, splits, axis=1)):
                if t.requires_grad:
                    t.accumulate(part)

        out._backward = bw
    return out


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, parents=(a, b))
    if out.requires_grad:

        def bw(g):
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)

        out._backward = bw
    return out


def dense(x, w, b=None) -> Tensor:
    """x: (B, K), w: (K, M), b: (M,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ConfigurationError(
            f"dense shape mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# -- 3D convolution ---------------------------------------------------------


def conv3d(x, w, b=None, stride: int = 1) -> Tensor:
    """3D convolution with zero padding of kernel//2 per axis.

    x: (B, Cin, D, H, W); w: (Cout, Cin, k, k, k); stride applies to all
    spatial axes. Output spatial extent is (E + 2*(k//2) - k)//stride + 1.
    The arithmetic runs as one (Cout, Cin*k^3) x (Cin*k^3, B*N) gemm over an
    im2col patch matrix gathered with a strided window view; a single big
    gemm is several times faster here than per-offset accumulation, which
    streams the output once per kernel offset.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 5:
        raise ConfigurationError(f"conv3d input must be 5-D, got {x.data.shape}")
    B, cin, D, H, W = x.data.shape
    cout, cin_w, kz, ky, kx = w.data.shape
    if cin != cin_w:
        raise ConfigurationError(f"conv3d channel mismatch: input {cin}, weight expects {cin_w}")
    s = int(stride)
    pz, py, px = kz // 2, ky // 2, kx // 2
    od = (D + 2 * pz - kz) // s + 1
    oh = (H + 2 * py - ky) // s + 1
    ow = (W + 2 * px - kx) // s + 1
    if min(od, oh, ow) < 1:
        raise ConfigurationError(
            f"conv3d output collapsed for input {x.data.shape}, kernel {kz}, stride {s}"
        )

    wd = w.data
    n_out = B * od * oh * ow
    if (kz, ky, kx) == (1, 1, 1) and s == 1:
        patches = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(cin, n_out)
    else:
        if (pz, py, px) == (0, 0, 0):
            xp = x.data
        else:
            xp = np.zeros((B, cin, D + 2 * pz, H + 2 * py, W + 2 * px), dtype=x.data.dtype)
            xp[:, :, pz : pz + D, py : py + H, px : px + W] = x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, (kz, ky, kx), axis=(2, 3, 4))
        win = win[:, :, ::s, ::s, ::s]
        patches = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4))
        patches = patches.reshape(cin * kz * ky * kx, n_out)
    acc = wd.reshape(cout, -1) @ patches
    out_data = np.ascontiguousarray(acc.reshape(cout, B, od, oh, ow).transpose(1, 0, 2, 3, 4))
    if b is not None:
        out_data += b.data.reshape(1, cout, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(out_data, parents=parents)
    if out.requires_grad:

        def bw(g):
            gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, n_out)
            if w.requires_grad:
                w.accumulate((gc @ patches.T).reshape(wd.shape))
            if x.requires_grad:
                dcols = wd.reshape(cout, -1).T @ gc
                dcols = dcols.reshape(cin, kz, ky, kx, B, od, oh, ow)
                dxp = np.zeros((cin, B, D + 2 * pz, H + 2 * py, W + 2 * px), dtype=gc.dtype)
                for dz in range(kz):
                    for dy in range(ky):
                        for dx in range(kx):
                            dxp[
                                :, :, dz : dz + s * od : s, dy : dy + s * oh : s, dx : dx + s * ow : s
                            ] += dcols[:, dz, dy, dx]
                dx = dxp.transpose(1, 0, 2, 3, 4)
                if (pz, py, px) != (0, 0, 0):
                    dx = dx[:, :, pz : pz + D, py : py + H, px : px + W]
                x.accumulate(np.ascontiguousarray(dx))
            if b is not None and b.requires_grad:
                b.accumulate(g.sum(axis=(0, 2, 3, 4), dtype=np.float64))

        out._backward = bw
    return out


def global_avg_pool(x) -> Tensor:
    """(B, C, D, H, W) -> (B, C), averaging in 64-bit."""
    x = as_tensor(x)
    n = int(np.prod(x.data.shape[2:]))
    val = x.data.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.data.dtype)
    out = Tensor(val, parents=(x,))
    if out.requires_grad:

        def bw(g):
            x.accumulate(np.broadcast_to((g / n)[:, :, None, None, None], x.data.shape))

        out._backward = bw
    return out


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Repeat each voxel ``factor`` times along every spatial axis."""
    x = as_tensor(x)
    f = int(factor)
    data = x.data.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    out = Tensor(data, parents=(x,))
    if out.requires_grad:
        b, c, d, h, w = x.data.shape

        def bw(g):
            blocks = g.reshape(b, c, d, f, h, f, w, f)
            x.accumulate(blocks.sum(axis=(3, 5, 7), dtype=np.float64))

        out._backward = bw
    return out


ACTIVATIONS = {
    "relu": relu,
    "silu": silu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": lambda t: t,
}


def apply_activation(name: str, t: Tensor) -> Tensor:
    try:
        return ACTIVATIONS[name](t)
    except KeyError:
        raise ConfigurationError(f"unknown activation {name!r}") from None


def bce_loss(prediction, label) -> Tensor:
    """Binary cross-entropy, summed over the batch.

    ``prediction`` holds probabilities which are clamped to
    [1e-7, 1 - 1e-7] before the logs; ``label`` entries must be 0 or 1.
    """
    prediction = as_tensor(prediction)
    y = np.asarray(label, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    y = y.reshape(prediction.data.shape).astype(prediction.data.dtype)
    eps = 1e-7
    p = clamp(prediction, eps, 1.0 - eps)
    per_item = add(mul(log(p), y), mul(log(add(mul(p, -1.0), 1.0)), 1.0 - y))
    return mul(sum_all(per_item), -1.0)
