"""Layer-list network definitions on top of the autodiff module.

A network is a NetworkConfig: an input shape, a seed, and a list of layer
dicts that are walked in order. Supported kinds:

    conv3d    {"kind": "conv3d", "channels": C, "kernel": k, "stride": s,
               "activation": name}
    resblock  {"kind": "resblock", "kernel": k, "activation": name}
              (two convs, skip add; channel count unchanged)
    time_embed {"kind": "time_embed"}
              (dense projection of the externally supplied embedding,
               added as a per-channel bias)
    save      {"kind": "save", "tag": str}
    concat    {"kind": "concat", "tag": str}   (channel concat with saved)
    upsample  {"kind": "upsample", "factor": f}
    center    {"kind": "center"}
              (subtracts the per-channel spatial mean; no parameters)
    gap       {"kind": "gap"}
    flatten   {"kind": "flatten"}
    dense     {"kind": "dense", "features": M, "activation": name}

Weights draw from a Kaiming-uniform fan-in distribution, biases start at
zero, and the draw order is fixed by the layer list, so a given
(config, seed) pair always yields the same parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, UsageError

_SPATIAL_KINDS = {"conv3d", "resblock", "time_embed", "save", "concat", "upsample", "center", "gap", "flatten"}


@dataclass
class NetworkConfig:
    """Input shape is (C, D, H, W); temb_dim > 0 enables time_embed layers."""

    input_shape: tuple
    layers: list = field(default_factory=list)
    seed: int = 0
    temb_dim: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input shape must be (C, D, H, W) >= 1, got {self.input_shape}")
        infer_shapes(self)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": self.layers,
            "seed": self.seed,
            "temb_dim": self.temb_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(
            input_shape=tuple(d["input_shape"]),
            layers=d["layers"],
            seed=int(d.get("seed", 0)),
            temb_dim=int(d.get("temb_dim", 0)),
        )


def infer_shapes(config: NetworkConfig) -> list:
    """Per-layer output shapes; spatial shapes are (C, D, H, W), flat (K,).

    Raises ConfigurationError on any inconsistency (flat input to a conv,
    concat with an unsaved tag, collapsed spatial extent, ...).
    """
    shape = config.input_shape
    saved: dict[str, tuple] = {}
    shapes = []
    for i, layer in enumerate(config.layers):
        kind = layer.get("kind")
        where = f"layer {i} ({kind})"
        if kind in _SPATIAL_KINDS and len(shape) != 4:
            raise ConfigurationError(f"{where}: needs a spatial input, have {shape}")
        if kind == "conv3d":
            k, s = int(layer.get("kernel", 3)), int(layer.get("stride", 1))
            c, d, h, w = shape
            p = k // 2
            spatial = tuple((e + 2 * p - k) // s + 1 for e in (d, h, w))
            if min(spatial) < 1:
                raise ConfigurationError(f"{where}: output collapsed from {shape}")
            shape = (int(layer["channels"]),) + spatial
        elif kind == "resblock":
            if int(layer.get("kernel", 3)) % 2 != 1:
                raise ConfigurationError(f"{where}: kernel must be odd to preserve shape")
        elif kind == "time_embed":
            if config.temb_dim <= 0:
                raise ConfigurationError(f"{where}: temb_dim not configured")
        elif kind == "save":
            saved[layer["tag"]] = shape
        elif kind == "concat":
            tag = layer["tag"]
            if tag not in saved:
                raise ConfigurationError(f"{where}: tag {tag!r} was never saved")
            other = saved[tag]
            if other[1:] != shape[1:]:
                raise ConfigurationError(f"{where}: spatial mismatch {other} vs {shape}")
            shape = (shape[0] + other[0],) + shape[1:]
        elif kind == "upsample":
            f = int(layer.get("factor", 2))
            shape = (shape[0],) + tuple(e * f for e in shape[1:])
        elif kind == "center":
            if len(shape) != 4:
                raise ConfigurationError(f"{where}: needs a spatial input, have {shape}")
        elif kind == "gap":
            shape = (shape[0],)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise ConfigurationError(f"{where}: needs a flat input, have {shape}")
            shape = (int(layer["features"]),)
        else:
            raise ConfigurationError(f"{where}: unknown layer kind")
        shapes.append(shape)
    if not shapes or int(np.prod(shapes[-1])) < 1:
        raise ConfigurationError("network must produce a non-empty output")
    return shapes


def output_shape(config: NetworkConfig) -> tuple:
    return infer_shapes(config)[-1]


class Parameters:
    """Ordered name -> Tensor mapping of trainable leaves."""

    def __init__(self, tensors: dict | None = None):
        self.tensors: dict[str, ad.Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    @property
    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "Parameters":
        return Parameters({n: ad.parameter(t.data.astype(dtype), dtype) for n, t in self.items()})

    def copy(self) -> "Parameters":
        return Parameters({n: ad.parameter(t.data.copy(), t.data.dtype) for n, t in self.items()})


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_parameters(config: NetworkConfig) -> Parameters:
    """Fresh parameters for ``config``; deterministic in config.seed."""
    shapes = infer_shapes(config)
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, ad.Tensor] = {}

    def conv_pair(prefix: str, cin: int, cout: int, k: int):
        fan_in = cin * k * k * k
        tensors[f"{prefix}.weight"] = ad.parameter(_he_uniform(rng, (cout, cin, k, k, k), fan_in))
        tensors[f"{prefix}.bias"] = ad.parameter(np.zeros(cout, dtype=np.float32))

    shape = config.input_shape
    for i, layer in enumerate(config.layers):
        kind = layer["kind"]
        name = f"layer{i}"
        if kind == "conv3d":
            conv_pair(name, shape[0], int(layer["channels"]), int(layer.get("kernel", 3)))
        elif kind == "resblock":
            k = int(layer.get("kernel", 3))
            conv_pair(f"{name}.conv1", shape[0], shape[0], k)
            conv_pair(f"{name}.conv2", shape[0], shape[0], k)
        elif kind == "time_embed":
            c = shape[0]
            tensors[f"{name}.weight"] = ad.parameter(
                _he_uniform(rng, (config.temb_dim, c), config.temb_dim)
            )
            tensors[f"{name}.bias"] = ad.parameter(np.zeros(c, dtype=np.float32))
        elif kind == "dense":
            fan_in = shape[0]
            tensors[f"{name}.weight"] = ad.parameter(
                _he_uniform(rng, (fan_in, int(layer["features"])), fan_in)
            )
            tensors[f"{name}.bias"] = ad.parameter(np.zeros(int(layer["features"]), dtype=np.float32))
        shape = shapes[i]
    return Parameters(tensors)


def network_forward(config: NetworkConfig, params: Parameters, x, temb=None) -> ad.Tensor:
    """Run the network on a batch.

    ``x`` is (B, C, D, H, W) matching config.input_shape; ``temb`` is the
    (B, temb_dim) embedding consumed by time_embed layers.
    """
    t = ad.as_tensor(x)
    if t.data.ndim != 5 or tuple(t.data.shape[1:]) != config.input_shape:
        raise ConfigurationError(
            f"input shape {t.data.shape} does not match configured {('B',) + config.input_shape}"
        )
    saved: dict[str, ad.Tensor] = {}
    for i, layer in enumerate(config.layers):
        kind = layer["kind"]
        name = f"layer{i}"
        if kind == "conv3d":
            t = ad.conv3d(t, params[f"{name}.weight"], params[f"{name}.bias"], int(layer.get("stride", 1)))
            t = ad.apply_activation(layer.get("activation", "identity"), t)
        elif kind == "resblock":
            act = layer.get("activation", "relu")
            h = ad.conv3d(t, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"])
            h = ad.apply_activation(act, h)
            h = ad.conv3d(h, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"])
            t = ad.apply_activation(act, ad.add(t, h))
        elif kind == "time_embed":
            if temb is None:
                raise UsageError("network has a time_embed layer but no embedding was passed")
            proj = ad.dense(ad.as_tensor(temb), params[f"{name}.weight"], params[f"{name}.bias"])
            t = ad.add(t, ad.reshape(proj, proj.data.shape + (1, 1, 1)))
        elif kind == "save":
            saved[layer["tag"]] = t
        elif kind == "concat":
            t = ad.concat_channels([t, saved[layer["tag"]]])
        elif kind == "upsample":
            t = ad.upsample_nearest(t, int(layer.get("factor", 2)))
        elif kind == "center":
            t = ad.spatial_center(t)
        elif kind == "gap":
            t = ad.global_avg_pool(t)
        elif kind == "flatten":
            t = ad.flatten_batch(t)
        elif kind == "dense":
            t = ad.dense(t, params[f"{name}.weight"], params[f"{name}.bias"])
            t = ad.apply_activation(layer.get("activation", "identity"), t)
    return t


def grad_check(
    config: NetworkConfig,
    params: Parameters,
    x,
    label=None,
    temb=None,
    max_entries: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Everything is upcast to float64; the loss is BCE on sigmoid outputs when
    a label is given, otherwise the sum of squared outputs. At most
    ``max_entries`` parameter entries are probed (spread across leaves,
    chosen deterministically). Networks above 10k parameters are refused:
    numeric differencing at that size is no longer a desk-scale check.
    Returns 0.0 for a parameter-free graph.
    """
    if params.count > 10_000:
        raise UsageError(f"grad_check is limited to 10k parameters, got {params.count}")
    if len(params) == 0:
        return 0.0
    p64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    t64 = None if temb is None else np.asarray(temb, dtype=np.float64)

    def loss_value() -> ad.Tensor:
        out = network_forward(config, p64, x64, temb=t64)
        if label is None:
            return ad.sum_all(ad.square(out))
        return ad.bce_loss(ad.sigmoid(out), label)

    loss = loss_value()
    p64.zero_grad()
    loss.backward()
    analytic = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in p64.items()}

    entries = []
    total = p64.count
    rng = np.random.default_rng(seed)
    for n, t in p64.items():
        size = t.data.size
        quota = max(1, int(round(max_entries * size / total)))
        if size <= quota:
            idx = np.arange(size)
        else:
            idx = rng.choice(size, size=quota, replace=False)
        entries.extend((n, int(i)) for i in idx)

    h = 1e-5
    worst = 0.0
    for name, flat_i in entries:
        data = p64[name].data
        orig = data.flat[flat_i]
        with ad.no_grad():
            data.flat[flat_i] = orig + h
            up = float(loss_value().data)
            data.flat[flat_i] = orig - h
            down = float(loss_value().data)
        data.flat[flat_i] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[name].flat[flat_i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
