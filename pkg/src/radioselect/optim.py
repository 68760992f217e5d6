"""Gradient extraction and Adam updates for Parameters objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .autodiff import Tensor
from .network import Parameters


def gradients(loss: Tensor, params: Parameters) -> dict:
    """Backpropagate a scalar loss; returns name -> gradient array.

    Parameters the loss does not reach get zero gradients. Stale gradients
    from earlier calls are cleared first.
    """
    if loss.data.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.data.shape}")
    params.zero_grad()
    loss.backward()
    return {
        n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for n, t in params.items()
    }


@dataclass
class AdamState:
    """First/second moment accumulators, kept in float64."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_adam_state(params: Parameters) -> AdamState:
    return AdamState(
        m={n: np.zeros(t.data.shape, dtype=np.float64) for n, t in params.items()},
        v={n: np.zeros(t.data.shape, dtype=np.float64) for n, t in params.items()},
        step=0,
    )


def adam_step(
    params: Parameters,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One Adam update, applied to params in place.

    Moments and the update itself are computed in float64 and the result is
    cast back to each parameter's dtype. ``weight_decay`` is decoupled
    (applied directly to the parameter, not folded into the gradient).
    """
    if set(grads.keys()) != set(params.names()):
        raise UsageError("gradient keys do not match parameter names")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay > 0.0:
            update = update + lr * weight_decay * p.data.astype(np.float64)
        p.data -= update.astype(p.data.dtype)
    return state
