"""AdamW update, cosine learning-rate schedule, gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, ConsistencyError
from .params import ParamTree


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: ParamTree,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One decoupled-weight-decay Adam step, applied to ``params`` in place."""
    missing = [n for n in params.names() if n not in grads]
    if missing:
        raise ConsistencyError(f"missing gradient for parameter(s): {', '.join(missing)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ConsistencyError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data * (1.0 - lr * weight_decay) - lr * update).astype(p.dtype, copy=False)
    return state


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    step = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so the global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
    return total
