"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """d(sum of fn())/d(tensor) by central differences.

    ``fn`` is re-evaluated with ``tensor.data`` perturbed in place. When
    ``indices`` is given only those entries are estimated (others are NaN).
    """
    data = tensor.data
    grad = np.full(data.shape, np.nan) if indices is not None else np.zeros(data.shape)
    targets = indices if indices is not None else list(np.ndindex(*data.shape))
    with no_grad():
        for idx in targets:
            old = data[idx]
            data[idx] = old + h
            plus = float(np.sum(fn().data, dtype=np.float64))
            data[idx] = old - h
            minus = float(np.sum(fn().data, dtype=np.float64))
            data[idx] = old
            grad[idx] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a|| + ||n||, floor), over entries where ``numeric`` is defined."""
    sel = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[sel]
    n = numeric[sel]
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Relative error of reverse-mode vs finite-difference gradient per input.

    With ``max_entries`` set, a random subset of coordinates per input is probed.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward(np.ones_like(out.data))
    errors = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        indices = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
        numeric = numeric_grad(fn, t, h, indices)
        errors.append(relative_error(analytic, numeric))
    return errors
