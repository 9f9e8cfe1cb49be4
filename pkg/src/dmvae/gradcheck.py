"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                   step: float = 1e-5) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            hi = float(fn(*[Tensor(x) for x in arrays]).data)
            a[idx] = orig - step
            lo = float(fn(*[Tensor(x) for x in arrays]).data)
            a[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        out.append(g)
    return out


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    with Tape() as tape:
        ts = [Tensor(a) for a in arrays]
        tape.watch(*ts)
        loss = fn(*ts)
        return tape.gradient(loss, ts)


def max_rel_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                  abs_floor: float = 1e-8) -> float:
    """Largest ``|a - n| / max(|a|, |n|, abs_floor)`` over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
        rel = diff / scale
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def check_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
               step: float = 1e-5) -> float:
    return max_rel_error(analytic_grad(fn, arrays), numerical_grad(fn, arrays, step))
