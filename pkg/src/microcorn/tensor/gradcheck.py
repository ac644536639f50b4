"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, one coordinate at a time."""
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over coordinates."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and finite differences over ``params``.

    With ``max_coords`` set, only that many randomly chosen coordinates per
    parameter are probed.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        if max_coords is None or p.size <= max_coords:
            numeric = numerical_grad(fn, p, step)
            worst = max(worst, relative_error(analytic, numeric))
            continue
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(p.size, size=max_coords, replace=False)
        flat = p.values.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = fn().item()
            flat[c] = orig - step
            down = fn().item()
            flat[c] = orig
            num = (up - down) / (2.0 * step)
            worst = max(worst, relative_error(analytic.reshape(-1)[c : c + 1], np.array([num])))
    for p in params:
        p.grad = None
    return worst
