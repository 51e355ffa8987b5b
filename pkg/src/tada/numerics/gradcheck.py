"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tensor


def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be scalar-valued and smooth at ``point``. The error per
    coordinate is |analytic - numeric| / (|numeric| + 1e-8).
    """
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    loss = fn(x)
    loss.backward()
    analytic = np.zeros_like(point) if x.grad is None else np.asarray(x.grad)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(Tensor(point.copy())).item()
        flat[i] = orig - eps
        lo = fn(Tensor(point.copy())).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0


def finite_difference_check_params(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Like :func:`finite_difference_check` but perturbs existing parameter
    tensors in place; ``fn`` closes over them and rebuilds the loss.

    ``sample`` limits the check to that many randomly chosen coordinates per
    parameter (all coordinates when None), keeping large models tractable.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = fn()
    loss.backward()

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad)
        flat = p.data.reshape(-1)
        if sample is not None and sample < flat.size:
            coords = rng.choice(flat.size, size=sample, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
