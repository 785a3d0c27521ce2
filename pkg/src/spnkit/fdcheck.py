"""Central-difference gradient checking.

The checker perturbs individual coordinates of a 64-bit input and compares
the numerical slope against an analytic gradient. Piecewise branches (max
pooling winners, clamp active sets, relu signs) make the numerical slope
meaningless when a perturbation crosses a branch point, so callers may supply
a signature function; coordinates whose signature changes under either
perturbation are skipped and reported, not failed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckResult:
    checked: int = 0
    skipped: int = 0
    max_rel_err: float = 0.0
    worst_coord: int = -1
    worst_numeric: float = 0.0
    worst_analytic: float = 0.0
    errors: list = field(default_factory=list)

    def __str__(self):
        return (f"checked {self.checked} coords (skipped {self.skipped}), "
                f"max rel err {self.max_rel_err:.3e} at flat index "
                f"{self.worst_coord} (numeric {self.worst_numeric:.6e}, "
                f"analytic {self.worst_analytic:.6e})")


def check_gradient(func, x: np.ndarray, analytic: np.ndarray, rng,
                   num: int = 100, eps: float = 1e-4, mask=None,
                   signature=None, floor: float = 1e-8) -> GradCheckResult:
    """Compare analytic against central differences at sampled coordinates.

    func maps an array like `x` to a float. `mask` limits which coordinates
    may be perturbed (boundary-pinned entries are not free parameters).
    Everything runs in float64; a non-f64 input is a caller bug.
    """
    if x.dtype != np.float64:
        raise DimensionError("gradient checks must run on float64 inputs")
    if analytic.shape != x.shape:
        raise DimensionError("analytic gradient shape does not match input")
    if mask is None:
        pool = np.arange(x.size)
    else:
        pool = np.flatnonzero(np.asarray(mask).reshape(-1))
    if pool.size == 0:
        raise DimensionError("no eligible coordinates to check")
    if pool.size > num:
        pool = rng.choice(pool, size=num, replace=False)
    base_sig = signature(x) if signature is not None else None
    res = GradCheckResult()
    flat_analytic = analytic.reshape(-1)
    for idx in pool:
        xp = x.copy()
        xp.flat[idx] += eps
        xm = x.copy()
        xm.flat[idx] -= eps
        if signature is not None:
            if signature(xp) != base_sig or signature(xm) != base_sig:
                res.skipped += 1
                continue
        numeric = (func(xp) - func(xm)) / (2.0 * eps)
        err = relative_error(numeric, float(flat_analytic[idx]), floor)
        res.checked += 1
        res.errors.append(err)
        if err > res.max_rel_err:
            res.max_rel_err = err
            res.worst_coord = int(idx)
            res.worst_numeric = float(numeric)
            res.worst_analytic = float(flat_analytic[idx])
    return res
