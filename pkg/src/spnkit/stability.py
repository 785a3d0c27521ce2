"""Gate normalization and stability diagnostics.

Each pixel's gates for one scan direction form a row of the scan's one-step
transfer matrix. Keeping the absolute row sum at or below one bounds every
eigenvalue of that matrix by one (circle bound on the rows), so repeated
propagation cannot blow up. `project_gates` rescales offending rows onto the
unit ball; it preserves signs and ratios and leaves stable rows untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .propagation import ConnectionKind, Direction, DIRECTION_NAMES

STABILITY_TOL = 1e-6


def _check_gate_shape(gate_data: np.ndarray, kind: ConnectionKind):
    k = kind.gates_per_direction
    if gate_data.ndim != 5 or gate_data.shape[3] != 4 or gate_data.shape[4] != k:
        raise DimensionError(
            f"gates shaped {gate_data.shape}, expected (H, W, C, 4, {k})")


def gate_abs_sums(gate_data: np.ndarray, kind: ConnectionKind) -> np.ndarray:
    """Per-pixel absolute gate sums, (H, W, C, 4)."""
    _check_gate_shape(gate_data, kind)
    return np.abs(gate_data).sum(axis=4)


def project_gates(gate_data: np.ndarray, kind: ConnectionKind) -> np.ndarray:
    """Rescale each pixel's gates so their absolute sum is at most one."""
    out, _ = project_gates_cached(gate_data, kind)
    return out


def project_gates_cached(gate_data: np.ndarray, kind: ConnectionKind):
    s = gate_abs_sums(gate_data, kind)
    active = s > 1.0
    denom = np.where(active, s, 1.0)[..., None]
    out = gate_data / denom
    cache = (gate_data, out, denom, active)
    return out, cache


def project_gates_backward(grad: np.ndarray, cache) -> np.ndarray:
    """Gradient through the rescaling. Identity on rows that were not scaled."""
    raw, out, denom, active = cache
    dot = (grad * out).sum(axis=4, keepdims=True)
    scaled = (grad - dot * np.sign(raw)) / denom
    return np.where(active[..., None], scaled, grad)


@dataclass(frozen=True)
class StabilityReport:
    """Gate-health summary: the max absolute row sum per direction and overall."""

    max_abs_sum: float
    per_direction: tuple
    pixels_exceeding: int
    worst_position: tuple
    tol: float = STABILITY_TOL

    @property
    def ok(self) -> bool:
        return self.max_abs_sum <= 1.0 + self.tol

    def to_csv(self) -> str:
        lines = ["direction,max_abs_gate_sum,pixels_exceeding"]
        for name, mx, n in self.per_direction:
            lines.append(f"{name},{mx:.17g},{n}")
        lines.append(f"all,{self.max_abs_sum:.17g},{self.pixels_exceeding}")
        return "\n".join(lines) + "\n"

    def __str__(self):
        state = "stable" if self.ok else "UNSTABLE"
        return (f"{state}: max |gate| row sum {self.max_abs_sum:.6g} "
                f"(limit {1.0 + self.tol:.6g}), {self.pixels_exceeding} "
                f"position(s) above 1 at tolerance, worst at {self.worst_position}")


def verify_stability(gate_data: np.ndarray, kind: ConnectionKind,
                     tol: float = STABILITY_TOL) -> StabilityReport:
    """Check the circle bound over every pixel, channel, and direction."""
    sums = gate_abs_sums(gate_data, kind)
    per_direction = []
    for d in Direction:
        sd = sums[:, :, :, d]
        per_direction.append((DIRECTION_NAMES[d], float(sd.max()),
                              int((sd > 1.0 + tol).sum())))
    worst_flat = int(np.argmax(sums))
    worst = tuple(int(v) for v in np.unravel_index(worst_flat, sums.shape))
    return StabilityReport(
        max_abs_sum=float(sums.max()),
        per_direction=tuple(per_direction),
        pixels_exceeding=int((sums > 1.0 + tol).sum()),
        worst_position=worst,
        tol=tol,
    )
