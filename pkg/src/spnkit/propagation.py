"""Directional linear propagation over image grids.

A scan sweeps the grid one line at a time. Each output pixel mixes its own
input with values from the previous scan line, weighted by per-pixel gates:

    h[t] = (1 - sum(p)) * x[t] + sum_j p_j * h_neighbor_j[t-1]

with the first scan line copied from the input. One-way connections read a
single aligned neighbor; three-way connections also read the two diagonal
neighbors. Four scan directions are integrated node-wise by max pooling.

Gates on the first scan line, and the diagonal gates that would reach outside
the grid, must be exactly zero. That contract keeps every output a convex-like
combination whose coefficients sum to one, which is what makes a constant
input an exact fixed point regardless of gate values.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ContractError, DimensionError


class Direction(IntEnum):
    LEFT_TO_RIGHT = 0
    RIGHT_TO_LEFT = 1
    TOP_TO_BOTTOM = 2
    BOTTOM_TO_TOP = 3


DIRECTION_NAMES = {
    Direction.LEFT_TO_RIGHT: "ltr",
    Direction.RIGHT_TO_LEFT: "rtl",
    Direction.TOP_TO_BOTTOM: "ttb",
    Direction.BOTTOM_TO_TOP: "btt",
}
NAME_TO_DIRECTION = {v: k for k, v in DIRECTION_NAMES.items()}


class ConnectionKind(IntEnum):
    """Number of previous-line neighbors each pixel reads."""

    ONE_WAY = 1
    THREE_WAY = 3

    @property
    def gates_per_direction(self) -> int:
        return int(self)


# Gate slot order for THREE_WAY, indexing the previous-line neighbor by its
# offset in the in-line coordinate: -1, 0, +1.
GATE_PREV = 0
GATE_SAME = 1
GATE_NEXT = 2


def _to_scan(arr: np.ndarray, direction: Direction) -> np.ndarray:
    """View an array in scan coordinates: axis 1 advances with the scan."""
    if direction == Direction.LEFT_TO_RIGHT:
        return arr
    if direction == Direction.RIGHT_TO_LEFT:
        return arr[:, ::-1]
    if direction == Direction.TOP_TO_BOTTOM:
        return arr.swapaxes(0, 1)
    return arr.swapaxes(0, 1)[:, ::-1]


def _from_scan(arr: np.ndarray, direction: Direction) -> np.ndarray:
    if direction == Direction.LEFT_TO_RIGHT:
        return arr
    if direction == Direction.RIGHT_TO_LEFT:
        return arr[:, ::-1]
    if direction == Direction.TOP_TO_BOTTOM:
        return arr.swapaxes(0, 1)
    return arr[:, ::-1].swapaxes(0, 1)


def _canonical_mask(n: int, length: int, kind: ConnectionKind) -> np.ndarray:
    k = kind.gates_per_direction
    m = np.zeros((n, length, k), dtype=bool)
    m[:, 0, :] = True
    if kind == ConnectionKind.THREE_WAY:
        m[0, :, GATE_PREV] = True
        m[n - 1, :, GATE_NEXT] = True
    return m


def boundary_mask(height: int, width: int, kind: ConnectionKind) -> np.ndarray:
    """Boolean (H, W, 4, K) array, True where a gate is required to be zero."""
    if height < 1 or width < 1:
        raise DimensionError("grid dimensions must be >= 1")
    k = kind.gates_per_direction
    mask = np.zeros((height, width, 4, k), dtype=bool)
    for d in Direction:
        if d in (Direction.LEFT_TO_RIGHT, Direction.RIGHT_TO_LEFT):
            cm = _canonical_mask(height, width, kind)
        else:
            cm = _canonical_mask(width, height, kind)
        mask[:, :, d, :] = _from_scan(cm, d)
    return mask


def apply_boundary(gate_data: np.ndarray, kind: ConnectionKind) -> np.ndarray:
    """Return a copy of (H, W, C, 4, K) gates with required zeros applied."""
    mask = boundary_mask(gate_data.shape[0], gate_data.shape[1], kind)
    out = gate_data.copy()
    out[np.broadcast_to(mask[:, :, None, :, :], out.shape)] = 0.0
    return out


@dataclass(frozen=True)
class GateTensor:
    """Per-pixel propagation weights, (H, W, C, 4, K), shared by all units.

    Axis 3 is the scan direction, axis 4 the neighbor slot. The boundary
    contract (see module docstring) is checked at construction.
    """

    data: np.ndarray
    kind: ConnectionKind

    def __post_init__(self):
        arr = self.data
        k = self.kind.gates_per_direction
        if not isinstance(arr, np.ndarray) or arr.ndim != 5:
            raise DimensionError("gate data must be a (H, W, C, 4, K) array")
        if arr.shape[3] != 4 or arr.shape[4] != k:
            raise DimensionError(
                f"gate data shaped {arr.shape}, expected (H, W, C, 4, {k})")
        if arr.dtype not in (np.float32, np.float64):
            raise DimensionError(f"gate dtype must be float32 or float64, got {arr.dtype}")
        if not np.isfinite(arr).all():
            raise DimensionError("gate entries must all be finite")
        check_boundary_zeros(arr, self.kind)
        arr = np.ascontiguousarray(arr).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def check_boundary_zeros(gate_data: np.ndarray, kind: ConnectionKind) -> None:
    """Raise ContractError if any gate that must be zero is not exactly zero."""
    mask = boundary_mask(gate_data.shape[0], gate_data.shape[1], kind)
    bad = (gate_data != 0.0) & mask[:, :, None, :, :]
    if bad.any():
        i = np.argwhere(bad)[0]
        raise ContractError(
            "boundary gate must be zero at (row, col, chan, dir, slot)="
            f"{tuple(int(v) for v in i)}, found {gate_data[tuple(i)]!r}")


def _scan_core(x: np.ndarray, gates: np.ndarray, kind: ConnectionKind) -> np.ndarray:
    """Run one scan in canonical coordinates. x: (n, T, C), gates: (n, T, C, K)."""
    n, length, _ = x.shape
    h = np.empty_like(x)
    h[:, 0] = x[:, 0]
    if kind == ConnectionKind.ONE_WAY:
        for t in range(1, length):
            p = gates[:, t, :, 0]
            h[:, t] = (1.0 - p) * x[:, t] + p * h[:, t - 1]
        return h
    for t in range(1, length):
        pu = gates[:, t, :, GATE_PREV]
        pm = gates[:, t, :, GATE_SAME]
        pd = gates[:, t, :, GATE_NEXT]
        prev = h[:, t - 1]
        up = np.zeros_like(prev)
        up[1:] = prev[:-1]
        dn = np.zeros_like(prev)
        dn[:-1] = prev[1:]
        h[:, t] = (1.0 - pu - pm - pd) * x[:, t] + pu * up + pm * prev + pd * dn
    return h


def _scan_backward_core(x, h, gates, grad, kind):
    """Exact reverse-mode pass for one canonical scan.

    Returns (dx, dgates). Gradients at gate positions pinned to zero by the
    boundary contract are reported as zero: those entries are not free
    parameters.
    """
    n, length, _ = x.shape
    dx = np.zeros_like(x)
    dgates = np.zeros_like(gates)
    carry = np.zeros_like(x[:, 0])
    if kind == ConnectionKind.ONE_WAY:
        for t in range(length - 1, 0, -1):
            g = grad[:, t] + carry
            p = gates[:, t, :, 0]
            dx[:, t] = (1.0 - p) * g
            dgates[:, t, :, 0] = (h[:, t - 1] - x[:, t]) * g
            carry = p * g
        dx[:, 0] = grad[:, 0] + carry
        return dx, dgates
    for t in range(length - 1, 0, -1):
        g = grad[:, t] + carry
        pu = gates[:, t, :, GATE_PREV]
        pm = gates[:, t, :, GATE_SAME]
        pd = gates[:, t, :, GATE_NEXT]
        prev = h[:, t - 1]
        up = np.zeros_like(prev)
        up[1:] = prev[:-1]
        dn = np.zeros_like(prev)
        dn[:-1] = prev[1:]
        dx[:, t] = (1.0 - pu - pm - pd) * g
        dgates[:, t, :, GATE_PREV] = (up - x[:, t]) * g
        dgates[:, t, :, GATE_SAME] = (prev - x[:, t]) * g
        dgates[:, t, :, GATE_NEXT] = (dn - x[:, t]) * g
        carry = pm * g
        pug = pu * g
        carry[:-1] += pug[1:]
        pdg = pd * g
        carry[1:] += pdg[:-1]
    dx[:, 0] = grad[:, 0] + carry
    dgates[0, :, :, GATE_PREV] = 0.0
    dgates[n - 1, :, :, GATE_NEXT] = 0.0
    return dx, dgates


@dataclass
class ScanCache:
    direction: Direction
    kind: ConnectionKind
    x_scan: np.ndarray
    h_scan: np.ndarray
    gates_scan: np.ndarray


def _check_inputs(x: np.ndarray, gates_dir: np.ndarray, kind: ConnectionKind):
    if x.ndim != 3:
        raise DimensionError("input must be (H, W, C)")
    k = kind.gates_per_direction
    if gates_dir.shape != x.shape + (k,):
        raise DimensionError(
            f"gates shaped {gates_dir.shape}, expected {x.shape + (k,)}")


def propagate_direction(x: np.ndarray, gates_dir: np.ndarray,
                        direction: Direction, kind: ConnectionKind,
                        check: bool = True) -> np.ndarray:
    """Propagate (H, W, C) values along one direction. Gates are (H, W, C, K)."""
    h, _ = propagate_direction_cached(x, gates_dir, direction, kind, check)
    return h


def propagate_direction_cached(x, gates_dir, direction, kind, check=True):
    _check_inputs(x, gates_dir, kind)
    if check:
        check_direction_boundary(gates_dir, direction, kind)
    xs = np.ascontiguousarray(_to_scan(x, direction))
    gs = np.ascontiguousarray(_to_scan(gates_dir, direction))
    hs = _scan_core(xs, gs, kind)
    cache = ScanCache(direction, kind, xs, hs, gs)
    return _from_scan(hs, direction), cache


def check_direction_boundary(gates_dir, direction, kind):
    """Boundary contract check for a single direction's (H, W, C, K) gates."""
    gs = _to_scan(gates_dir, direction)
    n, length = gs.shape[0], gs.shape[1]
    cm = _canonical_mask(n, length, kind)
    bad = (gs != 0.0) & cm[:, :, None, :]
    if bad.any():
        i = np.argwhere(bad)[0]
        raise ContractError(
            f"boundary gate must be zero for direction {DIRECTION_NAMES[direction]}"
            f" at scan position (line-index, step, chan, slot)={tuple(int(v) for v in i)}")


def propagate_direction_backward(grad: np.ndarray, cache: ScanCache):
    """Gradients of a single scan. Returns (dx, dgates) in grid orientation."""
    gsc = np.ascontiguousarray(_to_scan(grad, cache.direction))
    dxs, dgs = _scan_backward_core(cache.x_scan, cache.h_scan, cache.gates_scan,
                                   gsc, cache.kind)
    return _from_scan(dxs, cache.direction), _from_scan(dgs, cache.direction)


def integrate_max(h_stack: np.ndarray):
    """Node-wise max over the direction axis of a (4, H, W, C) stack.

    Returns (out, winner) where winner holds the index of the first direction
    attaining the max; ties resolve to the lowest direction index.
    """
    winner = np.argmax(h_stack, axis=0).astype(np.int8)
    out = np.take_along_axis(h_stack, winner[None].astype(np.intp), axis=0)[0]
    return out, winner


def integrate_max_backward(grad: np.ndarray, winner: np.ndarray) -> np.ndarray:
    """Route gradient to the winning direction only. Returns (4, H, W, C)."""
    out = np.zeros((4,) + grad.shape, dtype=grad.dtype)
    for d in range(4):
        np.copyto(out[d], grad, where=(winner == d))
    return out


@dataclass
class UnitCache:
    scans: list
    winner: np.ndarray


def spn_forward(x: np.ndarray, gate_data: np.ndarray, kind: ConnectionKind,
                units: int = 1, check: bool = True):
    """Run `units` cascaded propagation units with shared gates.

    Each unit scans in all four directions and max-pools the results; the next
    unit consumes the pooled output. Returns (out, caches).
    """
    if units < 1:
        raise DimensionError("units must be >= 1")
    k = kind.gates_per_direction
    if gate_data.shape != x.shape + (4, k):
        raise DimensionError(
            f"gates shaped {gate_data.shape}, expected {x.shape + (4, k)}")
    if check:
        check_boundary_zeros(gate_data, kind)
    caches = []
    cur = x
    for _ in range(units):
        scans = []
        hs = np.empty((4,) + x.shape, dtype=x.dtype)
        for d in Direction:
            hs[d], sc = propagate_direction_cached(cur, gate_data[:, :, :, d, :],
                                                   d, kind, check=False)
            scans.append(sc)
        cur, winner = integrate_max(hs)
        caches.append(UnitCache(scans, winner))
    return cur, caches


def spn_backward(grad: np.ndarray, caches: list):
    """Gradients of spn_forward: returns (dx, dgates (H, W, C, 4, K))."""
    kind = caches[0].scans[0].kind
    k = kind.gates_per_direction
    dgates = np.zeros(grad.shape + (4, k), dtype=grad.dtype)
    g = grad
    for unit in reversed(caches):
        per_dir = integrate_max_backward(g, unit.winner)
        gx = np.zeros_like(g)
        for d in Direction:
            dxd, dgd = propagate_direction_backward(per_dir[d], unit.scans[d])
            gx += dxd
            dgates[:, :, :, d, :] += dgd
        g = gx
    return g, dgates


def step_matrix(gate_line: np.ndarray, kind: ConnectionKind) -> np.ndarray:
    """Dense (n, n) one-step transfer matrix for one scan line's gates.

    `gate_line` is (n, K) in scan coordinates: entry (i, j) of the result
    weights previous-line position i-1, i, or i+1 feeding position i.
    """
    n, k = gate_line.shape
    if k != kind.gates_per_direction:
        raise DimensionError(f"gate line has {k} slots, kind needs {kind.gates_per_direction}")
    if kind == ConnectionKind.ONE_WAY:
        return np.diag(gate_line[:, 0])
    w = np.diag(gate_line[:, GATE_SAME])
    if n > 1:
        w += np.diag(gate_line[1:, GATE_PREV], -1)
        w += np.diag(gate_line[:-1, GATE_NEXT], 1)
    return w


def random_gates(height: int, width: int, channels: int, kind: ConnectionKind,
                 rng: np.random.Generator, low: float = 0.0, high: float = None,
                 project: bool = False) -> np.ndarray:
    """Sample gates uniformly, honoring the boundary contract.

    The default range keeps per-pixel gate sums below one; pass `project=True`
    to clamp arbitrary ranges back into the stable region.
    """
    k = kind.gates_per_direction
    if high is None:
        high = 0.9 / k
    data = rng.uniform(low, high, size=(height, width, channels, 4, k))
    data = apply_boundary(data, kind)
    if project:
        from .stability import project_gates
        data = project_gates(data, kind)
    return data
