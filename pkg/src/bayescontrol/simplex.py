"""Regular grid on the belief simplex and piecewise-linear interpolation.

Grid points are integer tuples ``(t_0, ..., t_N)`` summing to ``k``; point
``t`` stands for the belief ``t / k``.  Points are ordered with ``t_1``
varying fastest, then ``t_2`` and so on, so each *row* (fixed
``t_2..t_N``, increasing ``t_1``) is a contiguous block.

Interpolation uses the Freudenthal (Kuhn) triangulation expressed in the
tail-sum coordinates ``s_j = t_j + ... + t_N``, in which the simplex grid
is the order cone ``k >= s_1 >= ... >= s_N >= 0`` of the cubic lattice.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_POINTS = 2_000_000


class CapacityError(MemoryError):
    def __init__(self, required: int, cap: int):
        self.required = required
        self.cap = cap
        super().__init__(f"grid needs {required} points, cap is {cap}")


def default_resolution(n_causes: int) -> int:
    return {1: 200, 2: 100, 3: 40}.get(n_causes, 20)


def point_count(n_causes: int, resolution: int) -> int:
    return math.comb(n_causes + resolution, n_causes)


@dataclass(frozen=True, eq=False)
class SimplexGrid:
    n_causes: int
    resolution: int
    points: np.ndarray = field(repr=False)
    beliefs: np.ndarray = field(repr=False)
    row_start: np.ndarray = field(repr=False)
    row_length: np.ndarray = field(repr=False)
    _lookup: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def step(self) -> float:
        return 1.0 / self.resolution

    @property
    def n_rows(self) -> int:
        return len(self.row_start)

    def index_of(self, tuples) -> np.ndarray:
        """Dense positions of integer tuples ``(t_0..t_N)`` (or ``(t_1..t_N)``)."""
        t = np.asarray(tuples, dtype=np.int64)
        if t.shape[-1] == self.n_causes + 1:
            t = t[..., 1:]
        return self._lookup[tuple(np.moveaxis(t, -1, 0))]

    def vertex(self, i: int) -> int:
        """Position of the simplex vertex ``e_i``."""
        t = np.zeros(self.n_causes + 1, dtype=np.int64)
        t[i] = self.resolution
        return int(self.index_of(t))

    def row_positions(self, r: int) -> np.ndarray:
        return np.arange(self.row_start[r], self.row_start[r] + self.row_length[r])


def build_grid(n_causes: int, resolution: int, max_points: int = DEFAULT_MAX_POINTS) -> SimplexGrid:
    if n_causes < 1 or resolution < 1:
        raise ValueError("need n_causes >= 1 and resolution >= 1")
    k = resolution
    count = point_count(n_causes, k)
    if count > max_points or (k + 1) ** n_causes > 50 * max_points:
        raise CapacityError(count, max_points)

    outer = []
    # rows over (t_2..t_N), most significant last
    for rest in itertools.product(range(k + 1), repeat=n_causes - 1):
        if sum(rest) <= k:
            outer.append(rest[::-1])
    outer.sort(key=lambda r: r[::-1])
    rows = []
    starts, lengths = [], []
    pos = 0
    for rest in outer:
        length = k - sum(rest) + 1
        t1 = np.arange(length)
        block = np.empty((length, n_causes + 1), dtype=np.int64)
        block[:, 1] = t1
        block[:, 2:] = rest
        block[:, 0] = k - t1 - sum(rest)
        rows.append(block)
        starts.append(pos)
        lengths.append(length)
        pos += length
    points = np.concatenate(rows)
    assert len(points) == count

    lookup = np.full((k + 1,) * n_causes, -1, dtype=np.int64)
    lookup[tuple(points[:, 1:].T)] = np.arange(count)
    points.setflags(write=False)
    beliefs = points / k
    beliefs.setflags(write=False)
    return SimplexGrid(n_causes, k, points, beliefs,
                       np.asarray(starts, dtype=np.int64),
                       np.asarray(lengths, dtype=np.int64), lookup)


def clean_beliefs(beliefs) -> np.ndarray:
    """Clamp float-noise negatives (> -1e-10) to zero and renormalize."""
    b = np.asarray(beliefs, dtype=float)
    if np.any(b < -1e-10):
        raise ValueError("belief has a negative component")
    b = np.clip(b, 0.0, None)
    return b / b.sum(axis=-1, keepdims=True)


def locate(grid: SimplexGrid, beliefs) -> tuple[np.ndarray, np.ndarray]:
    """Freudenthal cell corners and barycentric weights.

    Returns ``(positions, weights)``, each of shape ``beliefs.shape[:-1] +
    (N + 1,)``.  Weights are nonnegative and sum to one; corners carrying
    zero weight are aliased to the cell's base corner so every position is
    valid.
    """
    b = clean_beliefs(beliefs)
    lead = b.shape[:-1]
    n = grid.n_causes
    k = grid.resolution
    b = b.reshape(-1, n + 1)

    # tail sums s_j = k * (pi_j + ... + pi_N), j = 1..N
    s = k * np.cumsum(b[:, :0:-1], axis=1)[:, ::-1]
    s = np.clip(s, 0.0, k)
    base = np.floor(s)
    base = np.minimum(base, k)
    # keep the order cone: floor is monotone, but rounding in cumsum can
    # leave s_{j+1} a hair above s_j
    base = np.minimum.accumulate(base, axis=1)
    frac = np.clip(s - base, 0.0, 1.0)
    order = np.argsort(-frac, axis=1, kind="stable")
    fs = np.take_along_axis(frac, order, axis=1)

    m = len(b)
    weights = np.empty((m, n + 1))
    weights[:, 0] = 1.0 - fs[:, 0]
    weights[:, 1:n] = fs[:, :-1] - fs[:, 1:]
    weights[:, n] = fs[:, -1]

    corners = np.empty((m, n + 1, n), dtype=np.int64)
    cur = base.astype(np.int64)
    corners[:, 0] = cur
    rows = np.arange(m)
    for j in range(n):
        cur = cur.copy()
        cur[rows, order[:, j]] += 1
        corners[:, j + 1] = cur

    # back to t-coordinates t_j = s_j - s_{j+1}
    t = corners.copy()
    t[..., :-1] -= corners[..., 1:]
    valid = (np.all(t >= 0, axis=-1) & (corners[..., 0] <= k))
    zero = weights <= 0.0
    t[~valid | zero] = 0
    pos = grid._lookup[tuple(np.moveaxis(t, -1, 0))]
    pos = np.where(valid & ~zero, pos, -1)
    base_pos = pos[:, :1]
    bad = pos < 0
    if np.any(bad[:, 0]):
        # the base corner itself got zero weight: alias to the heaviest corner
        heavy = np.take_along_axis(pos, np.argmax(weights, axis=1)[:, None], axis=1)
        base_pos = np.where(bad[:, :1], heavy, base_pos)
    pos = np.where(bad, base_pos, pos)
    weights = np.where(bad, 0.0, weights)
    return pos.reshape(lead + (n + 1,)), weights.reshape(lead + (n + 1,))


@dataclass(eq=False)
class ValueField:
    grid: SimplexGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError("one value per grid point is required")

    def copy(self) -> "ValueField":
        return ValueField(self.grid, self.values.copy())


def interpolate(field: ValueField, beliefs):
    """Barycentric-weighted value at arbitrary beliefs."""
    pos, w = locate(field.grid, beliefs)
    out = np.sum(field.values[pos] * w, axis=-1)
    return out if out.ndim else float(out)


def grid_neighbors(grid: SimplexGrid) -> tuple[np.ndarray, np.ndarray]:
    """Edge list of the grid graph (one unit moved between two coordinates)."""
    n = grid.n_causes
    src, dst = [], []
    pts = grid.points
    for a in range(n + 1):
        for b in range(n + 1):
            if a >= b:
                continue
            shifted = pts.copy()
            shifted[:, a] -= 1
            shifted[:, b] += 1
            ok = shifted[:, a] >= 0
            idx = np.nonzero(ok)[0]
            src.append(idx)
            dst.append(grid.index_of(shifted[idx]))
    return np.concatenate(src), np.concatenate(dst)


def field_to_rows(field: ValueField, extra: dict | None = None) -> tuple[list[str], list[list]]:
    """Header and rows for CSV export: ``t_0..t_N, pi_0..pi_N, value`` (+ extra columns)."""
    g = field.grid
    n = g.n_causes
    header = [f"t_{i}" for i in range(n + 1)] + [f"pi_{i}" for i in range(n + 1)] + ["value"]
    cols = [g.points[:, i] for i in range(n + 1)] + [g.beliefs[:, i] for i in range(n + 1)]
    cols.append(field.values)
    for name, col in (extra or {}).items():
        header.append(name)
        cols.append(np.asarray(col))
    rows = [list(r) for r in zip(*[c.tolist() for c in cols])]
    return header, rows
