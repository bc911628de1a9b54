"""Value iteration on the simplex grid.

One sweep maps a value field ``V`` to ``max(-Pi T, Vc(Pi))`` at every grid
point, where the continuation value is

    Vc(Pi) = r h - Pi Q c h - d + int V(posterior(Pi, y)) Pi P F(y) dy

with ``V`` between grid points given by barycentric interpolation and the
integral by composite Gauss-Legendre quadrature.  For a fixed model and
grid the map ``V -> Vc`` is affine with nonnegative weights, so the
quadrature/interpolation weights of each grid point are assembled once (on
first use) and every later evaluation is a weighted gather.
"""

from __future__ import annotations

import enum
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .model import Action, Model
from .simplex import SimplexGrid, ValueField, interpolate, locate

PANEL_ORDER = 8
COVERAGE_TOL = 1e-6
_CHUNK = 2048


class QuadratureCoverageError(ArithmeticError):
    pass


class NumericalFailureError(ArithmeticError):
    def __init__(self, position: int, belief):
        self.position = position
        self.belief = belief
        super().__init__(f"non-finite value at grid point {position} (belief {belief})")


class Init(str, enum.Enum):
    LOWER_T = "LowerT"
    UPPER_U = "UpperU"


@dataclass(frozen=True)
class SolverOptions:
    epsilon: float = 1e-4
    max_iterations: int = 20_000
    quadrature_nodes: int = 96
    quadrature_range_sigmas: float = 8.0
    accelerate: bool = True
    init: Init = Init.LOWER_T
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "init", Init(self.init))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.quadrature_nodes < PANEL_ORDER:
            raise ValueError(f"quadrature_nodes must be at least {PANEL_ORDER}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.quadrature_range_sigmas > 0:
            raise ValueError("quadrature_range_sigmas must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SolverOptions":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown solver option {sorted(unknown)[0]!r}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init"] = self.init.value
        return d


def quadrature_rule(model: Model, options: SolverOptions) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights over the observation range.

    The node count is rounded up to a whole number of 8-point panels.
    """
    lo, hi = model.observation_range(options.quadrature_range_sigmas)
    panels = -(-options.quadrature_nodes // PANEL_ORDER)
    x, w = np.polynomial.legendre.leggauss(PANEL_ORDER)
    edges = np.linspace(lo, hi, panels + 1)
    half = np.diff(edges) / 2
    mid = (edges[:-1] + edges[1:]) / 2
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _kernel(model: Model, grid: SimplexGrid, beliefs: np.ndarray,
            nodes: np.ndarray, qweights: np.ndarray, F: np.ndarray):
    """Interpolation positions and weights of the continuation integral.

    Returns ``(positions, weights, coverage)`` with the first two of shape
    ``(m, Q * (N + 1))``; ``coverage`` is the quadrature mass of the
    predictive density, which should be one.
    """
    prior = beliefs @ model.P
    den = prior @ F.T
    joint = prior[:, None, :] * F[None, :, :]
    safe = np.where(den > 0, den, 1.0)
    post = np.where((den > 0)[..., None], joint / safe[..., None], prior[:, None, :])
    pos, bw = locate(grid, post)
    mass = den * qweights[None, :]
    w = mass[..., None] * bw
    m = len(beliefs)
    return pos.reshape(m, -1), w.reshape(m, -1), mass.sum(axis=1)


class GridOperator:
    """Cached continuation-value map of one model on one grid."""

    def __init__(self, model: Model, grid: SimplexGrid, options: SolverOptions):
        if grid.n_causes != model.n_causes:
            raise ValueError("grid and model disagree on the number of causes")
        self.model = model
        self.grid = grid
        self.options = options
        self.nodes, self.qweights = quadrature_rule(model, options)
        self.F = model.densities_at(self.nodes)
        B = grid.beliefs
        h, d, r = model.h, model.spec.sample_cost, model.spec.reward_rate
        self.base = r * h - (B @ (model.Q @ model.c)) * h - d
        self.stop = model.stop_value(B)
        width = len(self.nodes) * model.n_states
        self._pos = np.zeros((grid.size, width), dtype=np.int64)
        self._w = np.zeros((grid.size, width))
        self._ready = np.zeros(grid.size, dtype=bool)

    @property
    def assembled(self) -> int:
        return int(self._ready.sum())

    def _assemble(self, idx: np.ndarray) -> None:
        pos, w, cov = _kernel(self.model, self.grid, self.grid.beliefs[idx],
                              self.nodes, self.qweights, self.F)
        bad = np.abs(cov - 1.0) > COVERAGE_TOL
        if np.any(bad):
            j = idx[np.argmax(bad)]
            raise QuadratureCoverageError(
                f"quadrature covers only {cov[np.argmax(bad)]:.9f} of the predictive "
                f"density at grid point {j}; widen quadrature_range_sigmas")
        self._pos[idx] = pos
        self._w[idx] = w
        self._ready[idx] = True

    def ensure(self, idx: np.ndarray) -> None:
        missing = idx[~self._ready[idx]]
        if len(missing) == 0:
            return
        chunks = [missing[i:i + _CHUNK] for i in range(0, len(missing), _CHUNK)]
        workers = max(1, self.options.workers)
        if workers == 1 or len(chunks) == 1:
            for c in chunks:
                self._assemble(c)
        else:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(self._assemble, chunks))

    def continuation(self, values: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        """Continuation values against ``values`` at grid positions ``idx`` (all if None)."""
        if idx is None:
            idx = np.arange(self.grid.size)
        self.ensure(idx)
        # row-wise reduction: identical bits whichever subset is evaluated
        return self.base[idx] + np.sum(self._w[idx] * values[self._pos[idx]], axis=1)


def continuation_value(model: Model, field: ValueField, beliefs,
                       options: SolverOptions = SolverOptions()):
    """Expected reward of continuing one interval from ``beliefs``, then receiving ``field``."""
    b = np.atleast_2d(np.asarray(beliefs, dtype=float))
    nodes, qw = quadrature_rule(model, options)
    F = model.densities_at(nodes)
    pos, w, cov = _kernel(model, field.grid, b, nodes, qw, F)
    if np.any(np.abs(cov - 1.0) > COVERAGE_TOL):
        raise QuadratureCoverageError("quadrature range too narrow for the predictive density")
    h, d, r = model.h, model.spec.sample_cost, model.spec.reward_rate
    out = r * h - (b @ (model.Q @ model.c)) * h - d + np.sum(w * field.values[pos], axis=1)
    return out if np.ndim(beliefs) > 1 else float(out[0])


class SweepResult(NamedTuple):
    field: ValueField
    actions: np.ndarray
    continuation: np.ndarray
    evaluated: int


def _finish(op: GridOperator, idx: np.ndarray, cont: np.ndarray) -> SweepResult:
    grid = op.grid
    values = op.stop.copy()
    actions = np.full(grid.size, Action.STOP, dtype=np.int8)
    full_cont = np.full(grid.size, np.nan)
    full_cont[idx] = cont
    stop_here = op.stop[idx] >= cont
    values[idx] = np.where(stop_here, op.stop[idx], cont)
    actions[idx] = np.where(stop_here, Action.STOP, Action.CONTINUE)
    bad = ~np.isfinite(values)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise NumericalFailureError(j, grid.beliefs[j].tolist())
    return SweepResult(ValueField(grid, values), actions, full_cont, len(idx))


def sweep(model: Model, field: ValueField, options: SolverOptions = SolverOptions(),
          operator: Optional[GridOperator] = None) -> SweepResult:
    """One synchronous Bellman update at every grid point (ties stop)."""
    op = operator or GridOperator(model, field.grid, options)
    if model.do_not_initiate:
        # every point stops; nothing to integrate
        return _finish(op, np.arange(0), np.empty(0))
    idx = np.arange(field.grid.size)
    return _finish(op, idx, op.continuation(field.values, idx))


def accelerated_sweep(model: Model, field: ValueField, previous_actions: Optional[np.ndarray],
                      options: SolverOptions = SolverOptions(),
                      operator: Optional[GridOperator] = None) -> SweepResult:
    """Bellman update that walks each row only up to its control limit.

    Along a row (increasing ``pi_1`` at fixed ``pi_2..pi_N``) the stop set
    is an end segment, so once a point is found to stop the rest of the
    row is assigned ``-Pi T`` without integration.  Points before the
    previous sweep's limit are always evaluated; the walk then resumes at
    the previous limit and advances until the current limit is found.
    Without ``previous_actions`` every row is walked from ``pi_1 = 0``.
    """
    grid = field.grid
    op = operator or GridOperator(model, grid, options)
    if model.do_not_initiate:
        return _finish(op, np.arange(0), np.empty(0))
    starts, lengths = grid.row_start, grid.row_length
    n_rows = grid.n_rows
    row_of = np.repeat(np.arange(n_rows), lengths)
    offset = np.arange(grid.size) - starts[row_of]

    if previous_actions is None:
        prev_limit = np.zeros(n_rows, dtype=np.int64)
    else:
        prev_stop = np.asarray(previous_actions) == Action.STOP
        cand = np.where(prev_stop, offset, lengths[row_of])
        prev_limit = np.minimum.reduceat(cand, starts)

    first = offset < prev_limit[row_of]
    idx = np.nonzero(first)[0]
    cont = op.continuation(field.values, idx)
    found = np.zeros(n_rows, dtype=bool)
    found[row_of[idx[op.stop[idx] >= cont]]] = True

    # resume each unresolved row at the previous limit
    parts_idx, parts_cont = [idx], [cont]
    walk = np.nonzero(~found & (prev_limit < lengths))[0]
    j = prev_limit[walk]
    while len(walk):
        p = starts[walk] + j
        c = op.continuation(field.values, p)
        parts_idx.append(p)
        parts_cont.append(c)
        keep = (op.stop[p] < c) & (j + 1 < lengths[walk])
        walk, j = walk[keep], j[keep] + 1

    all_idx = np.concatenate(parts_idx)
    all_cont = np.concatenate(parts_cont)
    order = np.argsort(all_idx, kind="stable")
    return _finish(op, all_idx[order], all_cont[order])


@dataclass
class SolveStats:
    iterations: int = 0
    delta: float = 0.0
    seconds: float = 0.0
    evaluated: int = 0
    skipped: int = 0
    converged: bool = True
    assembled: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(eq=False)
class Solution:
    """Value field and actions of a (possibly unconverged) value iteration.

    ``continuation`` holds the last sweep's continuation values; it is NaN
    at points that sweep assigned without integrating.
    """

    field: ValueField
    actions: np.ndarray
    continuation: np.ndarray
    stats: SolveStats
    model: Model = dc_field(repr=False)
    options: SolverOptions = dc_field(repr=False)
    init: Init = Init.LOWER_T
    certified_gap: Optional[float] = None
    operator: Optional[GridOperator] = dc_field(default=None, repr=False)

    @property
    def grid(self) -> SimplexGrid:
        return self.field.grid

    @property
    def converged(self) -> bool:
        return self.stats.converged

    @property
    def stop(self) -> np.ndarray:
        return self.actions == Action.STOP

    def value_at(self, belief):
        return interpolate(self.field, belief)

    def vertex_value(self, i: int) -> float:
        return float(self.field.values[self.grid.vertex(i)])


SweepCallback = Callable[[int, np.ndarray, np.ndarray], None]


def _initial(model: Model, grid: SimplexGrid, init: Init) -> ValueField:
    if init == Init.UPPER_U:
        if not model.structured:
            raise ValueError("the UpperU start needs the absorbing-state bounds")
        return ValueField(grid, model.upper_value(grid.beliefs))
    return ValueField(grid, model.stop_value(grid.beliefs))


def _trivial(model: Model, grid: SimplexGrid, options: SolverOptions, init: Init,
             op: Optional[GridOperator]) -> Solution:
    f = ValueField(grid, model.stop_value(grid.beliefs))
    acts = np.full(grid.size, Action.STOP, dtype=np.int8)
    return Solution(f, acts, np.full(grid.size, np.nan), SolveStats(), model, options,
                    init, operator=op)


class _Iteration:
    """State of one value-iteration sequence; advanced sweep by sweep."""

    def __init__(self, model, grid, options, init, op):
        self.model, self.options, self.init, self.op = model, options, init, op
        self.field = _initial(model, grid, init)
        self.actions = None
        self.cont = np.full(grid.size, np.nan)
        self.delta = np.inf
        self.m = 0
        self.evaluated = 0
        self.skipped = 0
        self.fast = options.accelerate and init == Init.LOWER_T and model.structured

    def step(self) -> None:
        if self.fast:
            res = accelerated_sweep(self.model, self.field, self.actions, self.options, self.op)
        else:
            res = sweep(self.model, self.field, self.options, self.op)
        self.delta = float(np.max(np.abs(res.field.values - self.field.values)))
        self.field, self.actions, self.cont = res.field, res.actions, res.continuation
        self.evaluated += res.evaluated
        self.skipped += self.field.grid.size - res.evaluated
        self.m += 1

    def solution(self, seconds: float, converged: bool) -> Solution:
        stats = SolveStats(self.m, self.delta, seconds, self.evaluated, self.skipped,
                           converged, self.op.assembled)
        return Solution(self.field, self.actions, self.cont, stats, self.model, self.options,
                        self.init, operator=self.op)


def solve(model: Model, grid: SimplexGrid, options: SolverOptions = SolverOptions(),
          callback: Optional[SweepCallback] = None,
          operator: Optional[GridOperator] = None) -> Solution:
    """Iterate sweeps from ``-Pi T`` (or ``-Pi U``) until the sup-norm change is below epsilon.

    ``callback(m, values, actions)`` is invoked after every sweep.  When
    ``max_iterations`` is hit the last iterate is returned with
    ``stats.converged = False``.
    """
    t0 = time.perf_counter()
    op = operator or GridOperator(model, grid, options)
    if model.do_not_initiate:
        return _trivial(model, grid, options, options.init, op)
    it = _Iteration(model, grid, options, options.init, op)
    while it.m < options.max_iterations:
        it.step()
        if callback is not None:
            callback(it.m, it.field.values, it.actions)
        if it.delta < options.epsilon:
            break
    return it.solution(time.perf_counter() - t0, it.delta < options.epsilon)


class CertifiedSolution(NamedTuple):
    lower: Solution
    upper: Solution
    gap: float


def certified_solve(model: Model, grid: SimplexGrid, options: SolverOptions = SolverOptions(),
                    callback: Optional[Callable[[int, Solution, Solution], None]] = None,
                    lower_callback: Optional[SweepCallback] = None,
                    upper_callback: Optional[SweepCallback] = None) -> CertifiedSolution:
    """Run the iterations from ``-Pi T`` and from ``-Pi U`` side by side.

    The two sequences bracket the fixed point (lower rising, upper
    falling), so ``gap = max(V_upper - V_lower)`` bounds the error of
    either.  Both are advanced until the gap falls below epsilon.
    """
    t0 = time.perf_counter()
    op = GridOperator(model, grid, options)
    if model.do_not_initiate:
        lo = _trivial(model, grid, options, Init.LOWER_T, op)
        up = _trivial(model, grid, options, Init.UPPER_U, op)
        lo.certified_gap = up.certified_gap = 0.0
        return CertifiedSolution(lo, up, 0.0)
    lower = _Iteration(model, grid, options, Init.LOWER_T, op)
    upper = _Iteration(model, grid, options, Init.UPPER_U, op)
    gap = np.inf
    while lower.m < options.max_iterations:
        lower.step()
        upper.step()
        if lower_callback is not None:
            lower_callback(lower.m, lower.field.values, lower.actions)
        if upper_callback is not None:
            upper_callback(upper.m, upper.field.values, upper.actions)
        gap = float(np.max(upper.field.values - lower.field.values))
        if gap < options.epsilon:
            break
    ok = gap < options.epsilon
    secs = time.perf_counter() - t0
    lo, up = lower.solution(secs, ok), upper.solution(secs, ok)
    lo.certified_gap = up.certified_gap = gap
    return CertifiedSolution(lo, up, gap)
