"""Choice of the fixed sampling interval ``h``.

``R0(h)`` is the negated reward of the perfectly observed process.
Running the chart only pays when ``R0(h) <= T_0``, which brackets the
optimal interval before any value iteration is done.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import bisect

from .model import ModelSpec, sojourn_fraction, validate_and_build
from .simplex import SimplexGrid
from .solver import SolverOptions, solve


def r0_of_h(spec: ModelSpec, h):
    """Closed-form ``R0`` at interval ``h`` (vectorized over ``h``)."""
    h = np.asarray(h, dtype=float)
    lam_i = np.asarray(spec.rates, dtype=float)
    lam = lam_i.sum()
    weights = lam_i / lam
    c_lam = float(np.dot(spec.oc_costs, weights))
    t_lam = float(np.dot(spec.term_costs[1:], weights))
    x = lam * h
    gamma = sojourn_fraction(x)
    out = (gamma * c_lam * h - spec.reward_rate * h + spec.sample_cost) / (-np.expm1(-x)) + t_lam
    return out if out.ndim else float(out)


def feasible_intervals(spec: ModelSpec, h_min: float, h_max: float, n_scan: int = 1000,
                       rtol: float = 1e-3) -> list[tuple[float, float]]:
    """All maximal ``h``-intervals within ``[h_min, h_max]`` where ``R0(h) <= T_0``.

    A log-spaced scan locates sign changes of ``R0 - T_0``; each is refined by
    bisection to relative tolerance ``rtol``.  An interval touching the scan
    range is reported with that end of the range.
    """
    if not 0 < h_min < h_max:
        raise ValueError("need 0 < h_min < h_max")
    t0 = spec.term_costs[0]

    def g(h):
        return r0_of_h(spec, h) - t0

    hs = np.geomspace(h_min, h_max, n_scan)
    ok = g(hs) <= 0
    out = []
    j = 0
    while j < n_scan:
        if not ok[j]:
            j += 1
            continue
        start = j
        while j + 1 < n_scan and ok[j + 1]:
            j += 1
        lo = h_min if start == 0 else bisect(g, hs[start - 1], hs[start], rtol=rtol,
                                             xtol=1e-12)
        hi = h_max if j == n_scan - 1 else bisect(g, hs[j], hs[j + 1], rtol=rtol, xtol=1e-12)
        out.append((float(lo), float(hi)))
        j += 1
    return out


def feasible_interval(spec: ModelSpec, h_min: float, h_max: float, n_scan: int = 1000,
                      rtol: float = 1e-3) -> Optional[tuple[float, float]]:
    """The widest feasible interval, or None when ``R0 > T_0`` throughout."""
    found = feasible_intervals(spec, h_min, h_max, n_scan, rtol)
    if not found:
        return None
    return max(found, key=lambda ab: ab[1] - ab[0])


@dataclass
class IntervalAnalysis:
    feasible: Optional[tuple[float, float]]
    curve: list[tuple[float, float]]
    h_star: Optional[float]
    bounds_curve: list[tuple[float, float, float]]
    failures: dict = field(default_factory=dict)
    iterations: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[float, float, float, float]]:
        """``(h, reward, upper_bound, lower_bound)`` per evaluated interval."""
        return [(h, v, ub, lb) for (h, v), (_, ub, lb) in zip(self.curve, self.bounds_curve)]


def optimize_h(spec: ModelSpec, h_values: Sequence[float], grid: SimplexGrid,
               options: SolverOptions = SolverOptions(), enforce_feasibility: bool = True,
               feasible: Optional[tuple[float, float]] = None) -> IntervalAnalysis:
    """Solve at each ``h`` and record ``V(e_0)``; ``h_star`` maximizes it (ties: smaller h).

    With ``enforce_feasibility`` an ``h`` outside ``R0(h) <= T_0`` is not
    solved and scores ``-T_0`` (stopping at time zero).  Per-``h`` solver
    errors are collected in ``failures`` without aborting the sweep.
    """
    h_values = [float(h) for h in h_values]
    if not h_values:
        raise ValueError("h_values must be nonempty")
    t0 = spec.term_costs[0]
    if feasible is None:
        feasible = feasible_interval(spec, min(h_values) / 2, max(h_values) * 2)

    def one(h):
        if enforce_feasibility and r0_of_h(spec, h) > t0:
            return -t0, 0, None
        try:
            sol = solve(validate_and_build(spec.replace(interval=h)), grid, options)
        except (ArithmeticError, ValueError) as exc:
            return math.nan, 0, f"{type(exc).__name__}: {exc}"
        return sol.vertex_value(0), sol.stats.iterations, None

    workers = max(1, options.workers)
    if workers == 1:
        results = [one(h) for h in h_values]
    else:
        inner = SolverOptions(**{**options.to_dict(), "workers": 1})
        options = inner
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, h_values))

    curve, bounds, failures, iters = [], [], {}, []
    for h, (v, m, err) in zip(h_values, results):
        curve.append((h, v))
        bounds.append((h, -r0_of_h(spec, h), -t0))
        iters.append(m)
        if err is not None:
            failures[h] = err
    finite = [(v, h) for h, v in curve if math.isfinite(v)]
    h_star = None
    if finite:
        best = max(v for v, _ in finite)
        h_star = min(h for v, h in finite if v == best)
    return IntervalAnalysis(feasible, curve, h_star, bounds, failures, iters)
