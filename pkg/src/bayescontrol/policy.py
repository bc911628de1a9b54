"""Control-limit tables, structure checks and action queries."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .model import Action, Model
from .simplex import (SimplexGrid, ValueField, build_grid, field_to_rows, grid_neighbors,
                      locate)
from .solver import Solution, SolverOptions, continuation_value


class NotConvergedError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LimitTable:
    """``B_i`` over the grid rows of the other out-of-control coordinates.

    ``coords[r]`` holds ``(t_j for j in others)`` of row ``r``; ``limit[r]``
    is the smallest ``pi_i`` that stops, NaN when the whole row continues.
    """

    cause: int
    others: tuple[int, ...]
    coords: np.ndarray
    limit: np.ndarray
    switches: np.ndarray = field(repr=False)

    @property
    def scalar(self) -> float:
        if len(self.limit) != 1:
            raise ValueError("limit table has more than one row")
        return float(self.limit[0])


def _direction_rows(grid: SimplexGrid, i: int):
    """Points grouped into rows of increasing ``t_i`` at fixed other ``t_j`` (j >= 1)."""
    others = tuple(j for j in range(1, grid.n_causes + 1) if j != i)
    pts = grid.points
    keys = [pts[:, i]] + [pts[:, j] for j in reversed(others)]
    order = np.lexsort(keys)
    key = pts[order][:, list(others)] if others else np.zeros((grid.size, 0), dtype=np.int64)
    if others:
        change = np.any(key[1:] != key[:-1], axis=1)
    else:
        change = np.zeros(grid.size - 1, dtype=bool)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1])
    return others, order, starts, key[starts]


def _limit_table(grid: SimplexGrid, stop: np.ndarray, i: int) -> LimitTable:
    others, order, starts, coords = _direction_rows(grid, i)
    lengths = np.diff(np.concatenate([starts, [grid.size]]))
    row_of = np.repeat(np.arange(len(starts)), lengths)
    offset = np.arange(grid.size) - starts[row_of]
    s = stop[order]
    big = grid.resolution + 1
    first = np.minimum.reduceat(np.where(s, offset, big), starts)
    late_continue = ~s & (offset > first[row_of])
    switches = np.bincount(row_of[late_continue], minlength=len(starts))
    limit = np.where(first < big, first / grid.resolution, np.nan)
    return LimitTable(i, others, coords, limit, switches)


def _cell_offsets(n: int) -> np.ndarray:
    """t-coordinate offsets between corners of one Freudenthal cell."""
    out = []
    for bits in range(1, 2 ** n):
        ds = np.array([(bits >> j) & 1 for j in range(n)], dtype=np.int64)
        for sgn in (1, -1):
            d = sgn * ds
            dt = np.empty(n + 1, dtype=np.int64)
            dt[0] = -d[0]
            dt[1:n] = d[:-1] - d[1:]
            dt[n] = d[-1]
            out.append(dt)
    return np.array(out)


def _boundary_stop_points(grid: SimplexGrid, stop: np.ndarray) -> np.ndarray:
    """Stop points sharing a triangulation cell with some continue point."""
    need = np.zeros(grid.size, dtype=bool)
    cont_pts = grid.points[~stop]
    k = grid.resolution
    for dt in _cell_offsets(grid.n_causes):
        q = cont_pts + dt
        ok = np.all((q >= 0) & (q <= k), axis=1)
        idx = grid.index_of(q[ok])
        need[idx] = True
    return np.nonzero(need & stop)[0]


@dataclass(frozen=True, eq=False)
class Policy:
    grid: SimplexGrid
    actions: np.ndarray
    continuation: np.ndarray = field(repr=False)
    term_costs: np.ndarray
    limits: dict[int, LimitTable] = field(repr=False)
    do_not_initiate: bool = False
    epsilon: float = float("nan")
    spec_digest: str = ""

    @property
    def stop(self) -> np.ndarray:
        return self.actions == Action.STOP

    def threshold(self, i: int = 1) -> float:
        """Scalar control limit (single-cause models)."""
        return self.limits[i].scalar


def policy_from_actions(grid: SimplexGrid, actions, continuation, term_costs, *,
                        do_not_initiate=False, epsilon=float("nan"), spec_digest="") -> Policy:
    actions = np.asarray(actions, dtype=np.int8)
    stop = actions == Action.STOP
    limits = {i: _limit_table(grid, stop, i) for i in range(1, grid.n_causes + 1)}
    return Policy(grid, actions, np.asarray(continuation, dtype=float),
                  np.asarray(term_costs, dtype=float), limits, do_not_initiate,
                  epsilon, spec_digest)


def extract(solution: Solution) -> Policy:
    """Build the control-limit policy of a converged solution."""
    if not solution.converged:
        raise NotConvergedError(
            f"solution did not converge (last delta {solution.stats.delta:.3g}); "
            "raise max_iterations or epsilon")
    grid = solution.grid
    model = solution.model
    stop = solution.stop
    cont = solution.continuation.copy()
    if not model.do_not_initiate:
        fill = _boundary_stop_points(grid, stop)
        fill = fill[np.isnan(cont[fill])]
        if len(fill):
            if solution.operator is not None:
                cont[fill] = solution.operator.continuation(solution.field.values, fill)
            else:
                cont[fill] = continuation_value(model, solution.field, grid.beliefs[fill],
                                                solution.options)
    return policy_from_actions(grid, solution.actions, cont, model.T,
                               do_not_initiate=model.do_not_initiate,
                               epsilon=solution.options.epsilon,
                               spec_digest=model.spec.digest())


def decide_many(policy: Policy, beliefs) -> np.ndarray:
    """Vectorized ``decide``; returns an int8 array of ``Action`` codes."""
    b = np.atleast_2d(np.asarray(beliefs, dtype=float))
    if policy.do_not_initiate:
        return np.full(len(b), Action.STOP, dtype=np.int8)
    pos, w = locate(policy.grid, b)
    live = w > 0
    s = policy.stop[pos]
    all_stop = np.all(s | ~live, axis=1)
    all_cont = np.all(~s | ~live, axis=1)
    out = np.where(all_stop, Action.STOP, Action.CONTINUE).astype(np.int8)
    mixed = ~all_stop & ~all_cont
    if np.any(mixed):
        c = policy.continuation[pos[mixed]]
        wm = w[mixed]
        c = np.where(wm > 0, c, 0.0)
        vc = np.sum(c * wm, axis=1)
        vs = -(b[mixed] @ policy.term_costs)
        out[mixed] = np.where(vs >= vc, Action.STOP, Action.CONTINUE)
    return out


def decide(policy: Policy, belief) -> Action:
    """Stop or continue at an arbitrary belief."""
    return Action(int(decide_many(policy, np.asarray(belief, dtype=float)[None, :])[0]))


@dataclass
class StructureReport:
    resolution: int
    single_switch_violations: int = 0
    monotonicity_violations: int = 0
    convexity_violations: int = 0
    connectivity: dict = field(default_factory=dict)
    details: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return (self.single_switch_violations == 0 and self.monotonicity_violations == 0
                and self.convexity_violations == 0 and all(self.connectivity.values()))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _connected(grid: SimplexGrid, mask: np.ndarray, edges) -> bool:
    idx = np.nonzero(mask)[0]
    if len(idx) <= 1:
        return True
    src, dst = edges
    keep = mask[src] & mask[dst]
    local = np.full(grid.size, -1)
    local[idx] = np.arange(len(idx))
    g = coo_matrix((np.ones(int(keep.sum())), (local[src[keep]], local[dst[keep]])),
                   shape=(len(idx), len(idx)))
    n, _ = connected_components(g, directed=False)
    return n == 1


def verify_structure(policy: Policy, max_details: int = 50) -> StructureReport:
    """Check single switches, monotone and convex limits, and region connectivity.

    Limits are compared on the grid, so convexity is tested with one grid
    step of slack on second differences.
    """
    grid = policy.grid
    k = grid.resolution
    step = grid.step
    rep = StructureReport(resolution=k)

    for i, tab in policy.limits.items():
        bad_rows = np.nonzero(tab.switches)[0]
        rep.single_switch_violations += int(len(bad_rows))
        for r in bad_rows[:max_details]:
            rep.details.append({"check": "single_switch", "cause": i,
                                "row": dict(zip(map(str, tab.others), tab.coords[r].tolist()))})
        if not tab.others:
            continue
        # limit of an all-continue row sits one step past the row end
        eff = np.where(np.isnan(tab.limit), (k - tab.coords.sum(axis=1) + 1) / k, tab.limit)
        lookup = {tuple(c): r for r, c in enumerate(tab.coords.tolist())}
        for a in range(len(tab.others)):
            e = np.zeros(len(tab.others), dtype=np.int64)
            e[a] = 1
            for r, c in enumerate(tab.coords):
                up = lookup.get(tuple((c + e).tolist()))
                if up is None:
                    continue
                if eff[up] > eff[r] + 1e-12:
                    rep.monotonicity_violations += 1
                    if len(rep.details) < max_details:
                        rep.details.append({"check": "monotone", "cause": i,
                                            "row": c.tolist(), "along": tab.others[a]})
                down = lookup.get(tuple((c - e).tolist()))
                if down is None or np.isnan(tab.limit[[down, r, up]]).any():
                    continue
                second = tab.limit[down] + tab.limit[up] - 2 * tab.limit[r]
                if second < -step - 1e-12:
                    rep.convexity_violations += 1
                    if len(rep.details) < max_details:
                        rep.details.append({"check": "convex", "cause": i, "row": c.tolist(),
                                            "along": tab.others[a], "second_difference": second})

    edges = grid_neighbors(grid)
    rep.connectivity = {"stop": _connected(grid, policy.stop, edges),
                        "continue": _connected(grid, ~policy.stop, edges)}
    return rep


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def limit_rows(policy: Policy, i: int):
    tab = policy.limits[i]
    k = policy.grid.resolution
    header = [f"pi_{j}" for j in tab.others] + [f"B_{i}"]
    rows = []
    for c, b in zip(tab.coords.tolist(), tab.limit.tolist()):
        rows.append([t / k for t in c] + ["none" if np.isnan(b) else b])
    return header, rows


def save_policy(policy: Policy, directory, values: Optional[np.ndarray] = None,
                spec: Optional[dict] = None) -> list[Path]:
    """Write the action map, ``B_i`` tables and the JSON header."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    grid = policy.grid
    vals = values if values is not None else np.full(grid.size, np.nan)
    header, rows = field_to_rows(ValueField(grid, vals),
                                 {"action": policy.actions.tolist(),
                                  "continuation": policy.continuation.tolist()})
    written = [out / "action_map.csv"]
    _write_csv(written[0], header, rows)
    for i in policy.limits:
        p = out / f"limits_B{i}.csv"
        _write_csv(p, *limit_rows(policy, i))
        written.append(p)
    meta = {"spec_hash": policy.spec_digest, "resolution": grid.resolution,
            "n_causes": grid.n_causes, "epsilon": policy.epsilon,
            "do_not_initiate": policy.do_not_initiate,
            "term_costs": policy.term_costs.tolist()}
    if spec is not None:
        meta["spec"] = spec
    p = out / "policy.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def load_policy(directory) -> Policy:
    src = Path(directory)
    meta = json.loads((src / "policy.json").read_text())
    grid = build_grid(meta["n_causes"], meta["resolution"])
    n = grid.n_causes
    actions = np.empty(grid.size, dtype=np.int8)
    cont = np.empty(grid.size)
    with open(src / "action_map.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            t = [int(row[f"t_{j}"]) for j in range(n + 1)]
            p = int(grid.index_of(np.asarray(t)))
            actions[p] = int(row["action"])
            cont[p] = float(row["continuation"])
    return policy_from_actions(grid, actions, cont, meta["term_costs"],
                               do_not_initiate=meta["do_not_initiate"],
                               epsilon=meta["epsilon"], spec_digest=meta["spec_hash"])


def stop_everywhere(grid: SimplexGrid, model: Model) -> Policy:
    acts = np.full(grid.size, Action.STOP, dtype=np.int8)
    return policy_from_actions(grid, acts, np.full(grid.size, np.nan), model.T,
                               do_not_initiate=True, spec_digest=model.spec.digest())
