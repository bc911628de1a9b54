"""Monte Carlo evaluation of a control chart on a (possibly different) true process.

Replications run in fixed-size blocks, each with its own pair of random
streams (state path, observation noise) spawned from the root seed, so
results depend on ``seed`` and ``block_size`` only, never on the number of
workers.  Within a block every replication's state path and noise are
drawn each epoch whether or not it has stopped, which makes two runs with
the same seed and true process share their randomness (common random
numbers) even under different policies.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import Action, Model, ModelSpec, ValidationError, bayes_update, validate_and_build
from .policy import Policy, decide_many, extract
from .simplex import SimplexGrid
from .solver import SolverOptions, solve

DEFAULT_HORIZON = 100_000
DEFAULT_BLOCK = 2048
Z95 = 1.959963984540054


@dataclass(frozen=True, eq=False)
class TrueProcessSpec:
    """The process actually generating data: a spec plus rates between out-of-control states."""

    base: ModelSpec
    inter_rates: np.ndarray = None

    def __post_init__(self):
        n = self.base.n_causes
        r = np.zeros((n, n)) if self.inter_rates is None else np.array(self.inter_rates, float)
        if r.shape != (n, n):
            raise ValidationError("inter_rates", f"expected a {n}x{n} matrix")
        if np.any(np.diag(r) != 0):
            raise ValidationError("inter_rates", "diagonal must be zero")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValidationError("inter_rates", "entries must be finite and nonnegative")
        r.setflags(write=False)
        object.__setattr__(self, "inter_rates", r)

    @property
    def absorbing(self) -> bool:
        return not np.any(self.inter_rates)

    def model(self) -> Model:
        return validate_and_build(self.base, None if self.absorbing else self.inter_rates)

    def key(self) -> tuple:
        return self.base.digest(), self.inter_rates.tobytes()


@dataclass
class SimResult:
    mean_reward: float
    ci_halfwidth: float
    n_reps: int
    mean_stop_time: float
    false_alarm_rate: float
    seed: int
    std_reward: float = 0.0
    n_truncated: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Block:
    reward: np.ndarray
    tau: np.ndarray
    final_state: np.ndarray
    occupancy: np.ndarray
    truncated: np.ndarray


def _jump_tables(true: TrueProcessSpec):
    n = true.base.n_causes
    rates = np.zeros((n + 1, n + 1))
    rates[0, 1:] = true.base.rates
    rates[1:, 1:] = true.inter_rates
    exit_rate = rates.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(exit_rate[:, None] > 0, rates / exit_rate[:, None], 0.0)
    return exit_rate, np.cumsum(probs, axis=1)


def _holding(rng, exit_rate, states):
    e = rng.standard_exponential(len(states))
    r = exit_rate[states]
    with np.errstate(divide="ignore"):
        return np.where(r > 0, e / np.where(r > 0, r, 1.0), np.inf)


def _run_block(true: TrueProcessSpec, design: Model, policy: Policy, n: int,
               seq: np.random.SeedSequence, horizon: int) -> _Block:
    path_seq, obs_seq = seq.spawn(2)
    rng_path = np.random.default_rng(path_seq)
    rng_obs = np.random.default_rng(obs_seq)
    spec = true.base
    h = design.h
    n_states = spec.n_causes + 1
    c = np.concatenate([[0.0], spec.oc_costs])
    T = np.asarray(spec.term_costs)
    means = np.array([d.mean for d in spec.densities])
    sds = np.array([d.sd for d in spec.densities])
    exit_rate, cum = _jump_tables(true)
    per_interval = spec.reward_rate * h - spec.sample_cost

    state = np.zeros(n, dtype=np.int64)
    next_jump = _holding(rng_path, exit_rate, state)
    belief = np.zeros((n, n_states))
    belief[:, 0] = 1.0
    reward = np.zeros(n)
    occupancy = np.zeros((n, n_states))
    tau = np.zeros(n, dtype=np.int64)
    final_state = np.full(n, -1, dtype=np.int64)
    truncated = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    active = np.ones(n, dtype=bool)
    stops = decide_many(policy, belief) == Action.STOP
    reward[stops] -= T[0]
    final_state[stops] = 0
    active &= ~stops

    epoch = 0
    while active.any():
        t_lo, t_hi = epoch * h, (epoch + 1) * h
        cur = np.full(n, t_lo)
        occ = np.zeros((n, n_states))
        j = np.nonzero(next_jump < t_hi)[0]
        while len(j):
            occ[j, state[j]] += next_jump[j] - cur[j]
            cur[j] = next_jump[j]
            u = rng_path.random(len(j))
            state[j] = np.sum(u[:, None] >= cum[state[j]], axis=1)
            state[j] = np.minimum(state[j], n_states - 1)
            next_jump[j] = cur[j] + _holding(rng_path, exit_rate, state[j])
            j = j[next_jump[j] < t_hi]
        occ[rows, state] += t_hi - cur
        z = rng_obs.standard_normal(n)
        epoch += 1

        a = np.nonzero(active)[0]
        occupancy[a] += occ[a]
        reward[a] += per_interval - occ[a] @ c
        tau[a] += 1
        y = means[state[a]] + sds[state[a]] * z[a]
        belief[a] = bayes_update(design, belief[a], y)
        stop_now = decide_many(policy, belief[a]) == Action.STOP
        s = a[stop_now]
        reward[s] -= T[state[s]]
        final_state[s] = state[s]
        active[s] = False
        if epoch >= horizon:
            cut = np.nonzero(active)[0]
            truncated[cut] = True
            final_state[cut] = state[cut]
            active[cut] = False
    return _Block(reward, tau, final_state, occupancy, truncated)


def _check_compatible(true: TrueProcessSpec, design: Model, policy: Policy) -> None:
    if true.base.n_causes != design.n_causes or policy.grid.n_causes != design.n_causes:
        raise ValidationError("true_spec", "true process, design model and policy must share N")
    if not math.isclose(true.base.interval, design.h, rel_tol=1e-12):
        raise ValidationError("interval", "the chart's sampling interval must match the process")


def simulate(true_spec: TrueProcessSpec, design_model: Model, policy: Policy, n_reps: int,
             seed: int, horizon: int = DEFAULT_HORIZON, block_size: int = DEFAULT_BLOCK,
             workers: int = 1, details: bool = False):
    """Estimate the total expected reward of ``policy`` on ``true_spec``.

    Beliefs are updated with ``design_model`` (the chart's assumptions);
    states, observations and rewards follow ``true_spec``.  With
    ``details`` the per-replication arrays are returned alongside.
    """
    _check_compatible(true_spec, design_model, policy)
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    sizes = [block_size] * (n_reps // block_size)
    if n_reps % block_size:
        sizes.append(n_reps % block_size)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))

    def run(args):
        size, sq = args
        return _run_block(true_spec, design_model, policy, size, sq, horizon)

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(run, zip(sizes, seqs)))
    else:
        blocks = [run(a) for a in zip(sizes, seqs)]

    reward = np.concatenate([b.reward for b in blocks])
    tau = np.concatenate([b.tau for b in blocks])
    final = np.concatenate([b.final_state for b in blocks])
    trunc = np.concatenate([b.truncated for b in blocks])
    std = float(np.std(reward, ddof=1)) if n_reps > 1 else 0.0
    res = SimResult(mean_reward=float(np.mean(reward)),
                    ci_halfwidth=Z95 * std / math.sqrt(n_reps),
                    n_reps=n_reps, mean_stop_time=float(np.mean(tau)),
                    false_alarm_rate=float(np.mean((final == 0) & ~trunc)),
                    seed=seed, std_reward=std, n_truncated=int(trunc.sum()))
    if details:
        occ = np.concatenate([b.occupancy for b in blocks])
        return res, {"reward": reward, "tau": tau, "final_state": final,
                     "occupancy": occ, "truncated": trunc}
    return res


@dataclass
class MismatchRow:
    label: str
    approx: Optional[SimResult]
    exact: Optional[SimResult] = None
    exact_value: Optional[float] = None
    error_pct: Optional[float] = None
    failure: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def solve_policy(model: Model, grid: SimplexGrid, options: SolverOptions):
    sol = solve(model, grid, options)
    return sol, extract(sol)


def mismatch_sweep(design_spec: ModelSpec, true_specs: Sequence[tuple[str, TrueProcessSpec]],
                   n_reps: int, seed: int, grid: SimplexGrid,
                   options: SolverOptions = SolverOptions(),
                   horizon: int = DEFAULT_HORIZON, block_size: int = DEFAULT_BLOCK,
                   workers: int = 1) -> list[MismatchRow]:
    """Chart designed for ``design_spec`` versus the chart designed for each true process.

    Both charts are simulated on the true process with the same seed.
    ``exact`` is the true-parameter chart's simulated reward and
    ``exact_value`` its solved ``V(e_0)``; ``error_pct`` is the relative
    shortfall of the design chart.
    """
    design = validate_and_build(design_spec)
    _, design_policy = solve_policy(design, grid, options)
    charts = {TrueProcessSpec(design_spec).key(): (design, design_policy, None)}
    rows = []
    for label, true in true_specs:
        row = MismatchRow(label, None)
        try:
            row.approx = simulate(true, design, design_policy, n_reps, seed, horizon,
                                  block_size, workers)
            key = true.key()
            if key not in charts:
                tm = true.model()
                sol, pol = solve_policy(tm, grid, options)
                charts[key] = (tm, pol, sol.vertex_value(0))
            tm, pol, value = charts[key]
            if value is None:
                sol = solve(tm, grid, options)
                value = sol.vertex_value(0)
                charts[key] = (tm, pol, value)
            row.exact_value = value
            row.exact = simulate(true, tm, pol, n_reps, seed, horizon, block_size, workers)
            ex = row.exact.mean_reward
            row.error_pct = 100.0 * (ex - row.approx.mean_reward) / abs(ex) if ex else 0.0
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            row.failure = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def sweep_table(rows: Sequence[MismatchRow]) -> tuple[list[str], list[list]]:
    """Rows shaped like a sensitivity table: label, Appr, Exact, Err%."""
    header = ["label", "Appr", "Exact", "Err%"]
    out = []
    for r in rows:
        out.append([r.label,
                    "" if r.approx is None else r.approx.mean_reward,
                    "" if r.exact is None else r.exact.mean_reward,
                    "" if r.error_pct is None else r.error_pct])
    return header, out


def sweep_json(rows: Sequence[MismatchRow]) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True)


def lambda12_rates(n: int, value: float) -> np.ndarray:
    """Inter-transition matrix with a single rate from state 1 to state 2."""
    r = np.zeros((n, n))
    r[0, 1] = value
    return r
