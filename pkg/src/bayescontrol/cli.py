"""Command-line front end.

Exit codes: 0 success, 1 invalid input, 2 solver did not converge,
3 internal consistency failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelSpec, ValidationError, spec_from_dict, validate_and_build
from .policy import (decide, extract, load_policy, policy_from_actions, save_policy,
                     stop_everywhere, verify_structure)
from .sampling import feasible_intervals, optimize_h, r0_of_h
from .simplex import CapacityError, build_grid, default_resolution, field_to_rows
from .simulate import (MismatchRow, TrueProcessSpec, mismatch_sweep, simulate, sweep_json,
                       sweep_table)
from .solver import SolverOptions, solve

log = logging.getLogger("bayescontrol")

EXIT_OK, EXIT_INVALID, EXIT_UNCONVERGED, EXIT_INCONSISTENT = 0, 1, 2, 3

_CONFIG_KEYS = {"model", "grid", "solver", "output_dir", "seed"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelSpec
    model_doc: dict
    resolution: int
    solver: SolverOptions
    output_dir: Path
    seed: int = 0
    extra: dict = field(default_factory=dict)


def load_config(path: Optional[str], args) -> RunConfig:
    if path is None:
        raise ConfigError("--config is required")
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    if "model" not in doc:
        raise ConfigError("config needs a 'model' section")
    spec = spec_from_dict(doc["model"])
    grid_doc = doc.get("grid", {})
    if not isinstance(grid_doc, dict) or set(grid_doc) - {"resolution"}:
        raise ConfigError("grid section accepts only 'resolution'")
    resolution = grid_doc.get("resolution", default_resolution(spec.n_causes))
    if getattr(args, "resolution", None) is not None:
        resolution = args.resolution
    if not isinstance(resolution, int) or resolution < 1:
        raise ConfigError("grid.resolution must be a positive integer")
    sdoc = dict(doc.get("solver", {}))
    if args.epsilon is not None:
        sdoc["epsilon"] = args.epsilon
    if args.no_accelerate:
        sdoc["accelerate"] = False
    if args.workers is not None:
        sdoc["workers"] = args.workers
    try:
        opts = SolverOptions.from_dict(sdoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver: {exc}") from None
    out = args.out or doc.get("output_dir")
    if out is None:
        raise ConfigError("no output directory (--out or output_dir)")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return RunConfig(spec, dict(doc["model"]), resolution, opts, Path(out), seed)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_solve(cfg: RunConfig) -> int:
    model = validate_and_build(cfg.model)
    grid = build_grid(cfg.model.n_causes, cfg.resolution)
    sol = solve(model, grid, cfg.solver)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "value_field.csv", *field_to_rows(sol.field))
    if sol.converged:
        pol = extract(sol)
    else:
        pol = policy_from_actions(grid, sol.actions, sol.continuation, model.T,
                                  epsilon=cfg.solver.epsilon, spec_digest=cfg.model.digest())
    save_policy(pol, out, values=sol.field.values, spec=cfg.model.to_dict())
    _write_json(out / "structure.json", verify_structure(pol).to_dict())
    _write_json(out / "stats.json", sol.stats.to_dict())
    log.info("solve: %d sweeps, delta %.3g, V(e_0) = %.6f", sol.stats.iterations,
             sol.stats.delta, sol.vertex_value(0))
    return EXIT_OK if sol.converged else EXIT_UNCONVERGED


def cmd_interval(cfg: RunConfig, h_min: float, h_max: float, n_points: int) -> int:
    spec = cfg.model
    brackets = feasible_intervals(spec, h_min, h_max)
    out = cfg.output_dir
    result = {"brackets": [list(b) for b in brackets], "feasible": None, "h_star": None}
    rows = []
    if brackets:
        lo, hi = max(brackets, key=lambda ab: ab[1] - ab[0])
        result["feasible"] = [lo, hi]
        if n_points > 0:
            # stay strictly inside: endpoints are only bisection-accurate
            hs = np.geomspace(lo * 1.001, hi * 0.999, n_points)
            grid = build_grid(spec.n_causes, cfg.resolution)
            ana = optimize_h(spec, hs, grid, cfg.solver, feasible=(lo, hi))
            result["h_star"] = ana.h_star
            result["failures"] = {str(k): v for k, v in ana.failures.items()}
            rows = [list(r) for r in ana.rows()]
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "brackets.json", result)
    _write_csv(out / "curve.csv", ["h", "reward", "upper_bound", "lower_bound"], rows)
    return EXIT_OK


def _load_true_specs(path: Optional[str], cfg: RunConfig) -> list[tuple[str, TrueProcessSpec]]:
    if path is None:
        return [("design", TrueProcessSpec(cfg.model))]
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read true-process overrides: {exc}") from None
    if not isinstance(doc, list):
        raise ConfigError("true-process overrides must be a JSON array")
    out = []
    for j, item in enumerate(doc):
        if not isinstance(item, dict) or set(item) - {"label", "overrides", "inter_rates"}:
            raise ConfigError(f"override {j}: expected keys label, overrides, inter_rates")
        merged = {**cfg.model_doc, **item.get("overrides", {})}
        spec = spec_from_dict(merged)
        out.append((str(item.get("label", f"row{j}")),
                    TrueProcessSpec(spec, item.get("inter_rates"))))
    return out


def cmd_simulate(cfg: RunConfig, true_path: Optional[str], n_reps: int,
                 stop_all: bool = False) -> int:
    trues = _load_true_specs(true_path, cfg)
    grid = build_grid(cfg.model.n_causes, cfg.resolution)
    workers = cfg.solver.workers
    if stop_all:
        design = validate_and_build(cfg.model)
        pol = stop_everywhere(grid, design)
        rows = [MismatchRow(label, simulate(t, design, pol, n_reps, cfg.seed, workers=workers))
                for label, t in trues]
    else:
        rows = mismatch_sweep(cfg.model, trues, n_reps, cfg.seed, grid, cfg.solver,
                              workers=workers)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "sim_result.json").write_text(sweep_json(rows) + "\n")
    _write_csv(out / "sweep.csv", *sweep_table(rows))
    failed = [r for r in rows if r.failure]
    for r in failed:
        log.error("row %s failed: %s", r.label, r.failure)
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    model = validate_and_build(cfg.model)
    grid = build_grid(cfg.model.n_causes, cfg.resolution)
    base = cfg.solver.to_dict()
    plain = solve(model, grid, SolverOptions(**{**base, "accelerate": False}))
    fast = solve(model, grid, SolverOptions(**{**base, "accelerate": True}))
    diff = float(np.max(np.abs(plain.field.values - fast.field.values)))
    same = bool(np.array_equal(plain.actions, fast.actions))
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    pe, fe = plain.stats.evaluated, fast.stats.evaluated
    report = {
        "plain": plain.stats.to_dict(),
        "accelerated": fast.stats.to_dict(),
        # the factor counts continuation evaluations, so it does not depend on hardware
        "acceleration_factor": pe / fe if fe else 1.0,
        "wall_time_ratio": plain.stats.seconds / fast.stats.seconds
        if fast.stats.seconds > 0 else 1.0,
        "max_value_difference": diff,
        "actions_identical": same,
    }
    _write_json(out / "bench.json", report)
    if not same or diff > cfg.solver.epsilon:
        log.error("accelerated and plain solves disagree (max diff %.3g, actions %s)",
                  diff, "equal" if same else "differ")
        return EXIT_INCONSISTENT
    return EXIT_OK


def cmd_query(policy_dir: str, belief: str) -> int:
    pol = load_policy(policy_dir)
    try:
        b = np.array([float(v) for v in belief.split(",")])
    except ValueError:
        raise ConfigError("belief must be comma-separated numbers") from None
    if len(b) != pol.grid.n_causes + 1 or np.any(b < 0) or abs(b.sum() - 1) > 1e-9:
        raise ConfigError(f"belief must be {pol.grid.n_causes + 1} probabilities summing to 1")
    print(decide(pol, b / b.sum()).name.capitalize())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--resolution", type=int)
    common.add_argument("--no-accelerate", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bayescontrol",
                                description="Optimal Bayesian control charts for several assignable causes.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve and export the optimal policy")
    it = sub.add_parser("interval", parents=[common], help="sampling-interval analysis")
    it.add_argument("--h-min", type=float, default=1e-3)
    it.add_argument("--h-max", type=float, default=100.0)
    it.add_argument("--n-points", type=int, default=60)
    sm = sub.add_parser("simulate", parents=[common], help="Monte Carlo mismatch study")
    sm.add_argument("--true", dest="true_path", help="JSON array of true-process overrides")
    sm.add_argument("--n-reps", type=int, default=10_000)
    sm.add_argument("--stop-everywhere", action="store_true",
                    help="simulate the policy that stops immediately")
    sub.add_parser("bench", parents=[common], help="plain versus accelerated value iteration")
    q = sub.add_parser("query", parents=[common], help="decide at one belief with a saved policy")
    q.add_argument("--policy", required=True, help="directory written by 'solve'")
    q.add_argument("--belief", required=True, help="comma-separated belief vector")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "query":
            return cmd_query(args.policy, args.belief)
        cfg = load_config(args.config, args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "interval":
            if not 0 < args.h_min < args.h_max:
                raise ConfigError("need 0 < --h-min < --h-max")
            return cmd_interval(cfg, args.h_min, args.h_max, args.n_points)
        if args.command == "simulate":
            if args.n_reps < 1:
                raise ConfigError("--n-reps must be positive")
            return cmd_simulate(cfg, args.true_path, args.n_reps, args.stop_everywhere)
        if args.command == "bench":
            return cmd_bench(cfg)
    except (ConfigError, ValidationError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
