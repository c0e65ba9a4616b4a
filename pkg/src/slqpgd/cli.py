"""Command-line front end.

Subcommands ``solve``, ``cost-decay``, ``convergence`` and ``verify``. Values
come from flags, then the ``--config`` JSON file, then built-in defaults.
Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import experiments, oracle
from .forward import SingularResolventError
from .model import SlqProblem, make_preset, validate
from .optimizer import SolverConfig, solve

log = logging.getLogger("slqpgd")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    problem: SlqProblem
    solver: SolverConfig
    output_dir: Path | None
    ladder: tuple[int, ...] = experiments.DEFAULT_LADDER
    reference_steps: int = experiments.DEFAULT_REFERENCE_STEPS
    trajectories: tuple[int, ...] = (0,)
    workers: int = 1
    raw: dict[str, Any] = field(default_factory=dict)


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slqpgd", description="Projected gradient solver for constrained stochastic LQ control."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig JSON file")
    common.add_argument("--preset", help="problem preset (paper, laplacian)")
    common.add_argument("--seed", type=int, help="seed for the preset and the Brownian paths")
    common.add_argument("--steps", type=int, help="time steps N")
    common.add_argument("--iters", type=int, help="gradient iterations L")
    common.add_argument("--paths", type=int, help="Monte Carlo paths")
    common.add_argument("--kappa", type=float, help="step parameter (step size 1/kappa)")
    common.add_argument("--alpha", type=float, help="control penalty")
    common.add_argument("--free-control", action="store_true", help="drop the control box")
    common.add_argument("--workers", type=int, help="threads over path chunks")
    common.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("solve", parents=[common], help="run the solver, write cost and trajectories")
    p.add_argument("--trajectories", type=_parse_ints, help="path indices to dump, e.g. 0,5")
    sub.add_parser("cost-decay", parents=[common], help="run the solver, write only cost_decay.csv")
    p = sub.add_parser("convergence", parents=[common], help="error ladder against a fine reference")
    p.add_argument("--ladder", type=_parse_ints, help="coarse step counts, e.g. 5,10,20,50")
    p.add_argument("--reference-steps", type=int, help="reference step count")
    p = sub.add_parser("verify", help="tree-oracle checks of the adjoint recursion")
    p.add_argument("--cases", type=int, default=24)
    p.add_argument("--battery-seed", type=int, default=2024)
    p.add_argument("--iters", type=int, default=3)
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, Any] = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc

    solver_raw = dict(raw.get("solver", {}))
    problem_raw = raw.get("problem", {"preset": "paper"})
    experiment_raw = dict(raw.get("experiment") or {})

    if args.seed is not None:
        solver_raw["seed"] = args.seed
    for flag, key in (("steps", "n_steps"), ("iters", "n_iters"), ("paths", "n_paths"), ("kappa", "kappa")):
        if getattr(args, flag, None) is not None:
            solver_raw[key] = getattr(args, flag)

    try:
        if args.preset is not None or "preset" in problem_raw:
            name = args.preset or problem_raw["preset"]
            seed = args.seed if args.seed is not None else problem_raw.get("seed", 1)
            problem = make_preset(name, int(seed))
        else:
            problem = SlqProblem.from_dict(problem_raw)
        if args.alpha is not None:
            problem = problem.replace(alpha=args.alpha)
        if args.free_control:
            problem = problem.with_free_control()
        solver = SolverConfig(**solver_raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    problems = validate(problem)
    if problems:
        raise ConfigError("invalid problem: " + "; ".join(problems))

    out = args.out if args.out is not None else raw.get("output_dir")
    cfg = RunConfig(problem, solver, None if out is None else Path(out), raw=raw)
    if experiment_raw.get("ladder"):
        cfg.ladder = tuple(int(v) for v in experiment_raw["ladder"])
    if experiment_raw.get("reference_steps"):
        cfg.reference_steps = int(experiment_raw["reference_steps"])
    if getattr(args, "ladder", None):
        cfg.ladder = args.ladder
    if getattr(args, "reference_steps", None):
        cfg.reference_steps = args.reference_steps
    if getattr(args, "trajectories", None) is not None:
        cfg.trajectories = args.trajectories
    elif "trajectories" in raw:
        cfg.trajectories = tuple(int(v) for v in raw["trajectories"])
    workers = args.workers if args.workers is not None else raw.get("workers", 1)
    cfg.workers = max(1, int(workers))
    return cfg


def _prepare_output(cfg: RunConfig) -> Path:
    if cfg.output_dir is None:
        raise ConfigError("no output directory given (use --out)")
    try:
        cfg.output_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {cfg.output_dir}: {exc}") from exc
    return cfg.output_dir


def cmd_solve(cfg: RunConfig, *, cost_only: bool = False) -> int:
    out = _prepare_output(cfg)
    result = solve(cfg.problem, cfg.solver, workers=cfg.workers)
    experiments.write_cost_decay(out / "cost_decay.csv", result.records)
    if not cost_only:
        experiments.write_iterates(out / "iterates.csv", result.records)
        for idx in cfg.trajectories:
            try:
                experiments.write_trajectory(out / f"trajectory_{idx}.csv", result, idx)
            except IndexError as exc:
                raise ConfigError(str(exc)) from exc
    last = result.records[-1]
    print(f"final cost {last.cost:.10g} after {last.iteration} iterations "
          f"(residual {last.optimality_residual:.3e}, K_est {result.lipschitz_estimate:.4g})")
    return EXIT_OK


def cmd_convergence(cfg: RunConfig) -> int:
    out = _prepare_output(cfg)
    study = experiments.convergence_study(
        cfg.problem, cfg.solver, cfg.ladder, cfg.reference_steps, workers=cfg.workers
    )
    experiments.write_errors(out / "errors.csv", study.metrics)
    experiments.write_rates(out / "rates.csv", study.rates)
    for name, fit in study.rates.items():
        print(f"{name:>14}: slope {fit.slope:.4f}")
    return EXIT_OK


def cmd_verify(cases: int = 24, battery_seed: int = 2024, n_iters: int = 3) -> int:
    reports = oracle.run_battery(oracle.default_battery(cases, battery_seed), n_iters)
    print(oracle.format_reports(reports))
    failed = [r for r in reports if not r.free_ok]
    print(f"{len(reports) - len(failed)}/{len(reports)} free-control checks within {oracle.FREE_TOL:g}")
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "verify":
            return cmd_verify(args.cases, args.battery_seed, args.iters)
        cfg = load_run_config(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "cost-decay":
            return cmd_solve(cfg, cost_only=True)
        return cmd_convergence(cfg)
    except (ConfigError, experiments.InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SingularResolventError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run_config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    """JSON document accepted by ``--config``."""
    solver = dataclasses.asdict(cfg.solver)
    return {
        "problem": cfg.problem.to_dict(),
        "solver": solver,
        "experiment": {"ladder": list(cfg.ladder), "reference_steps": cfg.reference_steps},
        "output_dir": None if cfg.output_dir is None else str(cfg.output_dir),
        "trajectories": list(cfg.trajectories),
        "workers": cfg.workers,
    }


if __name__ == "__main__":
    sys.exit(main())
