"""Command-line entry point.

Every command prints a one-line JSON summary on stdout. On failure it
prints ``{"error": <type>, "message": ...}`` on stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import scenarios as sc
from .explain import lime_explain, surrogate_model
from .nn import Checkpoint
from .pinn import forecast
from .solver import write_grid_csv

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(ValueError):
    pass


def _load(args) -> sc.ScenarioConfig:
    env = sc.environment_overrides()
    if args.config:
        return sc.load_config(args.config, env=env)
    cfg = sc.get_builtin(args.scenario or "baseline")
    if env:
        # overrides apply on top of the serialised built-in
        cfg = sc.parse_config(sc.dump_config(cfg), env=env)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _artifacts(report) -> dict:
    return {k: str(v) for k, v in sorted(report.artifacts.items())}


def cmd_solve(args) -> int:
    cfg = _load(args)
    report = sc.run_scenario(cfg, "solver", _out(args))
    _emit({"scenario": cfg.name, "mode": "solver", "artifacts": _artifacts(report)})
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    mode = args.mode or "pinn"
    if mode == "solver":
        raise UsageError("train needs --mode pinn or hybrid")
    report = sc.run_scenario(cfg, mode, _out(args), seed=args.seed, epochs=args.epochs)
    _emit({"scenario": cfg.name, "mode": mode, "final_losses": report.final_losses,
           "failed": report.failed, "artifacts": _artifacts(report)})
    return EXIT_FAILURE if report.failed else 0


def cmd_forecast(args) -> int:
    cfg = _load(args)
    out = _out(args)
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        pop = forecast(ckpt.mlp, cfg.grid)
        path = write_grid_csv(out / f"{cfg.name}_forecast_grid.csv", pop)
        _emit({"scenario": cfg.name, "artifacts": {"heatmap": str(path)}})
        return 0
    report = sc.run_scenario(cfg, args.mode or "solver", out, seed=args.seed, epochs=args.epochs)
    _emit({"scenario": cfg.name, "mode": report.mode, "artifacts": _artifacts(report)})
    return EXIT_FAILURE if report.failed else 0


def cmd_compare(args) -> int:
    names = args.scenarios or [c.name for c in sc.builtin_scenarios()]
    out = _out(args)
    mode = args.mode or "solver"
    base = _load(args) if args.config else None
    reports = []
    for name in names:
        cfg = sc.get_builtin(name)
        if base is not None:
            cfg = replace(cfg, grid=base.grid, train=base.train)
        reports.append(sc.run_scenario(cfg, mode, out, seed=args.seed, epochs=args.epochs))
    table = sc.compare_scenarios(reports)
    path = table.to_csv(out / f"comparison_{mode}.csv")
    _emit({"comparison": str(path), "checks": table.checks})
    return 0


def cmd_explain(args) -> int:
    cfg = _load(args)
    out = _out(args)
    if args.checkpoint:
        model = surrogate_model(Checkpoint.load(args.checkpoint).mlp)
    else:
        model = sc.grid_model(sc.reference_solution(cfg))
    exp = lime_explain(model, (args.age, args.year), n=args.samples, seed=args.seed or 0)
    stem = out / f"{cfg.name}_explain_{args.age:g}_{args.year:g}"
    exp.to_csv(stem.with_suffix(".csv"))
    exp.to_json(stem.with_suffix(".json"))
    _emit({"age_weight": exp.age_weight, "year_weight": exp.year_weight,
           "artifacts": {"csv": str(stem.with_suffix(".csv"))}})
    return 0


def cmd_pyramid(args) -> int:
    cfg = _load(args)
    out = _out(args)
    pop = sc.reference_solution(cfg)
    path = sc.export_pyramid(pop, out / f"{cfg.name}_pyramid_{int(args.year)}.csv", args.year,
                             args.bucket, cfg.female_fraction)
    _emit({"scenario": cfg.name, "year": args.year, "artifacts": {"pyramid": str(path)}})
    return 0


def cmd_scenarios(args) -> int:
    if args.action != "list":
        raise UsageError("only 'scenarios list' is supported")
    for cfg in sc.builtin_scenarios():
        _emit({"name": cfg.name, "tfr": cfg.tfr.format(),
               "policies": sc.format_policies(cfg.policies)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario config file")
    common.add_argument("--scenario", help="built-in scenario name (default baseline)")
    common.add_argument("--mode", choices=sc.MODES)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out")
    common.add_argument("--epochs", type=int, help="Adam epochs (overrides config)")

    p = argparse.ArgumentParser(prog="popcast", description="Age-structured population forecasting")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common]).set_defaults(func=cmd_solve)
    sub.add_parser("train", parents=[common]).set_defaults(func=cmd_train)
    f = sub.add_parser("forecast", parents=[common])
    f.add_argument("--checkpoint")
    f.set_defaults(func=cmd_forecast)
    c = sub.add_parser("compare", parents=[common])
    c.add_argument("scenarios", nargs="*")
    c.set_defaults(func=cmd_compare)
    e = sub.add_parser("explain", parents=[common])
    e.add_argument("--age", type=float, default=30.0)
    e.add_argument("--year", type=float, default=2039.0)
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_explain)
    py = sub.add_parser("pyramid", parents=[common])
    py.add_argument("--year", type=float, default=2054.0)
    py.add_argument("--bucket", type=float, default=5.0)
    py.set_defaults(func=cmd_pyramid)
    s = sub.add_parser("scenarios", parents=[common])
    s.add_argument("action", choices=["list"])
    s.set_defaults(func=cmd_scenarios)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            _error("UsageError", "invalid command line")
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        _error("UsageError", str(exc))
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, RuntimeError, ArithmeticError) as exc:
        _error(type(exc).__name__, str(exc).strip("'\""))
        return EXIT_FAILURE


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
