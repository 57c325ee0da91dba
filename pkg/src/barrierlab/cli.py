"""Command line entry point: ``barrierlab run | validate | feller-classify``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="barrierlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, help="output directory (default: config 'out' key or ./results/<name>)")
    run.add_argument("--seed", type=int)
    run.add_argument("--n-paths", type=int, dest="n_paths")
    run.add_argument("--dt", type=float, help="single step size; replaces any dt sweep")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config", type=Path)

    fc = sub.add_parser("feller-classify", help="Feller classification of the power-law ratio family")
    fc.add_argument("--gamma", type=float, required=True)
    fc.add_argument("--p", type=float, required=True)
    fc.add_argument("--sigma-bounded", type=_bool, default=True, metavar="{true,false}")
    fc.add_argument("--c", type=float, default=1.0)
    fc.add_argument("--x0", type=float, help="start level, adds the infinite-horizon exit probability")
    return parser


def _cmd_run(args) -> int:
    from .config import ConfigError, resolve_config
    from .experiments import run_experiment

    overrides = {"seed": args.seed, "n_paths": args.n_paths, "dt": args.dt}
    try:
        cfg = resolve_config(args.config, overrides)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or (Path(cfg.out) if cfg.out else Path("results") / cfg.experiment)
    try:
        res = run_experiment(cfg, out)
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print("\n".join(res.digest))
    print(f"reports written to {out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .config import validate_config

    errors = validate_config(args.config)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.config}: ok")
    return EXIT_OK


def _cmd_feller(args) -> int:
    from .feller import RatioSpec, classify_boundary

    try:
        spec = RatioSpec(args.gamma, args.p, args.sigma_bounded, args.c)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cls = classify_boundary(spec, x0=args.x0)
    except ArithmeticError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(cls.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "validate": _cmd_validate, "feller-classify": _cmd_feller}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
