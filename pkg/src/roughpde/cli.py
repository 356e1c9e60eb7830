"""Command line interface.

Exit codes: 0 when every check passes, 1 on a check failure (or a solver
error), 2 on an invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, ScenarioConfig
from .rde import SolverError

COMMANDS = ("lift", "solve-rde", "solve-backward", "solve-forward", "check-weak", "check-duality",
            "wong-zakai", "run")
HELP = {
    "lift": "build the driver rough path and write it",
    "solve-rde": "solve the rough ODE dX = b dt + beta(X) dW from rde.x0",
    "solve-backward": "solve the backward equation (closed form, Monte Carlo or finite differences)",
    "solve-forward": "simulate the weighted-particle forward solution",
    "check-weak": "weak-form residuals of the computed solutions",
    "check-duality": "duality gaps between forward and backward solutions",
    "wong-zakai": "dyadic piecewise-linear approximation study",
    "run": "every stage applicable to the scenario",
}


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def bundled_scenario(name):
    """Path of a scenario shipped with the package (``transport``, ``heat``, ...)."""
    return resources.files("roughpde").joinpath("scenarios", f"{name}.json")


def build_parser():
    parser = argparse.ArgumentParser(prog="roughpde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True,
                       help="scenario JSON file, or the name of a bundled scenario")
        p.add_argument("--seed", type=_u64, default=None, help="override mc.seed (unsigned 64-bit)")
        p.add_argument("--out", default=None, help="output directory (default: config 'output' or ./out/<name>)")
        p.add_argument("--threads", type=_positive_int, default=None, help="worker threads for particle blocks")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="format of tabular outputs")
        p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    sub.add_parser("list", help="list bundled scenarios")
    return parser


def _resolve_config(text):
    path = Path(text)
    if path.exists():
        return path
    bundled = bundled_scenario(text)
    if bundled.is_file():
        return Path(str(bundled))
    return path


def main(argv=None):
    from .pipeline import run_scenario

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    if args.command == "list":
        for entry in sorted(resources.files("roughpde").joinpath("scenarios").iterdir(), key=lambda p: p.name):
            if entry.name.endswith(".json"):
                print(entry.name[:-5])
        return 0
    try:
        cfg = ScenarioConfig.load(_resolve_config(args.config)).with_overrides(seed=args.seed, threads=args.threads)
        out = Path(args.out or cfg.raw.get("output") or Path("out") / cfg.name)
        result = run_scenario(cfg, out, args.command, args.format, figures=not args.no_figures)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1
    for name, check in result.checks.items():
        status = "PASS" if check["passed"] else "FAIL"
        detail = {k: v for k, v in check.items() if k != "passed"}
        print(f"{status} {name} {json.dumps(detail, default=str)}")
    print(f"{'PASS' if result.passed else 'FAIL'} {cfg.name}: {len(result.files)} files in {out}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
