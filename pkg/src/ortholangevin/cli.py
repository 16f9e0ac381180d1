"""Command-line entry point.

    ortholangevin simulate --config exp.yaml --out runs/a
    ortholangevin compare --preset cf-crosscheck
    ortholangevin preset-list

Exit status: 0 every verdict passed, 1 some verdict failed, 2 the
configuration was rejected, 3 the run itself failed.
"""

from __future__ import annotations

import argparse
import sys
import warnings

from .config import load_config, load_preset, preset_names, preset_text
from .errors import ConfigError, OrthoLangevinError

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", metavar="PATH", help="experiment config (YAML)")
    src.add_argument("--preset", metavar="NAME", help="built-in experiment; see preset-list")
    common.add_argument("--seed", type=int, metavar="N", help="override seeds.master")
    common.add_argument("--threads", type=int, metavar="N", help="maximum worker threads")
    common.add_argument("--out", metavar="DIR", help="override outputs.dir")

    p = argparse.ArgumentParser(prog="ortholangevin", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="integrate an ensemble and write it out")
    sub.add_parser("spectral", parents=[common], help="mode-equation CF curves and density grids")
    cmp_ = sub.add_parser("compare", parents=[common], help="score an ensemble against a prediction")
    cmp_.add_argument("--ensemble", metavar="PATH", help="ensemble file (binary); simulated if omitted")
    cmp_.add_argument("--prediction", metavar="PATH", help="cf.csv, density grid, or second ensemble")
    sub.add_parser("sweep", parents=[common], help="regime or v0-reflection sweep")
    lst = sub.add_parser("preset-list", help="list built-in presets")
    lst.add_argument("--show", metavar="NAME", help="print one preset's config")
    return p


def main(argv=None) -> int:
    warnings.filterwarnings("ignore", module="numba")
    args = _parser().parse_args(argv)
    if args.command == "preset-list":
        try:
            if args.show:
                sys.stdout.write(preset_text(args.show))
            else:
                print("\n".join(preset_names()))
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_PASS

    try:
        cfg = load_config(args.config) if args.config else load_preset(args.preset)
        cfg = cfg.with_overrides(seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    from . import workflows

    try:
        if args.command == "simulate":
            result = workflows.run_simulate(cfg, args.threads)
        elif args.command == "spectral":
            result = workflows.run_spectral(cfg, args.threads)
        elif args.command == "compare":
            result = workflows.run_compare(cfg, args.ensemble, args.prediction, args.threads)
        else:
            result = workflows.run_sweep(cfg, args.threads)
    except (OrthoLangevinError, OSError, ValueError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    for path in result.files:
        print(path)
    if result.reports:
        from .analysis import summary_table

        print(summary_table(result.reports))
    return EXIT_PASS if result.all_passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
