"""Command-line experiment runner: fit | sweep | simulate."""

import argparse
import sys

from .config import load_config
from .errors import ConfigError, FitDegenerateError, IntegrationError, RKHSIDError
from .runner import run_experiment, run_sweep, simulate_only

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DEGENERATE = 2
EXIT_INTEGRATION = 3
EXIT_OTHER = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rkhsid",
        description="Joint state estimation and sparse ODE identification "
                    "by kernel collocation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("fit", "run one experiment: generate data, fit, evaluate"),
        ("sweep", "run the config's sweep axes and aggregate the results"),
        ("simulate", "generate trajectory and observation data only"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="experiment config file (YAML)")
        cmd.add_argument("--out", required=True, help="output directory")
        cmd.add_argument("--seed-override", type=int, default=None,
                         help="replace the config seed")
        cmd.add_argument("--verbose", action="store_true")
        if name == "sweep":
            cmd.add_argument("--workers", type=int, default=1,
                             help="parallel worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "fit":
            out = run_experiment(cfg, out_dir=args.out, seed=args.seed_override)
            if args.verbose:
                for line in out["equations"]:
                    print(line)
                print(f"metrics: {out['metrics']}")
            print(f"run written to {out['run_dir']}")
            return EXIT_OK
        if args.command == "simulate":
            run_dir = simulate_only(cfg, args.out, seed=args.seed_override)
            print(f"data written to {run_dir}")
            return EXIT_OK
        if args.command == "sweep":
            if args.seed_override is not None:
                cfg.sweep_seeds = [args.seed_override]
            summary = run_sweep(cfg, args.out, workers=args.workers)
            print(f"aggregate written to {summary['aggregate_csv']} "
                  f"({summary['n_cells']} cells, {summary['n_failed']} failed)")
            return EXIT_OK if summary["n_failed"] == 0 else EXIT_OTHER
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FitDegenerateError as err:
        print(f"fit degenerate: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    except IntegrationError as err:
        print(f"integration failed: {err}", file=sys.stderr)
        return EXIT_INTEGRATION
    except RKHSIDError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
