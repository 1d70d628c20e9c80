"""Command-line entry point: ``mfg-traffic <experiment> [options]``."""

import argparse
import logging
import sys
import typing as t

from pydantic import ValidationError

from .__version__ import __version__
from .exceptions import ConfigurationError, LinearSolverError, NonConvergenceError
from .experiments import run_experiment
from .schema import EXPERIMENTS, load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3

DESCRIPTIONS = {
    "solve": "solve the mean field equilibrium and write rho, u, V",
    "fd": "sample the fundamental diagram of an equilibrium",
    "converge": "grid self-convergence study",
    "myopic": "short-horizon limit of the equilibrium speed",
    "dg-validate": "accuracy of equilibrium-constructed controls in the N-car game",
}

EPILOGS = {
    "dg-validate": (
        "Each car carries the kernel mass micro.density_convention = 'matched' "
        "(total initial mass / N) unless overridden; this differs from the unit-mass 'count' "
        "convention, available with --set micro.density_convention='count' "
        "('fraction' gives 1/N)."
    ),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML configuration file")
    common.add_argument("--model", choices=["lwr", "separable", "nonseparable"], help="cost model")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="override one dotted configuration key (repeatable)",
    )
    common.add_argument("--workers", type=int, metavar="K", help="worker processes for independent runs")
    common.add_argument("--gnuplot", action="store_true", help="also write gnuplot .dat files")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    parser = argparse.ArgumentParser(
        prog="mfg-traffic",
        description="Mean field game velocity control of autonomous vehicles on a ring road.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        subparsers.add_parser(name, parents=[common], help=DESCRIPTIONS[name], epilog=EPILOGS.get(name))
    return parser


def configure_logging(verbose=False, quiet=False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _print_results(results: t.Mapping[str, t.Any]) -> None:
    for key, value in results.items():
        if isinstance(value, (int, float)) or value is None:
            print(f"{key} = {value}")


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    overrides = list(args.overrides)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.gnuplot:
        overrides.append("output.gnuplot=true")

    try:
        config = load_config(
            args.config,
            experiment=args.experiment,
            model=args.model,
            out=args.out,
            overrides=overrides,
        )
        results = run_experiment(config)
    except (ConfigurationError, ValidationError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NonConvergenceError, LinearSolverError) as exc:
        logger.error("solver failed: %s", exc)
        return EXIT_NONCONVERGENCE

    _print_results(results)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
