"""Command line: ``nelson-lab run <config>`` and ``nelson-lab tasks``."""

import argparse
import logging
import sys
from typing import Optional, Sequence

from app.core.config import config
from app.core.errors import EXIT_CONFIG_ERROR, EXIT_NUMERICAL_ABORT, EXIT_OK, ConfigError, LabError, NumericalAbort
from app.core.logging import setup_logging
from app.services.experiment_service import ExperimentService
from app.services.report_service import report_render

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nelson-lab", description="Stochastic embedding laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment config")
    run.add_argument("config", help="Path to a TOML experiment config")
    run.add_argument(
        "--workers", type=int, default=None,
        help=f"Worker threads (default NELSON_LAB_WORKERS, currently {config.workers})",
    )
    run.add_argument("--output", default=None, help="Output directory (overrides the config)")
    run.add_argument(
        "--format", dest="formats", action="append", choices=["csv", "json", "binary"],
        help="Output format; repeat for several (overrides the config)",
    )
    run.add_argument("--seed", type=int, default=None, help="Seed override")

    sub.add_parser("tasks", help="List the supported task kinds")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()

    if args.command == "tasks":
        print("\n".join(ExperimentService().get_supported_tasks()["tasks"]))
        return EXIT_OK

    if args.seed is not None and args.seed < 0:
        print("--seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    service = ExperimentService(workers=args.workers, output_dir=args.output, formats=args.formats, seed=args.seed)
    try:
        report = service.run_path(args.config)
    except ConfigError as err:
        print(err.render(), file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NumericalAbort as err:
        where = "" if err.path_index is None else f" (path {err.path_index}, step {err.step})"
        print(f"numerical abort: {err}{where}", file=sys.stderr)
        return EXIT_NUMERICAL_ABORT
    except LabError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    print(report_render(report))
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
