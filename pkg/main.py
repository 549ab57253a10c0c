"""
Task-Specific Adapters
Command-line entry point: pretrain a backbone, evaluate adapter methods on
few-shot episodes, run ablation grids and summarize results
"""

import argparse
import logging
import os
import sys

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src import __version__
from src.components.console import configure_logging
from src.pages.ablate import add_ablate_parser, run_ablate
from src.pages.evaluate import add_evaluate_parser, run_evaluate
from src.pages.fetch import add_fetch_parser, run_fetch
from src.pages.pretrain import add_pretrain_parser, run_pretrain
from src.pages.report import add_report_parser, run_report

logger = logging.getLogger("tsa")

COMMANDS = {
    "pretrain": run_pretrain,
    "eval": run_evaluate,
    "ablate": run_ablate,
    "report": run_report,
    "fetch": run_fetch,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="Master seed")
    common.add_argument("--episodes", type=int, default=None, help="Episodes per dataset")
    common.add_argument("--workers", type=int, default=None, help="Parallel episode workers")
    common.add_argument("--out", default=None, help="JSON report path")
    common.add_argument("--data-dir", default=None, help="Root directory of external datasets")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="tsa", description="Task-specific adapters for few-shot learning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    add_pretrain_parser(subparsers, parents=[common])
    add_evaluate_parser(subparsers, parents=[common])
    add_ablate_parser(subparsers, parents=[common])
    add_report_parser(subparsers, parents=[common])
    add_fetch_parser(subparsers, parents=[common])
    return parser


def main(argv=None) -> int:
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        logger.error("%s", exc)
        if args.verbose:
            logger.exception("Traceback")
        return 2


if __name__ == "__main__":
    sys.exit(main())
