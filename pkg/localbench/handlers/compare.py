"""
Compare handler: deltas of variant runs against a base run
"""

import logging
import sys
from pathlib import Path

from localbench.config import COMPARISON_FILE, REPORT_FILE
from localbench.handlers import ExitStatus
from localbench.report import ComparisonError, ReportError, compare, load_report, render_comparison, write_comparison

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("compare", parents=parents, help="compare runs against a base run")
    parser.add_argument("base", help="report.json of the base run")
    parser.add_argument("variants", nargs="+", help="report.json of each variant run")
    parser.add_argument("--output", default=COMPARISON_FILE, help="comparison file to write")
    parser.set_defaults(handler=handle)


def _report_path(path: str) -> str:
    candidate = Path(path)
    return str(candidate / REPORT_FILE) if candidate.is_dir() else path


async def handle(args) -> ExitStatus:
    try:
        base = load_report(_report_path(args.base))
        variants = [load_report(_report_path(p)) for p in args.variants]
    except ReportError as e:
        logger.error(f"❌ {e}")
        return ExitStatus.RUN_ERROR

    try:
        comparison = compare(base, variants)
    except ComparisonError as e:
        logger.error(f"❌ refusing to compare: {e}")
        return ExitStatus.CONFIG_ERROR

    sys.stdout.write(render_comparison(comparison, [base, *variants]))
    try:
        path = write_comparison(comparison, Path(args.output))
    except ReportError as e:
        logger.error(f"❌ {e}")
        return ExitStatus.RUN_ERROR
    logger.info(f"comparison written to {path}")
    return ExitStatus.OK
