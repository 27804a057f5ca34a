"""
Recompute handler: check a report against its raw record table
"""

import logging
from pathlib import Path

from localbench.config import REPORT_FILE
from localbench.handlers import ExitStatus
from localbench.report import ReportError, recompute

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("recompute", parents=parents, help="recompute aggregates from raw records")
    parser.add_argument("report", help="report.json or the run directory holding it")
    parser.set_defaults(handler=handle)


async def handle(args) -> ExitStatus:
    path = Path(args.report)
    if path.is_dir():
        path = path / REPORT_FILE
    try:
        mismatches = recompute(str(path))
    except ReportError as e:
        logger.error(f"❌ {e}")
        return ExitStatus.RUN_ERROR

    for mismatch in mismatches:
        print(f"MISMATCH {mismatch}")
    if mismatches:
        return ExitStatus.RUN_ERROR
    print(f"OK {path}: every aggregate reproduced from the record table")
    return ExitStatus.OK
