"""
Run handler: launch -> probe -> scenario -> teardown -> report
"""

import logging
import sys
from pathlib import Path

from localbench.backend import BackendError, ReadyTimeoutError
from localbench.config import ConfigError, load_config
from localbench.handlers import ExitStatus
from localbench.handlers.validate import describe
from localbench.harness import run_benchmark
from localbench.report import ReportError
from localbench.tasks import DatasetError
from localbench.telemetry import TelemetryError
from localbench.utils.database import SqlDatabaseError

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("run", parents=parents, help="run one benchmark cell")
    parser.add_argument("config", help="YAML configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable")
    parser.set_defaults(handler=handle)


async def handle(args) -> ExitStatus:
    """Execute the pipeline and map failures onto exit codes"""

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        config = load_config(args.config, overrides)
    except ConfigError as e:
        logger.error(f"❌ invalid configuration: {describe(e)}")
        return ExitStatus.CONFIG_ERROR

    try:
        result = await run_benchmark(config, Path(args.out_dir))
    except DatasetError as e:
        logger.error(f"❌ dataset error: {e}")
        return ExitStatus.CONFIG_ERROR
    except ReadyTimeoutError as e:
        timings = f"T_startup={e.t_startup_s}, T_load={e.t_load_s}"
        logger.error(f"❌ {e} ({timings})")
        if e.output_tail:
            logger.error(f"backend output tail:\n{e.output_tail}")
        return ExitStatus.RUN_ERROR
    except BackendError as e:
        logger.error(f"❌ backend error: {e}")
        if e.output_tail:
            logger.error(f"backend output tail:\n{e.output_tail}")
        return ExitStatus.RUN_ERROR
    except (TelemetryError, SqlDatabaseError, ReportError) as e:
        logger.error(f"❌ {e}")
        return ExitStatus.RUN_ERROR

    summary_path = result.paths["summary"]
    sys.stdout.write(summary_path.read_text(encoding="utf-8"))

    if result.scoring_error:
        logger.error(f"❌ {result.scoring_error}; records and system metrics kept in {args.out_dir}")
        return ExitStatus.RUN_ERROR
    if result.report.scenario.get("aborted"):
        logger.error(f"❌ scenario aborted, partial results kept in {args.out_dir}")
        return ExitStatus.RUN_ERROR
    if args.fail_on_qos and result.qos_failed:
        logger.error("❌ QoS violation rate above qos_max_violation_rate")
        return ExitStatus.QOS_FAILURE
    logger.info("✅ run complete")
    return ExitStatus.OK
