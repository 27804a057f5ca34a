#!/usr/bin/env python3
"""
localbench - Main Entry Point
Benchmark OpenAI-compatible LLM inference backends on local hardware
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import List, Optional

from localbench import __version__
from localbench.config import LOG_FILE, LOG_FORMAT
from localbench.handlers import ExitStatus, compare, mock_serve, recompute, run, validate

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "results"
GLOBAL_DEFAULTS = {
    "out_dir": DEFAULT_OUT_DIR,
    "seed": None,
    "fail_on_qos": False,
    "log_level": "INFO",
}


def global_flags() -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand"""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--out-dir", default=argparse.SUPPRESS, help=f"run output directory (default {DEFAULT_OUT_DIR})")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the configured seed")
    parser.add_argument("--fail-on-qos", action="store_true", default=argparse.SUPPRESS,
                        help="exit 3 when QoS violation rates exceed qos_max_violation_rate")
    parser.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging level (default INFO)")
    return parser


def build_parser() -> argparse.ArgumentParser:
    flags = global_flags()
    parser = argparse.ArgumentParser(prog="localbench", parents=[flags],
                                     description="LLM inference benchmarking for local deployments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Register subcommands
    run.register(subparsers, [flags])
    mock_serve.register(subparsers, [flags])
    validate.register(subparsers, [flags])
    compare.register(subparsers, [flags])
    recompute.register(subparsers, [flags])
    return parser


def setup_logging(level: str, log_file: Optional[Path] = None) -> None:
    """Stream handler always, plus a file handler for runs"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, handlers=handlers, force=True)
    logging.getLogger("aiohttp.access").setLevel(logging.WARNING)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the chosen handler and return its exit code"""

    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)

    log_file = Path(args.out_dir) / LOG_FILE if args.command == "run" else None
    setup_logging(args.log_level, log_file)

    try:
        return int(asyncio.run(args.handler(args)))
    except KeyboardInterrupt:
        logger.info("🛑 Stopped by user")
        return int(ExitStatus.RUN_ERROR)
    except Exception as e:
        logger.exception(f"💥 Critical error: {e}")
        return int(ExitStatus.RUN_ERROR)


def run_cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run_cli()
