"""
Validate handler: parse a configuration without touching the network
"""

import logging
import sys

from localbench.config import ConfigError, dump_config, load_config
from localbench.handlers import ExitStatus

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("validate", parents=parents, help="check a configuration file")
    parser.add_argument("config", help="YAML configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable")
    parser.set_defaults(handler=handle)


def describe(error: ConfigError) -> str:
    """One-line description naming the offending field or position"""
    parts = [f"{error.kind}: {error}"]
    if error.field and error.field not in str(error):
        parts.append(f"(field {error.field})")
    return " ".join(parts)


async def handle(args) -> ExitStatus:
    """Print the normalized configuration or the first violation"""
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        config = load_config(args.config, overrides)
    except ConfigError as e:
        print(describe(e), file=sys.stderr)
        return ExitStatus.CONFIG_ERROR

    print(dump_config(config), end="")
    return ExitStatus.OK
