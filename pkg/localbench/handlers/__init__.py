"""
Command handlers, one module per subcommand
"""

from enum import IntEnum


class ExitStatus(IntEnum):
    """Process exit codes"""
    OK = 0
    RUN_ERROR = 1
    CONFIG_ERROR = 2
    QOS_FAILURE = 3
