"""
Process-wide monotonic clock shared by every timing hook
"""

import time

CLOCK_NAME = "time.perf_counter"


def now() -> float:
    """Monotonic seconds with sub-microsecond resolution"""
    return time.perf_counter()


def clock_info() -> dict:
    """Describe the clock for the environment fingerprint"""
    info = time.get_clock_info("perf_counter")
    return {
        'name': CLOCK_NAME,
        'implementation': info.implementation,
        'resolution_s': info.resolution,
        'monotonic': info.monotonic,
    }
