"""
Mock-serve handler: run the deterministic mock backend until signaled
"""

import asyncio
import json
import logging
import signal
import time

import psutil

from localbench.config import ConfigError
from localbench.handlers import ExitStatus
from localbench.handlers.validate import describe
from localbench.mockserver import MockProfile, load_canned, load_profile, serve

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("mock-serve", parents=parents, help="serve the mock OpenAI-compatible backend")
    parser.add_argument("--profile", help="YAML profile (defaults apply when omitted)")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--canned", help="line-delimited {prompt_substring, response} file")
    parser.set_defaults(handler=handle)


async def handle(args) -> ExitStatus:
    """Serve until SIGINT/SIGTERM, then print the stats"""

    try:
        profile = load_profile(args.profile) if args.profile else MockProfile()
        canned = load_canned(args.canned) if args.canned else None
    except (ConfigError, OSError) as e:
        logger.error(f"❌ {describe(e) if isinstance(e, ConfigError) else e}")
        return ExitStatus.CONFIG_ERROR

    # delays count from process launch, as a real engine's would
    elapsed = max(0.0, time.time() - psutil.Process().create_time())
    try:
        server = await serve(profile, args.port, args.host, canned=canned, elapsed_before_s=elapsed)
    except OSError as e:
        logger.error(f"❌ cannot bind {args.host}:{args.port}: {e}")
        return ExitStatus.RUN_ERROR

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)

    logger.info(f"🔥 mock backend on {args.host}:{server.port} "
                f"(init {profile.init_delay_s}s, load {profile.load_delay_s}s, ttft {profile.ttft_s}s)")
    try:
        await stop.wait()
    finally:
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.remove_signal_handler(sig)
        await server.stop()

    print(json.dumps(server.stats.to_dict()), flush=True)
    logger.info("🛑 mock backend stopped")
    return ExitStatus.OK
