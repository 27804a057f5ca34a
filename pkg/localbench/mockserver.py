"""
Deterministic OpenAI-compatible streaming backend used as a timing oracle
"""

import asyncio
import json
import logging
import re
import socket
import uuid
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml
from aiohttp import web

from localbench.config import ConfigError

logger = logging.getLogger(__name__)

TOKEN_WORD = "tok "

_WORD = re.compile(r"\S+\s*")


class QueuePolicy(str, Enum):
    """What happens to requests beyond capacity"""
    FIFO_QUEUE = "fifo_queue"
    REJECT_503 = "reject_503"


@dataclass
class MockProfile:
    """Timing and capacity behaviour of the mock backend"""
    init_delay_s: float = 0.0
    load_delay_s: float = 0.0
    ttft_s: float = 0.2
    per_token_delay_s: float = 0.05
    tokens_per_response: int = 10
    capacity: int = 64
    queue_policy: QueuePolicy = QueuePolicy.FIFO_QUEUE
    jitter_s: float = 0.0
    emit_usage: bool = False
    seed: int = 0
    model: str = "mock-model"
    canned_path: Optional[str] = None

    def __post_init__(self):
        self.queue_policy = QueuePolicy(self.queue_policy)
        for name in ("init_delay_s", "load_delay_s", "ttft_s", "per_token_delay_s", "jitter_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.tokens_per_response < 1:
            raise ValueError("tokens_per_response must be >= 1")

    @property
    def service_time_s(self) -> float:
        """Nominal stream duration with zero jitter"""
        return self.ttft_s + (self.tokens_per_response - 1) * self.per_token_delay_s

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        data = asdict(self)
        data["queue_policy"] = self.queue_policy.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MockProfile":
        """Create from dictionary, rejecting unknown keys"""
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError("unknown_field", f"unknown profile field '{key}'", field=key)
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise ConfigError("constraint", f"invalid mock profile: {e}") from e


@dataclass
class CannedResponse:
    prompt_substring: str
    response: str


@dataclass
class MockStats:
    """Counters exposed on /__stats"""
    in_flight: int = 0
    max_in_flight: int = 0
    total_requests: int = 0
    rejected: int = 0

    def to_dict(self) -> Dict[str, int]:
        return {
            "max_in_flight": self.max_in_flight,
            "total_requests": self.total_requests,
            "rejected": self.rejected,
            "in_flight": self.in_flight,
        }


def load_profile(path: str) -> MockProfile:
    """Read a YAML key-value profile"""

    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError("syntax", f"cannot read mock profile {path}: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("syntax", f"mock profile {path} must be a key-value mapping")
    return MockProfile.from_dict(data)


def load_canned(path: str) -> List[CannedResponse]:
    """Read line-delimited {prompt_substring, response} records"""

    canned = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                item = json.loads(line)
                canned.append(CannedResponse(str(item["prompt_substring"]), str(item["response"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError("syntax", f"{path}:{line_no}: bad canned response: {e}", line=line_no) from e
    return canned


def _sse(payload: Any) -> bytes:
    if isinstance(payload, str):
        return f"data: {payload}\n\n".encode()
    return f"data: {json.dumps(payload)}\n\n".encode()


class MockServer:
    """Running mock backend"""

    def __init__(self, profile: MockProfile, canned: Optional[List[CannedResponse]] = None):
        self.profile = profile
        self.canned = canned or []
        self.stats = MockStats()
        self.host = "127.0.0.1"
        self.port = 0
        self._gate = asyncio.Semaphore(profile.capacity)
        self._rng = np.random.default_rng(profile.seed)
        self._ready_at = 0.0
        self._runner: Optional[web.AppRunner] = None
        self._bind_task: Optional[asyncio.Task] = None

    def build_app(self) -> web.Application:
        app = web.Application()
        app.router.add_get("/health", self.health)
        app.router.add_get("/v1/models", self.models)
        app.router.add_get("/__stats", self.get_stats)
        app.router.add_post("/v1/chat/completions", self.chat_completions)
        return app

    @property
    def ready(self) -> bool:
        return asyncio.get_running_loop().time() >= self._ready_at

    async def start(self, host: str, port: int, elapsed_before_s: float = 0.0) -> None:
        """Bind now, accept after init_delay, report ready after init+load delays"""

        loop = asyncio.get_running_loop()
        t_ref = loop.time() - elapsed_before_s
        self._ready_at = t_ref + self.profile.init_delay_s + self.profile.load_delay_s

        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
        except OSError:
            sock.close()
            raise
        self.host, self.port = sock.getsockname()[:2]

        self._runner = web.AppRunner(self.build_app(), access_log=None)
        await self._runner.setup()
        self._bind_task = asyncio.create_task(self._listen_at(sock, t_ref + self.profile.init_delay_s))

    async def _listen_at(self, sock: socket.socket, at: float) -> None:
        loop = asyncio.get_running_loop()
        await asyncio.sleep(max(0.0, at - loop.time()))
        # asyncio calls listen() when the site starts serving
        site = web.SockSite(self._runner, sock)
        await site.start()
        logger.info(f"mock backend accepting on {self.host}:{self.port}")

    async def wait_listening(self) -> None:
        if self._bind_task is not None:
            await asyncio.shield(self._bind_task)

    async def stop(self) -> None:
        if self._bind_task is not None and not self._bind_task.done():
            self._bind_task.cancel()
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None

    async def health(self, request: web.Request) -> web.Response:
        if not self.ready:
            return web.json_response({"status": "loading"}, status=503)
        return web.json_response({"status": "ok"})

    async def models(self, request: web.Request) -> web.Response:
        if not self.ready:
            return web.json_response({"status": "loading"}, status=503)
        return web.json_response({"object": "list", "data": [{"id": self.profile.model, "object": "model"}]})

    async def get_stats(self, request: web.Request) -> web.Response:
        return web.json_response(self.stats.to_dict())

    def _pieces(self, prompt: str, max_tokens: Optional[int]) -> List[str]:
        for item in self.canned:
            if item.prompt_substring in prompt:
                pieces = _WORD.findall(item.response) or [item.response or TOKEN_WORD]
                break
        else:
            pieces = [TOKEN_WORD] * self.profile.tokens_per_response
        if max_tokens is not None and max_tokens > 0:
            pieces = pieces[:max_tokens]
        return pieces

    def _delay(self, nominal: float) -> float:
        if self.profile.jitter_s <= 0:
            return nominal
        return max(0.0, nominal + float(self._rng.uniform(-self.profile.jitter_s, self.profile.jitter_s)))

    async def chat_completions(self, request: web.Request) -> web.StreamResponse:
        self.stats.total_requests += 1
        if not self.ready:
            return web.json_response({"error": {"type": "loading", "message": "model is loading"}}, status=503)

        try:
            body = await request.json()
            prompt = "".join(m.get("content", "") for m in body.get("messages", []) if isinstance(m, dict))
        except (json.JSONDecodeError, AttributeError):
            return web.json_response({"error": {"type": "bad_request", "message": "invalid JSON body"}}, status=400)

        if self.profile.queue_policy is QueuePolicy.REJECT_503 and self._gate.locked():
            self.stats.rejected += 1
            return web.json_response(
                {"error": {"type": "capacity_exceeded", "message": "server at capacity"},
                 "reason": "capacity_exceeded", "capacity": self.profile.capacity},
                status=503,
            )

        async with self._gate:
            self.stats.in_flight += 1
            self.stats.max_in_flight = max(self.stats.max_in_flight, self.stats.in_flight)
            try:
                return await self._stream(request, prompt, body.get("max_tokens"))
            finally:
                self.stats.in_flight -= 1

    async def _stream(self, request: web.Request, prompt: str, max_tokens: Optional[int]) -> web.StreamResponse:
        loop = asyncio.get_running_loop()
        start = loop.time()
        pieces = self._pieces(prompt, max_tokens)
        completion_id = f"chatcmpl-{uuid.uuid4().hex[:12]}"

        response = web.StreamResponse(headers={"Content-Type": "text/event-stream", "Cache-Control": "no-cache"})
        await response.prepare(request)

        def chunk(delta: Dict[str, str], finish_reason: Optional[str] = None) -> Dict[str, Any]:
            return {
                "id": completion_id,
                "object": "chat.completion.chunk",
                "model": self.profile.model,
                "choices": [{"index": 0, "delta": delta, "finish_reason": finish_reason}],
            }

        # absolute deadlines so scheduling error does not accumulate
        target = start + self._delay(self.profile.ttft_s)
        for i, piece in enumerate(pieces):
            if i > 0:
                target += self._delay(self.profile.per_token_delay_s)
            await asyncio.sleep(max(0.0, target - loop.time()))
            delta = {"role": "assistant", "content": piece} if i == 0 else {"content": piece}
            await response.write(_sse(chunk(delta)))

        await response.write(_sse(chunk({}, finish_reason="length" if max_tokens == len(pieces) else "stop")))
        if self.profile.emit_usage:
            usage = {"prompt_tokens": len(prompt.split()), "completion_tokens": len(pieces),
                     "total_tokens": len(prompt.split()) + len(pieces)}
            await response.write(_sse({"id": completion_id, "object": "chat.completion.chunk",
                                       "model": self.profile.model, "choices": [], "usage": usage}))
        await response.write(_sse("[DONE]"))
        await response.write_eof()
        return response


async def serve(profile: MockProfile, port: int, host: str = "127.0.0.1",
                canned: Optional[List[CannedResponse]] = None, elapsed_before_s: float = 0.0) -> MockServer:
    """Start a mock backend; the port is bound immediately and accepts after init_delay_s"""

    if canned is None and profile.canned_path:
        canned = load_canned(profile.canned_path)
    server = MockServer(profile, canned)
    await server.start(host, port, elapsed_before_s)
    return server
