"""
Backend abstraction: process launch, readiness probing and streaming chat completions
"""

import asyncio
import json
import logging
import os
import re
from collections import deque
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Dict, Optional, Protocol, Tuple
from urllib.parse import urlsplit

import aiohttp
import psutil

from localbench.config import (
    API_KEY_ENV,
    DEFAULT_READY_PATH,
    FALLBACK_READY_PATH,
    LaunchSpec,
)
from localbench.models import ColdStartReport, RequestRecord, RequestStatus, TokenCountMethod
from localbench.utils.clock import now

logger = logging.getLogger(__name__)

CHAT_COMPLETIONS_PATH = "/v1/chat/completions"
POLL_INTERVAL_S = 0.02
TEARDOWN_GRACE_S = 10.0
OUTPUT_TAIL_LINES = 200
CANARY_PROMPT = "Say hello."

_SENTENCE_END = re.compile(r"[.!?]+")


class BackendError(Exception):
    """Backend could not be started, reached or used"""

    def __init__(self, message: str, output_tail: str = ""):
        self.output_tail = output_tail
        super().__init__(message)


class BackendStartupError(BackendError):
    """Backend process exited or could not bind before becoming ready"""


class ReadyTimeoutError(BackendError):
    """Readiness not reached in time; carries the timings measured so far"""

    def __init__(self, message: str, t_startup_s: Optional[float] = None,
                 t_load_s: Optional[float] = None, output_tail: str = ""):
        self.t_startup_s = t_startup_s
        self.t_load_s = t_load_s
        super().__init__(message, output_tail)


def count_sentences(text: str) -> int:
    """Maximal segments ended by '.', '!' or '?'; a trailing unterminated segment counts"""
    return sum(1 for segment in _SENTENCE_END.split(text) if segment.strip())


def is_connection_failure(record: RequestRecord) -> bool:
    """The request never reached an HTTP response"""
    return record.status is RequestStatus.HTTP_ERROR and record.http_status is None


@dataclass(frozen=True)
class RequestParams:
    """Per-request generation parameters"""
    model: str
    max_tokens: int
    temperature: float = 0.0

    def payload(self, prompt: str) -> Dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "stream": True,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "stream_options": {"include_usage": True},
        }


class CompletionClient(Protocol):
    async def stream_completion(self, prompt: str, *, seq: int = 0, instance_id: str = "",
                                arrival_time: Optional[float] = None) -> RequestRecord: ...


async def _stamp_dispatch(session, trace_config_ctx, params) -> None:
    # connection is ready; the next thing on the wire is the request itself
    ctx = trace_config_ctx.trace_request_ctx
    if ctx is not None:
        ctx.dispatch_time = now()


class ChatClient:
    """OpenAI-compatible streaming client; one instance is shared by all executors"""

    def __init__(self, base_url: str, params: RequestParams, request_timeout_s: float = 600.0,
                 api_key: Optional[str] = None):
        self.base_url = base_url.rstrip("/")
        self.params = params
        self.request_timeout_s = request_timeout_s
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self._session: Optional[aiohttp.ClientSession] = None

    async def __aenter__(self) -> "ChatClient":
        trace = aiohttp.TraceConfig()
        trace.on_connection_create_end.append(_stamp_dispatch)
        trace.on_connection_reuseconn.append(_stamp_dispatch)
        self._session = aiohttp.ClientSession(
            connector=aiohttp.TCPConnector(limit=0),
            timeout=aiohttp.ClientTimeout(total=self.request_timeout_s),
            trace_configs=[trace],
        )
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def close(self) -> None:
        if self._session is not None:
            await self._session.close()
            self._session = None

    @property
    def session(self) -> aiohttp.ClientSession:
        if self._session is None:
            raise RuntimeError("ChatClient used outside 'async with'")
        return self._session

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    async def probe_ready(self, path: str) -> Optional[int]:
        """HTTP status of GET {endpoint}{path}, None when unreachable"""
        try:
            async with self.session.get(f"{self.base_url}{path}", headers=self._headers(),
                                        timeout=aiohttp.ClientTimeout(total=2.0)) as response:
                await response.read()
                return response.status
        except (aiohttp.ClientError, asyncio.TimeoutError):
            return None

    async def stream_completion(self, prompt: str, *, seq: int = 0, instance_id: str = "",
                                arrival_time: Optional[float] = None) -> RequestRecord:
        """Issue one streaming chat completion and time it"""

        ctx = SimpleNamespace(dispatch_time=None)
        pre_dispatch = now()
        record = RequestRecord(
            seq=seq,
            instance_id=instance_id,
            arrival_time=pre_dispatch if arrival_time is None else arrival_time,
            dispatch_time=pre_dispatch,
        )
        parts = []
        usage_tokens: Optional[int] = None
        responded = False
        terminated = False

        try:
            async with self.session.post(
                f"{self.base_url}{CHAT_COMPLETIONS_PATH}",
                json=self.params.payload(prompt),
                headers=self._headers(),
                trace_request_ctx=ctx,
            ) as response:
                responded = True
                if ctx.dispatch_time is not None:
                    record.dispatch_time = ctx.dispatch_time
                record.http_status = response.status

                if not 200 <= response.status < 300:
                    body = await response.text()
                    record.completion_time = now()
                    record.status = RequestStatus.HTTP_ERROR
                    record.error = body[:2000]
                    return record

                async for raw in response.content:
                    received = now()
                    line = raw.decode("utf-8", errors="replace").strip()
                    if not line.startswith("data:"):
                        continue
                    payload = line[len("data:"):].strip()
                    if payload == "[DONE]":
                        record.completion_time = received
                        terminated = True
                        break

                    try:
                        data = json.loads(payload)
                    except json.JSONDecodeError:
                        record.status = RequestStatus.STREAM_ERROR
                        record.error = f"malformed stream event: {payload[:200]}"
                        break
                    if not isinstance(data, dict):
                        record.status = RequestStatus.STREAM_ERROR
                        record.error = f"unexpected stream event: {payload[:200]}"
                        break
                    if data.get("error"):
                        record.status = RequestStatus.STREAM_ERROR
                        record.error = json.dumps(data["error"])[:2000]
                        break

                    usage = data.get("usage")
                    if isinstance(usage, dict):
                        if usage.get("completion_tokens") is not None:
                            usage_tokens = int(usage["completion_tokens"])
                        if usage.get("prompt_tokens") is not None:
                            record.prompt_tokens = int(usage["prompt_tokens"])

                    choices = data.get("choices") or []
                    if choices:
                        content = (choices[0].get("delta") or {}).get("content")
                        if content:
                            if record.first_token_time is None:
                                record.first_token_time = received
                            record.chunk_times.append(received)
                            parts.append(content)

        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            record.status = RequestStatus.STREAM_ERROR if responded else RequestStatus.HTTP_ERROR
            record.error = f"{type(e).__name__}: {e}"

        record.output_text = "".join(parts)
        record.sentence_count = count_sentences(record.output_text)
        if record.completion_time is None:
            record.completion_time = now()

        if record.status is RequestStatus.OK and not terminated:
            record.status = RequestStatus.STREAM_ERROR
            record.error = "stream closed before terminator"

        if usage_tokens is not None and (usage_tokens > 0 or not parts):
            record.completion_tokens = usage_tokens
            record.token_count_method = TokenCountMethod.USAGE
        else:
            record.completion_tokens = len(record.chunk_times)
            record.token_count_method = TokenCountMethod.CHUNKS

        if record.status is RequestStatus.OK and not parts:
            record.status = RequestStatus.EMPTY_OUTPUT
        if record.status is not RequestStatus.OK:
            logger.debug(f"request {seq} ({instance_id}) {record.status.value}: {record.error}")
        return record


class BackendProcess:
    """A locally launched backend and its captured output"""

    def __init__(self, process: asyncio.subprocess.Process):
        self.process = process
        self._tail = deque(maxlen=OUTPUT_TAIL_LINES)
        self._reader = asyncio.create_task(self._read_output())
        self._torn_down = False

    @classmethod
    async def start(cls, launch: LaunchSpec, extra_env: Optional[Dict[str, str]] = None) -> "BackendProcess":
        env = {**os.environ, **(extra_env or {}), **launch.env}
        logger.info(f"launching backend: {' '.join(launch.command)}")
        try:
            process = await asyncio.create_subprocess_exec(
                *launch.command,
                stdout=asyncio.subprocess.PIPE,
                stderr=asyncio.subprocess.STDOUT,
                env=env,
            )
        except OSError as e:
            raise BackendStartupError(f"cannot execute backend command: {e}") from e
        return cls(process)

    async def _read_output(self) -> None:
        assert self.process.stdout is not None
        async for line in self.process.stdout:
            self._tail.append(line.decode("utf-8", errors="replace").rstrip())

    @property
    def pid(self) -> int:
        return self.process.pid

    @property
    def exited(self) -> bool:
        return self.process.returncode is not None

    def tail(self) -> str:
        return "\n".join(self._tail)

    async def drain(self, timeout_s: float = 1.0) -> str:
        """Tail once the output pipe has closed, or after timeout_s"""
        try:
            await asyncio.wait_for(asyncio.shield(self._reader), timeout_s)
        except asyncio.TimeoutError:
            pass
        return self.tail()

    async def teardown(self, grace_s: float = TEARDOWN_GRACE_S) -> None:
        """Terminate the process tree, killing stragglers; safe to call twice"""

        if self._torn_down:
            return
        self._torn_down = True

        if not self.exited:
            try:
                parent = psutil.Process(self.pid)
                procs = parent.children(recursive=True) + [parent]
            except psutil.NoSuchProcess:
                procs = []
            for proc in procs:
                try:
                    proc.terminate()
                except psutil.NoSuchProcess:
                    pass
            _, alive = await asyncio.to_thread(psutil.wait_procs, procs, timeout=grace_s)
            for proc in alive:
                logger.warning(f"backend process {proc.pid} ignored SIGTERM; killing")
                try:
                    proc.kill()
                except psutil.NoSuchProcess:
                    pass

        try:
            await asyncio.wait_for(self.process.wait(), timeout=grace_s)
        except asyncio.TimeoutError:
            logger.error(f"backend process {self.pid} did not exit")
        try:
            await asyncio.wait_for(self._reader, timeout=1.0)
        except (asyncio.TimeoutError, asyncio.CancelledError):
            self._reader.cancel()
        logger.info(f"backend process {self.pid} stopped (exit code {self.process.returncode})")


def endpoint_address(base_url: str) -> Tuple[str, int]:
    parts = urlsplit(base_url)
    port = parts.port or (443 if parts.scheme == "https" else 80)
    return parts.hostname or "127.0.0.1", port


async def port_open(host: str, port: int) -> bool:
    """Whether something accepts TCP connections on host:port"""
    try:
        _, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout=1.0)
    except (OSError, asyncio.TimeoutError):
        return False
    writer.close()
    try:
        await writer.wait_closed()
    except OSError:
        pass
    return True


async def wait_ready(client: ChatClient, ready_path: str, deadline: float,
                     process: Optional[BackendProcess] = None) -> None:
    """Poll the readiness endpoint until HTTP 200, falling back to /v1/models on 404"""

    path = ready_path
    while True:
        status = await client.probe_ready(path)
        if status == 200:
            return
        if status == 404 and path != FALLBACK_READY_PATH:
            logger.info(f"{path} not found, probing {FALLBACK_READY_PATH} instead")
            path = FALLBACK_READY_PATH
            continue
        if process is not None and process.exited:
            raise BackendStartupError(
                f"backend exited with code {process.process.returncode} before becoming ready",
                output_tail=await process.drain(),
            )
        if now() > deadline:
            raise ReadyTimeoutError(f"backend not ready at {client.base_url}{path}",
                                    output_tail=process.tail() if process else "")
        await asyncio.sleep(POLL_INTERVAL_S)


async def probe_ttft(client: ChatClient) -> float:
    """TTFT of one canary request"""

    record = await client.stream_completion(CANARY_PROMPT, instance_id="canary")
    if not record.ok:
        raise BackendError(f"canary request failed ({record.status.value}): {record.error}")
    return record.first_token_time - record.dispatch_time


async def launch_and_probe(launch: Optional[LaunchSpec], client: ChatClient, *,
                           attach_timeout_s: float = 30.0,
                           extra_env: Optional[Dict[str, str]] = None) -> Tuple[ColdStartReport, Optional[BackendProcess]]:
    """Start (or attach to) the backend and time startup, load and first token"""

    if launch is None:
        await wait_ready(client, DEFAULT_READY_PATH, now() + attach_timeout_s)
        ttft = await probe_ttft(client)
        logger.info(f"attached to {client.base_url}, probe TTFT {ttft * 1000:.1f} ms")
        return ColdStartReport(t_startup_s=0.0, t_load_s=0.0, probe_ttft_s=ttft, attached=True), None

    host, port = endpoint_address(client.base_url)
    if await port_open(host, port):
        raise BackendStartupError(f"port {port} on {host} is already bound; refusing to launch")

    t_launch = now()
    deadline = t_launch + launch.ready_timeout_s
    process = await BackendProcess.start(launch, extra_env)
    t_accept = None
    try:
        while not await port_open(host, port):
            if process.exited:
                raise BackendStartupError(
                    f"backend exited with code {process.process.returncode} before accepting connections",
                    output_tail=await process.drain(),
                )
            if now() > deadline:
                raise ReadyTimeoutError(f"backend did not accept connections on {host}:{port}",
                                        output_tail=process.tail())
            await asyncio.sleep(POLL_INTERVAL_S)
        t_accept = now()

        try:
            await wait_ready(client, launch.ready_path, deadline, process)
        except ReadyTimeoutError as e:
            e.t_startup_s = t_accept - t_launch
            e.t_load_s = now() - t_accept
            raise
        t_ready = now()
        ttft = await probe_ttft(client)
    except BaseException:
        await process.teardown()
        raise

    report = ColdStartReport(t_startup_s=t_accept - t_launch, t_load_s=t_ready - t_accept, probe_ttft_s=ttft)
    logger.info(
        f"backend ready: startup {report.t_startup_s:.2f} s, load {report.t_load_s:.2f} s, "
        f"probe TTFT {report.probe_ttft_s * 1000:.1f} ms, cold start {report.t_cold_s:.2f} s"
    )
    return report, process
