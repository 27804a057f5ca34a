import asyncio
import json
import os
import sys
import time
from pathlib import Path

import pytest
from aiohttp import web

from localbench.backend import (
    BackendStartupError,
    ChatClient,
    ReadyTimeoutError,
    RequestParams,
    count_sentences,
    is_connection_failure,
    launch_and_probe,
)
from localbench.config import LaunchSpec
from localbench.models import RequestStatus, TokenCountMethod

REPO_ROOT = Path(__file__).resolve().parents[1]


def sse(payload) -> bytes:
    text = payload if isinstance(payload, str) else json.dumps(payload)
    return f"data: {text}\n\n".encode()


def content_chunk(text: str) -> dict:
    return {"choices": [{"index": 0, "delta": {"content": text}, "finish_reason": None}]}


async def start_scripted(port: int, events: list) -> web.AppRunner:
    """Backend that streams a fixed list of SSE payloads"""

    async def chat(request: web.Request) -> web.StreamResponse:
        await request.read()
        response = web.StreamResponse(headers={"Content-Type": "text/event-stream"})
        await response.prepare(request)
        for event in events:
            await response.write(sse(event))
        await response.write_eof()
        return response

    app = web.Application()
    app.router.add_post("/v1/chat/completions", chat)
    runner = web.AppRunner(app)
    await runner.setup()
    await web.TCPSite(runner, "127.0.0.1", port).start()
    return runner


@pytest.fixture
async def scripted_backend(unused_tcp_port_factory):
    runners = []

    async def start(events):
        port = unused_tcp_port_factory()
        runners.append(await start_scripted(port, events))
        client = ChatClient(f"http://127.0.0.1:{port}", RequestParams("scripted", 64), api_key="")
        await client.__aenter__()
        runners.append(client)
        return client

    yield start
    for item in reversed(runners):
        if isinstance(item, ChatClient):
            await item.close()
        else:
            await item.cleanup()


def test_count_sentences():
    assert count_sentences("Hello world. How are you? Fine!") == 3
    assert count_sentences("Wait... what?!") == 2
    assert count_sentences("no terminator") == 1
    assert count_sentences("") == 0
    assert count_sentences("   ") == 0


async def test_chunk_count_and_ttft(mock_backend, client_for):
    server = await mock_backend(ttft_s=0.2, per_token_delay_s=0.05, tokens_per_response=10)
    client = await client_for(server)

    record = await client.stream_completion("hello", seq=3, instance_id="x")
    assert record.status is RequestStatus.OK
    assert record.completion_tokens == 10
    assert record.token_count_method is TokenCountMethod.CHUNKS
    assert len(record.chunk_times) == 10
    assert record.output_text == "tok " * 10
    assert record.seq == 3 and record.instance_id == "x"
    assert record.http_status == 200

    ttft = record.first_token_time - record.dispatch_time
    assert 0.15 <= ttft <= 0.45
    assert 0.6 <= record.completion_time - record.dispatch_time <= 1.0
    assert record.arrival_time <= record.dispatch_time <= record.first_token_time <= record.completion_time


async def test_usage_reported_by_server_wins(mock_backend, client_for):
    server = await mock_backend(ttft_s=0.01, per_token_delay_s=0.0, tokens_per_response=5, emit_usage=True)
    client = await client_for(server)
    record = await client.stream_completion("one two three")
    assert record.completion_tokens == 5
    assert record.prompt_tokens == 3
    assert record.token_count_method is TokenCountMethod.USAGE


async def test_usage_overrides_chunk_count(scripted_backend):
    client = await scripted_backend([
        content_chunk("many tokens "), content_chunk("per "), content_chunk("chunk."),
        {"choices": [], "usage": {"prompt_tokens": 12, "completion_tokens": 96}},
        "[DONE]",
    ])
    record = await client.stream_completion("p")
    assert record.ok
    assert len(record.chunk_times) == 3
    assert record.completion_tokens == 96
    assert record.token_count_method is TokenCountMethod.USAGE
    assert record.sentence_count == 1


async def test_malformed_event_is_stream_error(scripted_backend):
    client = await scripted_backend([content_chunk("a"), "{not json", "[DONE]"])
    record = await client.stream_completion("p")
    assert record.status is RequestStatus.STREAM_ERROR
    assert "malformed" in record.error


async def test_missing_terminator_is_stream_error(scripted_backend):
    client = await scripted_backend([content_chunk("a"), content_chunk("b")])
    record = await client.stream_completion("p")
    assert record.status is RequestStatus.STREAM_ERROR
    assert record.output_text == "ab"


async def test_no_content_is_empty_output(scripted_backend):
    client = await scripted_backend([{"choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}]}, "[DONE]"])
    record = await client.stream_completion("p")
    assert record.status is RequestStatus.EMPTY_OUTPUT
    assert record.completion_tokens == 0


async def test_rejection_is_http_error(mock_backend, client_for):
    server = await mock_backend(capacity=1, queue_policy="reject_503", ttft_s=0.3, tokens_per_response=2)
    client = await client_for(server)

    # second request while the first is still streaming
    task = asyncio.create_task(client.stream_completion("a", seq=0))
    await asyncio.sleep(0.05)
    rejected = await client.stream_completion("b", seq=1)
    accepted = await task

    assert accepted.ok
    assert rejected.status is RequestStatus.HTTP_ERROR
    assert rejected.http_status == 503
    assert "capacity_exceeded" in rejected.error
    assert not is_connection_failure(rejected)


async def test_unreachable_backend_is_connection_failure(unused_tcp_port):
    async with ChatClient(f"http://127.0.0.1:{unused_tcp_port}", RequestParams("m", 8), api_key="") as client:
        record = await client.stream_completion("p")
    assert record.status is RequestStatus.HTTP_ERROR
    assert record.http_status is None
    assert is_connection_failure(record)


async def test_concurrent_requests_within_capacity_overlap(mock_backend, client_for):
    server = await mock_backend(capacity=2, ttft_s=0.2, per_token_delay_s=0.05, tokens_per_response=10)
    client = await client_for(server)

    started = time.perf_counter()
    records = await asyncio.gather(client.stream_completion("a", seq=0), client.stream_completion("b", seq=1))
    elapsed = time.perf_counter() - started

    assert all(r.ok for r in records)
    assert elapsed < 1.0
    assert server.stats.max_in_flight == 2


async def test_attach_mode_reports_zero_startup(mock_backend, client_for):
    server = await mock_backend(ttft_s=0.05, per_token_delay_s=0.0, tokens_per_response=2)
    client = await client_for(server)

    report, process = await launch_and_probe(None, client, attach_timeout_s=5.0)
    assert process is None
    assert report.attached
    assert report.t_startup_s == 0.0 and report.t_load_s == 0.0
    assert 0.03 <= report.probe_ttft_s <= 0.3
    assert report.t_cold_s == pytest.approx(report.probe_ttft_s)


async def test_attach_to_nothing_times_out(unused_tcp_port):
    async with ChatClient(f"http://127.0.0.1:{unused_tcp_port}", RequestParams("m", 8), api_key="") as client:
        with pytest.raises(ReadyTimeoutError):
            await launch_and_probe(None, client, attach_timeout_s=0.3)


async def test_launch_refuses_bound_port(mock_backend, client_for):
    server = await mock_backend()
    client = await client_for(server)
    launch = LaunchSpec(command=["definitely-not-started"])
    with pytest.raises(BackendStartupError, match="already bound"):
        await launch_and_probe(launch, client)


async def test_launch_reports_early_exit(unused_tcp_port):
    launch = LaunchSpec(command=[sys.executable, "-c", "print('boom'); raise SystemExit(3)"], ready_timeout_s=20)
    async with ChatClient(f"http://127.0.0.1:{unused_tcp_port}", RequestParams("m", 8), api_key="") as client:
        with pytest.raises(BackendStartupError) as excinfo:
            await launch_and_probe(launch, client)
    assert "code 3" in str(excinfo.value)
    assert "boom" in excinfo.value.output_tail


@pytest.mark.slow
async def test_cold_start_decomposition(tmp_path, unused_tcp_port):
    profile = tmp_path / "profile.yaml"
    profile.write_text("init_delay_s: 2\nload_delay_s: 3\nttft_s: 0.2\nper_token_delay_s: 0.0\n", encoding="utf-8")
    launch = LaunchSpec(
        command=[sys.executable, "-m", "localbench", "mock-serve",
                 "--profile", str(profile), "--port", str(unused_tcp_port)],
        env={"PYTHONPATH": os.pathsep.join(filter(None, [str(REPO_ROOT), os.environ.get("PYTHONPATH")]))},
        ready_timeout_s=30,
    )
    async with ChatClient(f"http://127.0.0.1:{unused_tcp_port}", RequestParams("mock-model", 8), api_key="") as client:
        report, process = await launch_and_probe(launch, client)
        try:
            assert not report.attached
            assert 1.95 <= report.t_startup_s <= 2.4
            assert 2.9 <= report.t_load_s <= 3.4
            assert 0.15 <= report.probe_ttft_s <= 0.5
            assert report.t_cold_s == pytest.approx(report.t_startup_s + report.t_load_s + report.probe_ttft_s)
        finally:
            await process.teardown()
            await process.teardown()
    assert process.exited


@pytest.mark.slow
async def test_load_timeout_reports_partial_timings(tmp_path, unused_tcp_port):
    profile = tmp_path / "profile.yaml"
    profile.write_text("init_delay_s: 0\nload_delay_s: 60\n", encoding="utf-8")
    launch = LaunchSpec(
        command=[sys.executable, "-m", "localbench", "mock-serve",
                 "--profile", str(profile), "--port", str(unused_tcp_port)],
        env={"PYTHONPATH": os.pathsep.join(filter(None, [str(REPO_ROOT), os.environ.get("PYTHONPATH")]))},
        ready_timeout_s=8,
    )
    async with ChatClient(f"http://127.0.0.1:{unused_tcp_port}", RequestParams("mock-model", 8), api_key="") as client:
        with pytest.raises(ReadyTimeoutError) as excinfo:
            await launch_and_probe(launch, client)
    error = excinfo.value
    assert error.t_startup_s is not None and error.t_load_s is not None
    assert error.t_load_s > 0
    assert 7.9 <= error.t_startup_s + error.t_load_s <= 9.0


@pytest.mark.slow
async def test_timing_fidelity_over_thirty_requests(mock_backend, client_for):
    server = await mock_backend(ttft_s=0.2, per_token_delay_s=0.05, tokens_per_response=10)
    client = await client_for(server)

    ttfts, tpots = [], []
    for seq in range(30):
        record = await client.stream_completion("p", seq=seq)
        ttfts.append(record.first_token_time - record.dispatch_time)
        tpots.append((record.completion_time - record.first_token_time) / record.completion_tokens)

    assert 0.2 <= sum(ttfts) / 30 <= 0.22
    assert 0.2 <= min(ttfts) and max(ttfts) <= 0.22
    # nine inter-token gaps spread over ten tokens
    assert 0.044 <= sum(tpots) / 30 <= 0.05
