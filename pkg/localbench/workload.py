"""
Serving scenarios: single-stream, batch waves and open-loop Poisson server traffic
"""

import asyncio
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from localbench.backend import CompletionClient, is_connection_failure
from localbench.config import SATURATION_TICKS, SCHEDULER_TICK_S, BenchmarkConfig, Scenario
from localbench.models import RequestRecord, TaskInstance
from localbench.utils.clock import now

logger = logging.getLogger(__name__)


@dataclass
class ArrivalPlan:
    """Pre-planned per-user arrival offsets in seconds from scenario start"""
    per_user_arrivals: List[List[float]]
    horizon_s: float
    rate_rpm: float = 0.0
    seed: int = 0

    @property
    def users(self) -> int:
        return len(self.per_user_arrivals)

    @property
    def total(self) -> int:
        return sum(len(offsets) for offsets in self.per_user_arrivals)

    def merged(self) -> List[Tuple[float, int]]:
        """All arrivals as (offset_s, user_id), in dispatch order"""
        return sorted(
            (offset, user) for user, offsets in enumerate(self.per_user_arrivals) for offset in offsets
        )

    def inter_arrival_gaps(self) -> List[float]:
        gaps = []
        for offsets in self.per_user_arrivals:
            gaps.extend(np.diff([0.0] + offsets).tolist())
        return gaps


def plan_arrivals(users: int, rate_rpm: float, horizon_s: float, seed: int) -> ArrivalPlan:
    """Independent Poisson processes, one per user, truncated at the horizon"""

    if rate_rpm <= 0:
        raise ValueError("rate_rpm must be > 0")
    if users < 1:
        raise ValueError("users must be >= 1")

    rng = np.random.default_rng(seed)
    mean_gap = 60.0 / rate_rpm
    block = int(horizon_s / mean_gap * 1.5) + 16

    per_user = []
    for _ in range(users):
        offsets = np.cumsum(rng.exponential(mean_gap, size=block))
        while offsets[-1] < horizon_s:
            more = offsets[-1] + np.cumsum(rng.exponential(mean_gap, size=block))
            offsets = np.concatenate([offsets, more])
        per_user.append(offsets[offsets < horizon_s].tolist())

    plan = ArrivalPlan(per_user_arrivals=per_user, horizon_s=horizon_s, rate_rpm=rate_rpm, seed=seed)
    logger.info(f"planned {plan.total} arrivals for {users} users at {rate_rpm} rpm over {horizon_s} s")
    return plan


def dump_plan(plan: ArrivalPlan, path: str) -> None:
    """One 'user_id,offset_s' line per arrival"""
    with open(path, "w", encoding="utf-8") as f:
        for offset, user in plan.merged():
            f.write(f"{user},{offset:.9f}\n")


@dataclass
class ScenarioOutcome:
    """Records and wall time of one scenario run"""
    scenario: str
    records: List[RequestRecord] = field(default_factory=list)
    start_time: float = 0.0
    wall_time_s: float = 0.0
    aborted: bool = False
    abort_reason: str = ""
    warnings: List[str] = field(default_factory=list)
    waves: List[int] = field(default_factory=list)
    planned_arrivals: int = 0


class _Collector:
    """Sequence numbers, the record list and the optional sink"""

    def __init__(self, outcome: ScenarioOutcome, sink: Optional[asyncio.Queue]):
        self.outcome = outcome
        self.sink = sink
        self._seq = 0

    def next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def add(self, record: RequestRecord) -> None:
        self.outcome.records.append(record)
        if self.sink is not None:
            self.sink.put_nowait(record)
        if is_connection_failure(record) and not self.outcome.aborted:
            self.outcome.aborted = True
            self.outcome.abort_reason = f"backend stopped accepting connections: {record.error}"
            logger.error(f"❌ aborting scenario: {self.outcome.abort_reason}")

    def finish(self) -> ScenarioOutcome:
        self.outcome.records.sort(key=lambda r: r.seq)
        self.outcome.wall_time_s = now() - self.outcome.start_time
        if self.sink is not None:
            self.sink.put_nowait(None)
        return self.outcome


async def run_single_stream(instances: Sequence[TaskInstance], client: CompletionClient,
                            sink: Optional[asyncio.Queue] = None) -> ScenarioOutcome:
    """One request at a time; the next is dispatched when the previous completes"""

    collector = _Collector(ScenarioOutcome(scenario=Scenario.SINGLE.value, start_time=now()), sink)
    for instance in instances:
        if collector.outcome.aborted:
            break
        record = await client.stream_completion(
            instance.prompt, seq=collector.next_seq(), instance_id=instance.id, arrival_time=now()
        )
        collector.add(record)
    return collector.finish()


async def run_batch(instances: Sequence[TaskInstance], batch_size: int, client: CompletionClient,
                    sink: Optional[asyncio.Queue] = None) -> ScenarioOutcome:
    """Consecutive waves of batch_size concurrent requests"""

    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    collector = _Collector(ScenarioOutcome(scenario=Scenario.BATCH.value, start_time=now()), sink)
    for first in range(0, len(instances), batch_size):
        if collector.outcome.aborted:
            break
        wave = instances[first:first + batch_size]
        arrival = now()
        calls = [
            client.stream_completion(instance.prompt, seq=collector.next_seq(), instance_id=instance.id,
                                     arrival_time=arrival)
            for instance in wave
        ]
        for record in await asyncio.gather(*calls):
            collector.add(record)
        collector.outcome.waves.append(len(wave))
        logger.debug(f"wave {len(collector.outcome.waves)} of {len(wave)} requests done")
    return collector.finish()


async def run_server(instances: Sequence[TaskInstance], plan: ArrivalPlan, client: CompletionClient,
                     tick_s: float = SCHEDULER_TICK_S,
                     sink: Optional[asyncio.Queue] = None) -> ScenarioOutcome:
    """Open-loop dispatch at planned arrival offsets; prompts cycle round-robin"""

    arrivals = plan.merged()
    if arrivals and not instances:
        raise ValueError("server scenario needs at least one instance")

    outcome = ScenarioOutcome(scenario=Scenario.SERVER.value, start_time=now(), planned_arrivals=len(arrivals))
    collector = _Collector(outcome, sink)
    start = outcome.start_time
    in_flight = set()
    late = 0
    max_lag = 0.0

    async def execute(instance: TaskInstance, seq: int, arrival_time: float) -> None:
        record = await client.stream_completion(instance.prompt, seq=seq, instance_id=instance.id,
                                                arrival_time=arrival_time)
        collector.add(record)

    index = 0
    while index < len(arrivals) and not outcome.aborted:
        elapsed = now() - start
        while index < len(arrivals) and arrivals[index][0] <= elapsed:
            offset, _ = arrivals[index]
            lag = elapsed - offset
            max_lag = max(max_lag, lag)
            if lag > SATURATION_TICKS * tick_s:
                late += 1
            instance = instances[index % len(instances)]
            task = asyncio.create_task(execute(instance, collector.next_seq(), start + offset))
            in_flight.add(task)
            task.add_done_callback(in_flight.discard)
            index += 1
        if index < len(arrivals):
            await asyncio.sleep(max(0.0, min(tick_s, arrivals[index][0] - (now() - start))))

    if not outcome.aborted:
        await asyncio.sleep(max(0.0, plan.horizon_s - (now() - start)))
    if in_flight:
        logger.info(f"draining {len(in_flight)} in-flight requests")
        await asyncio.gather(*in_flight)

    if late:
        message = (f"harness saturation: {late} dispatches fell more than {SATURATION_TICKS} ticks behind "
                   f"schedule (max lag {max_lag * 1000:.1f} ms)")
        logger.warning(f"⚠️ {message}")
        outcome.warnings.append(message)
    return collector.finish()


async def run_scenario(config: BenchmarkConfig, instances: Sequence[TaskInstance], client: CompletionClient,
                       sink: Optional[asyncio.Queue] = None, plan_path: Optional[Path] = None) -> ScenarioOutcome:
    """Run the configured scenario"""

    if config.scenario is Scenario.SINGLE:
        return await run_single_stream(instances, client, sink)
    if config.scenario is Scenario.BATCH:
        return await run_batch(instances, config.batch_size, client, sink)

    plan = plan_arrivals(config.concurrent_users, config.requests_per_user_per_min, config.run_time_s, config.seed)
    if plan_path is not None:
        dump_plan(plan, str(plan_path))
    return await run_server(instances, plan, client, sink=sink)
