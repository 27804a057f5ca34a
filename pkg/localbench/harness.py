"""
Benchmark pipeline: prompts, launch/attach, telemetry, scenario, teardown, scoring, report
"""

import asyncio
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

from localbench.backend import ChatClient, RequestParams, launch_and_probe
from localbench.config import (
    MODEL_ID_ENV,
    QUANTIZATION_ENV,
    SCHEDULER_TICK_S,
    BenchmarkConfig,
    Scenario,
)
from localbench.metrics import compute_system_metrics, model_size
from localbench.report import RunReport, emit, environment_fingerprint, new_run_id
from localbench.tasks import ROUGE_VARIANT, get_task, score_run
from localbench.telemetry import ProcessTreeMonitor, TelemetrySeries, make_provider, start_sampler
from localbench.workload import ScenarioOutcome, run_scenario

logger = logging.getLogger(__name__)

PLAN_FILE = "arrival_plan.csv"
PROGRESS_EVERY = 25

BATCH_SEMANTICS = ("each wave is batch_size concurrent single-prompt requests; "
                   "the engine's continuous batching coalesces them")


@dataclass
class RunResult:
    report: RunReport
    paths: Dict[str, Path]
    scoring_error: Optional[str] = None

    @property
    def qos_failed(self) -> bool:
        """Any violation rate above the configured ceiling"""
        server = self.report.metrics["requests"].get("server")
        if not server:
            return False
        ceiling = self.report.config.get("qos_max_violation_rate", 0.0)
        return server["ttft_violation_rate"] > ceiling or server["e2e_violation_rate"] > ceiling


async def _log_progress(sink: asyncio.Queue, expected: Optional[int]) -> None:
    done = 0
    while True:
        record = await sink.get()
        if record is None:
            return
        done += 1
        if done % PROGRESS_EVERY == 0:
            total = f"/{expected}" if expected else ""
            logger.info(f"⚡ {done}{total} requests completed")


def _scenario_summary(config: BenchmarkConfig, outcome: ScenarioOutcome) -> Dict:
    summary = {
        "name": outcome.scenario,
        "wall_time_s": outcome.wall_time_s,
        "aborted": outcome.aborted,
        "abort_reason": outcome.abort_reason,
        "n_records": len(outcome.records),
    }
    if config.scenario is Scenario.BATCH:
        summary.update(batch_size=config.batch_size, waves=list(outcome.waves), batch_semantics=BATCH_SEMANTICS)
    if config.scenario is Scenario.SERVER:
        summary.update(
            concurrent_users=config.concurrent_users,
            requests_per_user_per_min=config.requests_per_user_per_min,
            run_time_s=config.run_time_s,
            planned_arrivals=outcome.planned_arrivals,
            scheduler_tick_s=SCHEDULER_TICK_S,
            arrival_plan=PLAN_FILE,
        )
    return summary


async def run_benchmark(config: BenchmarkConfig, out_dir: Path) -> RunResult:
    """Execute one benchmark cell end to end and persist its report"""

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = new_run_id()
    warnings = []
    logger.info(f"🚀 run {run_id}: {config.model_id} on {config.backend.value}, "
                f"task={config.task.value}, scenario={config.scenario.value}")

    plugin = get_task(config.task.value, config.prompt_template, config.custom_metric)
    instances, dataset_warnings = plugin.generate_prompts(config.dataset_path, config.samples, config.seed)
    warnings.extend(dataset_warnings)
    await plugin.preflight(instances)

    provider = make_provider(config.telemetry)
    params = RequestParams(model=config.model_id, max_tokens=config.max_output_tokens)
    extra_env = {MODEL_ID_ENV: config.model_id, QUANTIZATION_ENV: config.quantization}
    sink: asyncio.Queue = asyncio.Queue()

    async with ChatClient(config.base_url, params, config.request_timeout_s) as client:
        cold_start, process = await launch_and_probe(
            config.backend_launch, client, attach_timeout_s=config.attach_timeout_s, extra_env=extra_env,
        )

        sampler = None
        backend_exited = False
        expected = None if config.scenario is Scenario.SERVER else len(instances)
        progress = asyncio.create_task(_log_progress(sink, expected))
        try:
            monitor = ProcessTreeMonitor(process.pid) if process is not None else None
            sampler = start_sampler(provider, config.telemetry.interval_s, monitor)
            plan_path = out_dir / PLAN_FILE if config.scenario is Scenario.SERVER else None
            outcome = await run_scenario(config, instances, client, sink=sink, plan_path=plan_path)
            await progress
        finally:
            if not progress.done():
                progress.cancel()
            series = sampler.stop() if sampler is not None else TelemetrySeries(provider=provider.label)
            if process is not None:
                backend_exited = process.exited
                if backend_exited:
                    logger.error(f"backend exited during the run:\n{process.tail()}")
                await process.teardown()

    warnings.extend(outcome.warnings)
    if outcome.aborted:
        warnings.append(f"scenario aborted: {outcome.abort_reason}")

    scoring_error = None
    try:
        quality = await score_run(plugin, outcome.records, instances)
    except Exception as e:
        # keep the records and system metrics; the run still fails
        scoring_error = f"quality scoring failed: {e}"
        logger.error(f"❌ {scoring_error}")
        warnings.append(scoring_error)
        quality = []
    size_mb, size_warnings = model_size(config.model_path, config.model_size_glob)
    warnings.extend(size_warnings)

    metrics, metric_warnings = compute_system_metrics(
        outcome.records, outcome.wall_time_s, series, cold_start, size_mb,
        server=True,
        qos_ttft_s=config.qos_ttft_s,
        qos_e2e_s=config.qos_e2e_s,
        backend_exited=backend_exited,
        start_time=outcome.start_time,
    )
    warnings.extend(metric_warnings)

    metrics_doc = metrics.to_dict()
    if config.task.value == "summarization":
        metrics_doc["rouge_variant"] = ROUGE_VARIANT

    report = RunReport(
        run_id=run_id,
        config=config.to_dict(),
        environment=environment_fingerprint(series.provider),
        scenario=_scenario_summary(config, outcome),
        metrics=metrics_doc,
        quality=quality,
        warnings=warnings,
    )
    paths = emit(report, outcome.records, out_dir, outcome.start_time, series)

    for score in quality:
        logger.info(f"🎯 {score.metric_name}: {score.value:.4f} over {len(score.per_instance)} requests")
    return RunResult(report=report, paths=paths, scoring_error=scoring_error)
