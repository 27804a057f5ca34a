"""
Latency, throughput, resource, energy and server-scenario metrics
"""

import logging
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from localbench.models import ColdStartReport, RequestRecord
from localbench.telemetry import TelemetrySeries, window

logger = logging.getLogger(__name__)

Z_95 = 1.96
BYTES_PER_MB = 1_000_000
_OOM = re.compile(r"out of memory|outofmemory|\boom\b", re.IGNORECASE)

# Printed next to the server latency block
QUEUE_DEFINITION = "queue_s = dispatch_time - arrival_time (harness-side dispatch delay)"
WAIT_DEFINITION = "wait_s = first_token_time - dispatch_time (backend scheduling + prefill, seen as TTFT from dispatch)"
ENERGY_DEFINITION = "energy_j = mean power * T_gen over [first dispatch, last completion]; energy_j_integrated is the trapezoidal integral of the power series over the same window"


@dataclass
class AggregateStat:
    """Distribution summary; ci95_half_width is absent for n=1"""
    mean: float
    ci95_half_width: Optional[float]
    n: int
    p50: float
    p95: float
    min: float
    max: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AggregateStat":
        return cls(**data)


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return float(sorted_values[rank - 1])


def aggregate(values: Sequence[float]) -> Optional[AggregateStat]:
    """Mean, 95% CI half width and nearest-rank percentiles"""

    if len(values) == 0:
        return None
    data = np.asarray(values, dtype=float)
    ordered = np.sort(data)
    n = len(data)
    ci = float(Z_95 * data.std(ddof=1) / math.sqrt(n)) if n >= 2 else None
    return AggregateStat(
        mean=float(data.mean()),
        ci95_half_width=ci,
        n=n,
        p50=nearest_rank(ordered, 50),
        p95=nearest_rank(ordered, 95),
        min=float(ordered[0]),
        max=float(ordered[-1]),
    )


@dataclass
class RequestLatency:
    ttft_s: float
    tpot_s: float
    gl_s: float

    @property
    def t_gen_s(self) -> float:
        return self.gl_s


def per_request_latency(record: RequestRecord) -> RequestLatency:
    """TTFT from dispatch, TPOT = T_gen / N_t and GL = T_gen"""

    if not record.ok:
        raise ValueError(f"request {record.seq} is {record.status.value}; latency is undefined")
    t_gen = record.completion_time - record.first_token_time
    return RequestLatency(
        ttft_s=record.first_token_time - record.dispatch_time,
        tpot_s=t_gen / record.completion_tokens,
        gl_s=t_gen,
    )


@dataclass
class Throughput:
    tps: float
    sps: float
    rps: float
    total_tokens: int
    total_sentences: int
    wall_time_s: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def throughput(records: Sequence[RequestRecord], wall_time_s: float) -> Throughput:
    """Tokens, sentences and completed requests per second of wall time (ok records)"""

    ok = [r for r in records if r.ok]
    tokens = sum(r.completion_tokens for r in ok)
    sentences = sum(r.sentence_count for r in ok)
    if wall_time_s <= 0:
        return Throughput(0.0, 0.0, 0.0, tokens, sentences, wall_time_s)
    return Throughput(
        tps=tokens / wall_time_s,
        sps=sentences / wall_time_s,
        rps=len(ok) / wall_time_s,
        total_tokens=tokens,
        total_sentences=sentences,
        wall_time_s=wall_time_s,
    )


@dataclass
class ResourceStats:
    mem_avg_mb: Optional[float] = None
    mem_peak_mb: Optional[float] = None
    util_avg_pct: Optional[float] = None
    util_peak_pct: Optional[float] = None
    power_avg_w: Optional[float] = None
    power_peak_w: Optional[float] = None
    cpu_avg_pct: Optional[float] = None
    cpu_peak_pct: Optional[float] = None
    ram_avg_mb: Optional[float] = None
    ram_peak_mb: Optional[float] = None
    n_samples: int = 0

    @property
    def empty(self) -> bool:
        return self.n_samples == 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_RESOURCE_FIELDS = (
    ("gpu_mem_mb", "mem"),
    ("gpu_util_pct", "util"),
    ("power_w", "power"),
    ("cpu_pct", "cpu"),
    ("ram_mb", "ram"),
)


def resource_stats(series: TelemetrySeries) -> ResourceStats:
    """Mean and max over valid samples, per field; absent when a field has none"""

    stats = ResourceStats(n_samples=len(series.samples))
    for sample_field, prefix in _RESOURCE_FIELDS:
        values = series.values(sample_field)
        if not values:
            continue
        unit = sample_field.rsplit("_", 1)[1]
        setattr(stats, f"{prefix}_avg_{unit}", float(np.mean(values)))
        setattr(stats, f"{prefix}_peak_{unit}", float(np.max(values)))
    return stats


@dataclass
class EnergyStats:
    energy_wh: Optional[float] = None
    energy_j: Optional[float] = None
    energy_per_token_j: Optional[float] = None
    energy_per_sentence_j: Optional[float] = None
    t_gen_s: float = 0.0
    energy_j_integrated: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def energy(power_avg_w: float, t_gen_s: float, total_tokens: int, total_sentences: int) -> EnergyStats:
    """E_J = mean power * T_gen; per-token and per-sentence absent for zero counts"""

    energy_j = power_avg_w * t_gen_s
    return EnergyStats(
        energy_wh=power_avg_w * t_gen_s / 3600.0,
        energy_j=energy_j,
        energy_per_token_j=energy_j / total_tokens if total_tokens else None,
        energy_per_sentence_j=energy_j / total_sentences if total_sentences else None,
        t_gen_s=t_gen_s,
    )


def energy_integrated(series: TelemetrySeries) -> Optional[float]:
    """Trapezoidal integral of power over the series, in joules"""
    points = [(s.t, s.power_w) for s in series.samples if s.valid("power_w")]
    if len(points) < 2:
        return None
    t, p = zip(*points)
    return float(np.trapezoid(p, t))


def overhead(mem_avg_mb: float, model_size_mb: float) -> float:
    """Runtime GPU memory beyond the weights, clamped at zero"""
    return max(mem_avg_mb - model_size_mb, 0.0)


def model_size(path: Optional[str], pattern: str = "*") -> Tuple[Optional[float], List[str]]:
    """Total size in MB (10^6 bytes) of files under path matching pattern"""

    if not path:
        return None, ["model_size absent: no local model_path configured"]
    root = Path(path)
    if not root.exists():
        return None, [f"model_size absent: {path} does not exist"]

    files = [root] if root.is_file() else [p for p in root.rglob(pattern) if p.is_file()]
    size_mb = sum(p.stat().st_size for p in files) / BYTES_PER_MB
    warnings = []
    if not files:
        warnings.append(f"model_size is 0: no files matching '{pattern}' under {path}")
    return size_mb, warnings


@dataclass
class ServerLatency:
    queue_s: Optional[AggregateStat]
    wait_s: Optional[AggregateStat]
    e2e_s: Optional[AggregateStat]
    ttft_from_arrival_s: Optional[AggregateStat]
    ttft_violation_rate: float
    e2e_violation_rate: float
    qos_ttft_s: float
    qos_e2e_s: float

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["definitions"] = {"queue_s": QUEUE_DEFINITION, "wait_s": WAIT_DEFINITION}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ServerLatency":
        stat = lambda v: AggregateStat.from_dict(v) if v else None
        return cls(
            queue_s=stat(data.get("queue_s")),
            wait_s=stat(data.get("wait_s")),
            e2e_s=stat(data.get("e2e_s")),
            ttft_from_arrival_s=stat(data.get("ttft_from_arrival_s")),
            ttft_violation_rate=data["ttft_violation_rate"],
            e2e_violation_rate=data["e2e_violation_rate"],
            qos_ttft_s=data["qos_ttft_s"],
            qos_e2e_s=data["qos_e2e_s"],
        )


def server_latency(records: Sequence[RequestRecord], qos_ttft_s: float, qos_e2e_s: float) -> ServerLatency:
    """Queue/wait/E2E decomposition and QoS violation rates over ok records"""

    ok = [r for r in records if r.ok]
    queue = [r.dispatch_time - r.arrival_time for r in ok]
    wait = [r.first_token_time - r.dispatch_time for r in ok]
    e2e = [r.completion_time - r.arrival_time for r in ok]
    ttft_arrival = [r.first_token_time - r.arrival_time for r in ok]
    n = len(ok)
    return ServerLatency(
        queue_s=aggregate(queue),
        wait_s=aggregate(wait),
        e2e_s=aggregate(e2e),
        ttft_from_arrival_s=aggregate(ttft_arrival),
        ttft_violation_rate=sum(1 for v in ttft_arrival if v > qos_ttft_s) / n if n else 0.0,
        e2e_violation_rate=sum(1 for v in e2e if v > qos_e2e_s) / n if n else 0.0,
        qos_ttft_s=qos_ttft_s,
        qos_e2e_s=qos_e2e_s,
    )


@dataclass
class Resilience:
    oom_errors: int = 0
    backend_exited: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def resilience(records: Sequence[RequestRecord], backend_exited: bool = False) -> Resilience:
    """Out-of-memory signalled failures and whether the backend died mid-run"""
    oom = sum(1 for r in records if not r.ok and _OOM.search(r.error))
    return Resilience(oom_errors=oom, backend_exited=backend_exited)


@dataclass
class RecordMetrics:
    """Everything derivable from the record table and the scenario wall time"""
    n_requests: int
    n_ok: int
    ttft_s: Optional[AggregateStat]
    tpot_s: Optional[AggregateStat]
    gl_s: Optional[AggregateStat]
    request_tps: Optional[AggregateStat]
    throughput: Throughput
    errors_by_status: Dict[str, int]
    server: Optional[ServerLatency] = None

    def to_dict(self) -> Dict[str, Any]:
        stat = lambda s: s.to_dict() if s else None
        return {
            "n_requests": self.n_requests,
            "n_ok": self.n_ok,
            "ttft_s": stat(self.ttft_s),
            "tpot_s": stat(self.tpot_s),
            "gl_s": stat(self.gl_s),
            "request_tps": stat(self.request_tps),
            "throughput": self.throughput.to_dict(),
            "errors_by_status": dict(self.errors_by_status),
            "server": self.server.to_dict() if self.server else None,
        }


def record_metrics(records: Sequence[RequestRecord], wall_time_s: float, server: bool = False,
                   qos_ttft_s: float = 0.0, qos_e2e_s: float = 0.0) -> RecordMetrics:
    ok = [r for r in records if r.ok]
    latencies = [per_request_latency(r) for r in ok]
    per_request_tps = [r.completion_tokens / lat.t_gen_s for r, lat in zip(ok, latencies) if lat.t_gen_s > 0]
    errors: Dict[str, int] = {}
    for record in records:
        if not record.ok:
            errors[record.status.value] = errors.get(record.status.value, 0) + 1
    return RecordMetrics(
        n_requests=len(records),
        n_ok=len(ok),
        ttft_s=aggregate([lat.ttft_s for lat in latencies]),
        tpot_s=aggregate([lat.tpot_s for lat in latencies]),
        gl_s=aggregate([lat.gl_s for lat in latencies]),
        request_tps=aggregate(per_request_tps),
        throughput=throughput(records, wall_time_s),
        errors_by_status=errors,
        server=server_latency(records, qos_ttft_s, qos_e2e_s) if server else None,
    )


@dataclass
class SystemMetrics:
    """Every system metric of one run"""
    requests: RecordMetrics
    resources: ResourceStats
    energy: EnergyStats
    cold_start: Optional[ColdStartReport]
    model_size_mb: Optional[float]
    overhead_mb: Optional[float]
    overhead_includes_weights: bool
    resilience: Resilience
    token_count_methods: Dict[str, int]
    energy_window_s: Tuple[float, float] = (0.0, 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "requests": self.requests.to_dict(),
            "resources": self.resources.to_dict(),
            "energy": self.energy.to_dict(),
            "energy_definition": ENERGY_DEFINITION,
            "cold_start": self.cold_start.to_dict() if self.cold_start else None,
            "model_size_mb": self.model_size_mb,
            "overhead_mb": self.overhead_mb,
            "overhead_includes_weights": self.overhead_includes_weights,
            "resilience": self.resilience.to_dict(),
            "token_count_methods": dict(self.token_count_methods),
            "energy_window_s": list(self.energy_window_s),
        }


def attribution_window(records: Sequence[RequestRecord]) -> Optional[Tuple[float, float]]:
    """[first dispatch, last completion] over ok records"""
    ok = [r for r in records if r.ok]
    if not ok:
        return None
    return min(r.dispatch_time for r in ok), max(r.completion_time for r in ok)


def generation_window(series: TelemetrySeries,
                      span: Optional[Tuple[float, float]]) -> Tuple[TelemetrySeries, float]:
    """Samples inside the attribution window and its length T_gen"""
    if span is None:
        return TelemetrySeries(interval_s=series.interval_s, provider=series.provider), 0.0
    return window(series, *span), span[1] - span[0]


def energy_stats_for(resources: ResourceStats, windowed: TelemetrySeries, t_gen: float,
                     totals: Throughput) -> EnergyStats:
    """Energy block for a window; empty without power readings"""
    if resources.power_avg_w is None:
        return EnergyStats(t_gen_s=t_gen)
    stats = energy(resources.power_avg_w, t_gen, totals.total_tokens, totals.total_sentences)
    stats.energy_j_integrated = energy_integrated(windowed)
    return stats


def compute_system_metrics(records: Sequence[RequestRecord], wall_time_s: float, series: TelemetrySeries,
                           cold_start: Optional[ColdStartReport], model_size_mb: Optional[float], *,
                           server: bool = False, qos_ttft_s: float = 0.0, qos_e2e_s: float = 0.0,
                           backend_exited: bool = False, start_time: float = 0.0) -> Tuple[SystemMetrics, List[str]]:
    """Collect all metrics; returns them with the warnings raised on the way"""

    warnings: List[str] = []
    # the same scenario-relative values are written to the record and telemetry tables
    relative_records = [r.shifted(start_time) for r in records]
    series = series.shifted(start_time)
    requests = record_metrics(relative_records, wall_time_s, server, qos_ttft_s, qos_e2e_s)
    if requests.n_ok == 0:
        warnings.append("no successful requests: latency, throughput and energy aggregates are empty")

    span = attribution_window(relative_records)
    windowed, t_gen = generation_window(series, span)
    resources = resource_stats(windowed)
    if resources.empty and span is not None:
        warnings.append("no telemetry samples inside the generation window")

    energy_stats = energy_stats_for(resources, windowed, t_gen, requests.throughput)
    if energy_stats.energy_j is None and span is not None:
        warnings.append(f"energy absent: provider '{series.provider}' reported no power readings")

    overhead_mb = None
    includes_weights = False
    if resources.mem_avg_mb is not None:
        if model_size_mb is None:
            overhead_mb = resources.mem_avg_mb
            includes_weights = True
            warnings.append("overhead_mb includes model weights: model size unknown")
        else:
            overhead_mb = overhead(resources.mem_avg_mb, model_size_mb)

    methods: Dict[str, int] = {}
    for record in records:
        if record.ok:
            methods[record.token_count_method.value] = methods.get(record.token_count_method.value, 0) + 1

    for message in warnings:
        logger.warning(f"⚠️ {message}")

    relative = span if span else (0.0, 0.0)
    return SystemMetrics(
        requests=requests,
        resources=resources,
        energy=energy_stats,
        cold_start=cold_start,
        model_size_mb=model_size_mb,
        overhead_mb=overhead_mb,
        overhead_includes_weights=includes_weights,
        resilience=resilience(records, backend_exited),
        token_count_methods=methods,
        energy_window_s=relative,
    ), warnings
