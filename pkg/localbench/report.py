"""
Run reports: emission, reloading, recompute checks and cross-run comparison
"""

import json
import logging
import math
import platform
import socket
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil

from localbench import __version__
from localbench.config import (
    RECORDS_FILE,
    REPORT_FILE,
    SCHEMA_VERSION,
    SUMMARY_FILE,
    TELEMETRY_FILE,
)
from localbench.metrics import (
    Throughput,
    attribution_window,
    energy_stats_for,
    generation_window,
    per_request_latency,
    record_metrics,
    resource_stats,
)
from localbench.models import QualityScore, RequestRecord, RequestStatus, TokenCountMethod
from localbench.telemetry import TelemetryError, TelemetrySeries, read_series, write_series
from localbench.utils.clock import clock_info

logger = logging.getLogger(__name__)

RECORD_COLUMNS = [
    "seq", "instance_id", "arrival_s", "dispatch_s", "first_token_s", "completion_s",
    "n_tokens", "n_sentences", "status", "ttft_s", "tpot_s", "gl_s",
]
_FLOAT_COLUMNS = ["arrival_s", "dispatch_s", "first_token_s", "completion_s", "ttft_s", "tpot_s", "gl_s"]

FRONTIER_DIRECTIONS = {"quality": "max", "cost": "min"}
SATURATION_GAIN = 0.10
RECOMPUTE_REL_TOL = 1e-9
RECOMPUTE_ABS_TOL = 1e-12

# (headline name, path into the metrics document)
HEADLINE_METRICS: List[Tuple[str, Tuple[str, ...]]] = [
    ("ttft_mean_s", ("requests", "ttft_s", "mean")),
    ("tpot_mean_s", ("requests", "tpot_s", "mean")),
    ("gl_mean_s", ("requests", "gl_s", "mean")),
    ("tps", ("requests", "throughput", "tps")),
    ("sps", ("requests", "throughput", "sps")),
    ("rps", ("requests", "throughput", "rps")),
    ("energy_per_token_j", ("energy", "energy_per_token_j")),
    ("energy_per_sentence_j", ("energy", "energy_per_sentence_j")),
    ("energy_wh", ("energy", "energy_wh")),
    ("power_avg_w", ("resources", "power_avg_w")),
    ("mem_avg_mb", ("resources", "mem_avg_mb")),
    ("mem_peak_mb", ("resources", "mem_peak_mb")),
    ("util_avg_pct", ("resources", "util_avg_pct")),
    ("overhead_mb", ("overhead_mb",)),
    ("t_cold_s", ("cold_start", "t_cold_s")),
    ("e2e_p95_s", ("requests", "server", "e2e_s", "p95")),
    ("ttft_violation_rate", ("requests", "server", "ttft_violation_rate")),
    ("e2e_violation_rate", ("requests", "server", "e2e_violation_rate")),
]


class ReportError(Exception):
    """Report files could not be written or read"""


class ComparisonError(Exception):
    """Reports cannot be compared"""


def new_run_id() -> str:
    return str(uuid.uuid4())[:8].upper()


def environment_fingerprint(provider: str) -> Dict[str, Any]:
    """Host, software and clock details recorded with every run"""
    return {
        "hostname": socket.gethostname(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "localbench": __version__,
        "cpu_count": psutil.cpu_count(logical=True),
        "ram_total_mb": psutil.virtual_memory().total / 1e6,
        "telemetry_provider": provider,
        "clock": clock_info(),
    }


@dataclass
class RunReport:
    """Everything persisted about one benchmark run"""
    run_id: str
    config: Dict[str, Any]
    environment: Dict[str, Any]
    scenario: Dict[str, Any]
    metrics: Dict[str, Any]
    quality: List[QualityScore] = field(default_factory=list)
    records_file: str = RECORDS_FILE
    telemetry_file: Optional[str] = None
    warnings: List[str] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    @property
    def task(self) -> str:
        return self.config.get("task", "")

    @property
    def cold_start(self) -> Optional[Dict[str, Any]]:
        return self.metrics.get("cold_start")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return {
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "created_at": self.created_at,
            "config": self.config,
            "environment": self.environment,
            "scenario": self.scenario,
            "cold_start": self.cold_start,
            "metrics": self.metrics,
            "quality": [q.to_dict() for q in self.quality],
            "records_file": self.records_file,
            "telemetry_file": self.telemetry_file,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunReport":
        """Create from dictionary"""
        return cls(
            run_id=data["run_id"],
            config=data["config"],
            environment=data.get("environment", {}),
            scenario=data["scenario"],
            metrics=data["metrics"],
            quality=[QualityScore.from_dict(q) for q in data.get("quality", [])],
            records_file=data.get("records_file", RECORDS_FILE),
            telemetry_file=data.get("telemetry_file"),
            warnings=data.get("warnings", []),
            schema_version=data["schema_version"],
            created_at=data.get("created_at", ""),
        )


def records_frame(records: Sequence[RequestRecord], origin: float) -> pd.DataFrame:
    """Flat per-request table with scenario-relative timestamps"""

    rows = []
    for record in records:
        rel = record.shifted(origin)
        latency = per_request_latency(rel) if rel.ok else None
        rows.append({
            "seq": rel.seq,
            "instance_id": rel.instance_id,
            "arrival_s": rel.arrival_time,
            "dispatch_s": rel.dispatch_time,
            "first_token_s": rel.first_token_time,
            "completion_s": rel.completion_time,
            "n_tokens": rel.completion_tokens,
            "n_sentences": rel.sentence_count,
            "status": rel.status.value,
            "ttft_s": latency.ttft_s if latency else None,
            "tpot_s": latency.tpot_s if latency else None,
            "gl_s": latency.gl_s if latency else None,
        })
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def render_summary(report: RunReport) -> str:
    """Plain-text block: metric, value"""

    config = report.config
    lines = [
        f"localbench report  schema_version={report.schema_version}",
        f"run {report.run_id}  model={config.get('hf_model')}  quantization={config.get('quantization')}  "
        f"backend={config.get('backend')}",
        f"task={config.get('task')}  scenario={report.scenario.get('name')}  "
        f"wall_time={report.scenario.get('wall_time_s', 0.0):.3f} s",
    ]
    if report.scenario.get("aborted"):
        lines.append(f"ABORTED: {report.scenario.get('abort_reason')}")
    lines.append("-" * 60)
    lines.append(f"{'metric':<32}{'value':>16}")
    for score in report.quality:
        lines.append(f"{'quality.' + score.metric_name:<32}{_format(score.value):>16}")
    for name, value in headline(report).items():
        if not name.startswith("quality."):
            lines.append(f"{name:<32}{_format(value):>16}")

    requests = report.metrics.get("requests", {})
    lines.append("-" * 60)
    lines.append(f"requests: {requests.get('n_ok', 0)} ok of {requests.get('n_requests', 0)}")
    for status, count in sorted(requests.get("errors_by_status", {}).items()):
        lines.append(f"  {status}: {count}")
    server = requests.get("server")
    if server:
        for definition in server.get("definitions", {}).values():
            lines.append(f"  {definition}")
    if report.warnings:
        lines.append("warnings:")
        lines.extend(f"  - {w}" for w in report.warnings)
    return "\n".join(lines) + "\n"


def _format(value: Optional[float]) -> str:
    if value is None:
        return "absent"
    return f"{value:.6g}" if abs(value) >= 1e4 or (value != 0 and abs(value) < 1e-3) else f"{value:.4f}"


def emit(report: RunReport, records: Sequence[RequestRecord], out_dir: Path, origin: float,
         series: Optional[TelemetrySeries] = None) -> Dict[str, Path]:
    """Write report.json, records.csv, summary.txt and, with a series, telemetry.csv into out_dir"""

    out_dir = Path(out_dir)
    paths = {
        "report": out_dir / REPORT_FILE,
        "records": out_dir / RECORDS_FILE,
        "summary": out_dir / SUMMARY_FILE,
    }
    report.records_file = RECORDS_FILE
    frame = records_frame(records, origin)
    if series is not None:
        paths["telemetry"] = out_dir / TELEMETRY_FILE
        report.telemetry_file = TELEMETRY_FILE

    current = out_dir
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        current = paths["records"]
        with open(current, "w", encoding="utf-8", newline="") as f:
            f.write(f"# schema_version={report.schema_version}\n")
            frame.to_csv(f, index=False)
        if series is not None:
            current = paths["telemetry"]
            write_series(series.shifted(origin), current)
        current = paths["report"]
        current.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
        current = paths["summary"]
        current.write_text(render_summary(report), encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write {current}: {e}") from e

    logger.info(f"📄 report written to {out_dir} ({len(frame)} records)")
    return paths


def load_report(path: str) -> RunReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"cannot read report {path}: {e}") from e
    try:
        return RunReport.from_dict(data)
    except KeyError as e:
        raise ReportError(f"report {path} lacks field {e}") from e


def load_records(path: str) -> pd.DataFrame:
    """Read a record table written by emit"""

    try:
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
        if not header.startswith("# schema_version="):
            raise ReportError(f"{path} does not start with a schema_version line")
        return pd.read_csv(
            path,
            skiprows=1,
            float_precision="round_trip",
            dtype={"instance_id": str, "status": str},
            keep_default_na=False,
            na_values={column: [""] for column in _FLOAT_COLUMNS},
        )
    except (OSError, pd.errors.ParserError) as e:
        raise ReportError(f"cannot read records {path}: {e}") from e


def records_from_frame(frame: pd.DataFrame) -> List[RequestRecord]:
    """Rebuild records (relative timestamps) from the flat table"""

    def optional(value) -> Optional[float]:
        return None if pd.isna(value) else float(value)

    records = []
    for row in frame.to_dict(orient="records"):
        records.append(RequestRecord(
            seq=int(row["seq"]),
            instance_id=str(row["instance_id"]),
            arrival_time=float(row["arrival_s"]),
            dispatch_time=float(row["dispatch_s"]),
            first_token_time=optional(row["first_token_s"]),
            completion_time=optional(row["completion_s"]),
            completion_tokens=int(row["n_tokens"]),
            sentence_count=int(row["n_sentences"]),
            status=RequestStatus(row["status"]),
            token_count_method=TokenCountMethod.CHUNKS,
        ))
    return records


def _leaves(data: Any, prefix: str = "") -> Dict[str, Any]:
    if isinstance(data, dict):
        flat = {}
        for key, value in data.items():
            flat.update(_leaves(value, f"{prefix}.{key}" if prefix else str(key)))
        return flat
    return {prefix: data}


def _close(a: Any, b: Any) -> bool:
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
        return math.isclose(a, b, rel_tol=RECOMPUTE_REL_TOL, abs_tol=RECOMPUTE_ABS_TOL)
    return a == b


def _compare_block(name: str, reported: Dict[str, Any], recomputed: Dict[str, Any]) -> List[str]:
    flat = _leaves(reported)
    mismatches = []
    for key, value in _leaves(recomputed).items():
        if key not in flat:
            mismatches.append(f"{name}.{key}: missing from report")
        elif not _close(flat[key], value):
            mismatches.append(f"{name}.{key}: reported {flat[key]!r}, recomputed {value!r}")
    return mismatches


def _recompute_resources(report: RunReport, telemetry_path: Path, records: List[RequestRecord],
                         totals: Throughput) -> List[str]:
    """Resource and energy blocks rebuilt from the persisted telemetry series"""

    try:
        series = read_series(str(telemetry_path), provider=report.environment.get("telemetry_provider", "replay"))
    except TelemetryError as e:
        raise ReportError(str(e)) from e

    windowed, t_gen = generation_window(series, attribution_window(records))
    resources = resource_stats(windowed)
    energy = energy_stats_for(resources, windowed, t_gen, totals)
    return (_compare_block("resources", report.metrics.get("resources", {}), resources.to_dict())
            + _compare_block("energy", report.metrics.get("energy", {}), energy.to_dict()))


def _energy_consistency(report: RunReport, total_tokens: int) -> List[str]:
    """Without a telemetry file only the energy identities can be checked"""

    mismatches = []
    energy = report.metrics.get("energy", {})
    power = report.metrics.get("resources", {}).get("power_avg_w")
    if energy.get("energy_j") is not None and power is not None:
        expected_j = power * energy["t_gen_s"]
        if not _close(energy["energy_j"], expected_j):
            mismatches.append(f"energy.energy_j: reported {energy['energy_j']!r}, recomputed {expected_j!r}")
        if not _close(energy["energy_wh"] * 3600.0, energy["energy_j"]):
            mismatches.append("energy.energy_wh: not energy_j / 3600")
        if total_tokens and not _close(energy["energy_per_token_j"], energy["energy_j"] / total_tokens):
            mismatches.append("energy.energy_per_token_j: not energy_j / total tokens")
    return mismatches


def recompute(report_path: str) -> List[str]:
    """Rebuild every record-derived aggregate from the raw table; returns mismatches"""

    report = load_report(report_path)
    records_path = Path(report_path).parent / report.records_file
    records = records_from_frame(load_records(str(records_path)))

    config = report.config
    recomputed_stats = record_metrics(
        records,
        report.scenario["wall_time_s"],
        server=report.metrics.get("requests", {}).get("server") is not None,
        qos_ttft_s=config.get("qos_ttft_s", 0.0),
        qos_e2e_s=config.get("qos_e2e_s", 0.0),
    )
    recomputed = recomputed_stats.to_dict()
    mismatches = _compare_block("requests", report.metrics.get("requests", {}), recomputed)

    if report.telemetry_file:
        mismatches.extend(_recompute_resources(report, Path(report_path).parent / report.telemetry_file,
                                               records, recomputed_stats.throughput))
    else:
        mismatches.extend(_energy_consistency(report, recomputed["throughput"]["total_tokens"]))

    if mismatches:
        logger.warning(f"recompute found {len(mismatches)} mismatches in {report_path}")
    else:
        logger.info(f"✅ {report_path}: all aggregates recomputed within {RECOMPUTE_REL_TOL:g}")
    return mismatches


def delta_pct(base: Optional[float], variant: Optional[float],
              warnings: Optional[List[str]] = None, name: str = "") -> Optional[float]:
    """100 * (variant - base) / base; absent when base is 0 or either side is absent"""

    if base is None or variant is None:
        return None
    if base == 0:
        message = f"delta for {name or 'metric'} absent: base value is 0"
        logger.warning(message)
        if warnings is not None:
            warnings.append(message)
        return None
    return 100.0 * (variant - base) / base


def pareto_indices(points: Sequence[Tuple[float, float]]) -> List[int]:
    """Indices of (quality max, cost min) points no other point dominates; ties are kept"""

    if len(points) == 0:
        return []
    data = np.asarray(points, dtype=float)
    quality, cost = data[:, 0], data[:, 1]
    keep = []
    for i in range(len(data)):
        no_worse = (quality >= quality[i]) & (cost <= cost[i])
        better = (quality > quality[i]) | (cost < cost[i])
        if not np.any(no_worse & better):
            keep.append(i)
    return keep


def pareto_frontier(points: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Non-dominated subset, in input order"""
    return [tuple(points[i]) for i in pareto_indices(points)]


def saturation_point(points: Sequence[Tuple[int, float]], gain: float = SATURATION_GAIN) -> Optional[int]:
    """Concurrency beyond which raising concurrency improves request throughput by less than gain"""

    ordered = sorted(points)
    for (c_prev, t_prev), (_, t_next) in zip(ordered, ordered[1:]):
        if t_prev > 0 and (t_next - t_prev) / t_prev < gain:
            return c_prev
    return None


def _dig(data: Dict[str, Any], path: Tuple[str, ...]) -> Optional[float]:
    current: Any = data
    for key in path:
        if not isinstance(current, dict):
            return None
        current = current.get(key)
    return current if isinstance(current, (int, float)) and not isinstance(current, bool) else None


def headline(report: RunReport) -> Dict[str, Optional[float]]:
    """Flat metric name -> value used by summaries and comparisons"""
    values: Dict[str, Optional[float]] = {f"quality.{q.metric_name}": q.value for q in report.quality}
    for name, path in HEADLINE_METRICS:
        values[name] = _dig(report.metrics, path)
    return values


@dataclass
class ComparisonCell:
    """Percent deltas of one variant against the base run"""
    base_run_id: str
    variant_run_id: str
    delta_pct: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"base_run_id": self.base_run_id, "variant_run_id": self.variant_run_id,
                "delta_pct": dict(self.delta_pct)}


@dataclass
class Comparison:
    base_run_id: str
    cells: List[ComparisonCell]
    frontiers: Dict[str, Dict[str, Any]]
    saturation_concurrency: Optional[int] = None
    warnings: List[str] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "base_run_id": self.base_run_id,
            "cells": [c.to_dict() for c in self.cells],
            "frontiers": self.frontiers,
            "saturation_concurrency": self.saturation_concurrency,
            "warnings": list(self.warnings),
        }


def _frontier(reports: Sequence[RunReport], quality_name: str, cost_name: str) -> Dict[str, Any]:
    candidates = []
    for report in reports:
        values = headline(report)
        quality, cost = values.get(quality_name), values.get(cost_name)
        if quality is not None and cost is not None:
            candidates.append((report.run_id, quality, cost))
    keep = pareto_indices([(q, c) for _, q, c in candidates])
    return {
        "quality": quality_name,
        "quality_direction": FRONTIER_DIRECTIONS["quality"],
        "cost": cost_name,
        "cost_direction": FRONTIER_DIRECTIONS["cost"],
        "run_ids": [candidates[i][0] for i in keep],
    }


def compare(base: RunReport, variants: Sequence[RunReport]) -> Comparison:
    """Deltas of each variant against the explicit base, plus frontiers over all runs"""

    for variant in variants:
        if variant.schema_version != base.schema_version:
            raise ComparisonError(
                f"schema_version mismatch: {base.run_id} has {base.schema_version}, "
                f"{variant.run_id} has {variant.schema_version}"
            )
        if variant.task != base.task:
            raise ComparisonError(f"task mismatch: {base.run_id} is {base.task}, {variant.run_id} is {variant.task}")

    warnings: List[str] = []
    base_values = headline(base)
    cells = []
    for variant in variants:
        variant_values = headline(variant)
        deltas = {
            name: delta_pct(base_values[name], variant_values.get(name), warnings, name)
            for name in base_values
        }
        cells.append(ComparisonCell(base.run_id, variant.run_id, deltas))

    runs = [base, *variants]
    quality_name = f"quality.{base.quality[0].metric_name}" if base.quality else None
    frontiers = {}
    if quality_name:
        frontiers["latency_quality"] = _frontier(runs, quality_name, "tpot_mean_s")
        frontiers["energy_quality"] = _frontier(runs, quality_name, "energy_per_token_j")

    saturation = None
    levels = [r.config.get("concurrent_users") for r in runs]
    if len(runs) >= 2 and all(r.scenario.get("name") == "server" for r in runs) and len(set(levels)) == len(runs):
        points = [(level, headline(r)["rps"] or 0.0) for level, r in zip(levels, runs)]
        saturation = saturation_point(points)

    return Comparison(base.run_id, cells, frontiers, saturation, warnings)


def render_comparison(comparison: Comparison, reports: Sequence[RunReport]) -> str:
    """Table block: quality, TPOT and energy per token with deltas against the base"""

    by_id = {r.run_id: r for r in reports}
    base = by_id[comparison.base_run_id]
    quality_key = f"quality.{base.quality[0].metric_name}" if base.quality else None

    header = (f"{'run':<10}{'model':<28}{'quant':<8}{'Q':>9}{'TPOT (ms)':>11}{'E (J/tok)':>11}"
              f"{'dQ (%)':>9}{'dTPOT (%)':>11}{'dE (%)':>9}")
    lines = [f"comparison against {base.run_id}  task={base.task}  schema_version={comparison.schema_version}",
             header, "-" * len(header)]

    def row(report: RunReport, deltas: Dict[str, Optional[float]]) -> str:
        values = headline(report)
        quality = values.get(quality_key) if quality_key else None
        tpot = values.get("tpot_mean_s")
        tpot_ms = tpot * 1000 if tpot is not None else None
        cell = lambda v, w, fmt: f"{'-':>{w}}" if v is None else f"{v:>{w}{fmt}}"
        return (f"{report.run_id:<10}{str(report.config.get('hf_model', ''))[:27]:<28}"
                f"{str(report.config.get('quantization', ''))[:7]:<8}"
                f"{cell(quality, 9, '.3f')}{cell(tpot_ms, 11, '.3f')}{cell(values.get('energy_per_token_j'), 11, '.3f')}"
                f"{cell(deltas.get(quality_key) if quality_key else None, 9, '.3f')}"
                f"{cell(deltas.get('tpot_mean_s'), 11, '.3f')}{cell(deltas.get('energy_per_token_j'), 9, '.3f')}")

    zero = {name: 0.0 for name in headline(base)}
    lines.append(row(base, zero))
    for cell in comparison.cells:
        lines.append(row(by_id[cell.variant_run_id], cell.delta_pct))

    for name, frontier in comparison.frontiers.items():
        lines.append(f"{name} frontier ({frontier['quality']} {frontier['quality_direction']}, "
                     f"{frontier['cost']} {frontier['cost_direction']}): {', '.join(frontier['run_ids']) or 'none'}")
    if comparison.saturation_concurrency is not None:
        lines.append(f"saturation point: {comparison.saturation_concurrency} concurrent users")
    return "\n".join(lines) + "\n"


def write_comparison(comparison: Comparison, path: Path) -> Path:
    try:
        Path(path).write_text(json.dumps(comparison.to_dict(), indent=2), encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write {path}: {e}") from e
    return Path(path)

