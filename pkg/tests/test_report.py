import json
import random

import pandas as pd
import pytest

from localbench.config import RECORDS_FILE, REPORT_FILE, SUMMARY_FILE, TELEMETRY_FILE
from localbench.metrics import compute_system_metrics
from localbench.models import QualityScore, RequestRecord, RequestStatus, TelemetrySample
from localbench.report import (
    ComparisonError,
    RunReport,
    compare,
    delta_pct,
    emit,
    load_records,
    load_report,
    pareto_frontier,
    recompute,
    render_comparison,
    saturation_point,
)
from localbench.telemetry import TelemetrySeries, load_trace

ORIGIN = 5000.0


def make_records(n=12, tokens=20, tpot=0.013):
    records = []
    t = ORIGIN + 0.001
    for seq in range(n):
        dispatch = t + 0.0007 * seq
        first = dispatch + 0.1 + 0.01 * (seq % 3)
        completion = first + tokens * tpot
        records.append(RequestRecord(
            seq=seq, instance_id=f"q{seq}", arrival_time=dispatch - 0.0003, dispatch_time=dispatch,
            first_token_time=first, completion_time=completion, completion_tokens=tokens,
            sentence_count=2, output_text="One. Two.",
        ))
        t = completion
    records.append(RequestRecord(seq=n, instance_id="bad", arrival_time=t, dispatch_time=t, completion_time=t + 0.01,
                                 status=RequestStatus.HTTP_ERROR, http_status=503, error="capacity_exceeded"))
    return records


def make_series(wall, power=100.0):
    return TelemetrySeries(
        samples=[TelemetrySample(t=ORIGIN + i * 0.05, power_w=power + i % 3, gpu_mem_mb=9000.0 + i)
                 for i in range(int(wall / 0.05) + 2)],
        provider="replay",
    )


def make_report(run_id="BASE0001", records=None, quality=0.7, power=100.0, quantization="fp16",
                users=None, scenario="single", task="mmlu"):
    records = records if records is not None else make_records()
    wall = max(r.completion_time for r in records) - ORIGIN
    series = make_series(wall, power)
    metrics, warnings = compute_system_metrics(records, wall, series, None, 8000.0, server=True,
                                               qos_ttft_s=2.0, qos_e2e_s=6.0, start_time=ORIGIN)
    config = {"hf_model": "org/model", "backend": "vllm", "task": task, "quantization": quantization,
              "scenario": scenario, "qos_ttft_s": 2.0, "qos_e2e_s": 6.0}
    if users is not None:
        config["concurrent_users"] = users
    return RunReport(
        run_id=run_id,
        config=config,
        environment={},
        scenario={"name": scenario, "wall_time_s": wall},
        metrics=metrics.to_dict(),
        quality=[QualityScore.from_values("accuracy", [(r.instance_id, quality) for r in records])],
        warnings=warnings,
    )


def test_delta_pct_examples():
    assert delta_pct(0.714, 0.714) == 0.0
    assert delta_pct(100, 150) == 50.0
    assert delta_pct(0.714, 0.742) == pytest.approx(3.92, abs=5e-3)
    warnings = []
    assert delta_pct(0, 5, warnings, "tps") is None
    assert warnings and "tps" in warnings[0]
    assert delta_pct(None, 1.0) is None


def test_pareto_examples():
    assert pareto_frontier([(0.714, 47.6), (0.742, 125.5)]) == [(0.714, 47.6), (0.742, 125.5)]
    assert pareto_frontier([(0.5, 10), (0.6, 9)]) == [(0.6, 9)]
    assert pareto_frontier([(0.5, 10), (0.5, 10)]) == [(0.5, 10), (0.5, 10)]
    assert pareto_frontier([]) == []


def dominated_by_any(p, points):
    return any(q[0] >= p[0] and q[1] <= p[1] and (q[0] > p[0] or q[1] < p[1]) for q in points)


def test_pareto_matches_pairwise_oracle():
    rng = random.Random(99)
    for _ in range(100):
        points = [(round(rng.random(), 2), round(rng.random() * 100, 1)) for _ in range(100)]
        expected = [p for p in points if not dominated_by_any(p, points)]
        frontier = pareto_frontier(points)
        assert frontier == expected
        # the frontier is an antichain
        assert not any(dominated_by_any(p, frontier) for p in frontier)


def test_saturation_point():
    assert saturation_point([(16, 8.0), (4, 4.0), (8, 7.9), (32, 8.0)]) == 8
    assert saturation_point([(1, 1.0), (2, 2.0), (4, 4.0)]) is None
    assert saturation_point([(4, 4.0)]) is None


def test_emit_writes_three_files(tmp_path):
    records = make_records()
    report = make_report(records=records)
    paths = emit(report, records, tmp_path / "run", ORIGIN)

    assert {p.name for p in paths.values()} == {REPORT_FILE, RECORDS_FILE, SUMMARY_FILE}
    table = paths["records"].read_text(encoding="utf-8")
    assert table.startswith("# schema_version=1.0\n")
    frame = load_records(str(paths["records"]))
    assert len(frame) == len(records)
    assert list(frame["status"]).count("http_error") == 1
    assert pd.isna(frame.loc[frame["status"] == "http_error", "ttft_s"]).all()
    assert frame["dispatch_s"].min() == pytest.approx(0.001)

    document = json.loads(paths["report"].read_text(encoding="utf-8"))
    assert document["schema_version"] == "1.0"
    assert document["records_file"] == RECORDS_FILE
    summary = paths["summary"].read_text(encoding="utf-8")
    assert "schema_version=1.0" in summary
    assert "quality.accuracy" in summary
    assert "queue_s = dispatch_time - arrival_time" in summary


def test_report_round_trips(tmp_path):
    records = make_records()
    report = make_report(records=records)
    paths = emit(report, records, tmp_path, ORIGIN)
    loaded = load_report(str(paths["report"]))
    assert loaded.to_dict() == json.loads(json.dumps(report.to_dict()))


def test_recompute_reproduces_aggregates(tmp_path):
    records = make_records()
    paths = emit(make_report(records=records), records, tmp_path, ORIGIN)
    assert recompute(str(paths["report"])) == []


def test_recompute_detects_tampering(tmp_path):
    records = make_records()
    paths = emit(make_report(records=records), records, tmp_path, ORIGIN)
    document = json.loads(paths["report"].read_text(encoding="utf-8"))
    document["metrics"]["requests"]["throughput"]["tps"] *= 1.001
    document["metrics"]["energy"]["energy_j"] += 1.0
    paths["report"].write_text(json.dumps(document), encoding="utf-8")

    mismatches = recompute(str(paths["report"]))
    assert any(m.startswith("requests.throughput.tps") for m in mismatches)
    assert any(m.startswith("energy.energy_j") for m in mismatches)


def emit_with_series(tmp_path):
    records = make_records()
    wall = max(r.completion_time for r in records) - ORIGIN
    return emit(make_report(records=records), records, tmp_path, ORIGIN, make_series(wall))


def test_emit_writes_replayable_telemetry_series(tmp_path):
    paths = emit_with_series(tmp_path)
    assert paths["telemetry"].name == TELEMETRY_FILE
    assert load_report(str(paths["report"])).telemetry_file == TELEMETRY_FILE

    rows = load_trace(str(paths["telemetry"]))
    assert rows[0]["power_w"] == 100.0 and rows[1]["power_w"] == 101.0
    frame = pd.read_csv(paths["telemetry"])
    assert frame["t_s"].iloc[0] == pytest.approx(0.0)
    assert recompute(str(paths["report"])) == []


def test_recompute_rebuilds_resources_from_series(tmp_path):
    paths = emit_with_series(tmp_path)
    document = json.loads(paths["report"].read_text(encoding="utf-8"))
    document["metrics"]["resources"]["mem_peak_mb"] += 1.0
    paths["report"].write_text(json.dumps(document), encoding="utf-8")
    assert any(m.startswith("resources.mem_peak_mb") for m in recompute(str(paths["report"])))

    # consistent report, but the persisted power readings no longer back it
    paths = emit_with_series(tmp_path / "again")
    frame = pd.read_csv(paths["telemetry"])
    frame["power_w"] *= 2
    frame.to_csv(paths["telemetry"], index=False)
    mismatches = recompute(str(paths["report"]))
    assert any(m.startswith("resources.power_avg_w") for m in mismatches)
    assert any(m.startswith("energy.energy_j") for m in mismatches)


def test_recompute_with_zero_ok_records(tmp_path):
    records = [RequestRecord(seq=0, instance_id="x", arrival_time=ORIGIN, dispatch_time=ORIGIN,
                             completion_time=ORIGIN + 0.1, status=RequestStatus.STREAM_ERROR)]
    report = make_report(records=records)
    assert any("no successful requests" in w for w in report.warnings)
    paths = emit(report, records, tmp_path, ORIGIN)
    assert recompute(str(paths["report"])) == []


def test_compare_with_itself_has_zero_deltas():
    base = make_report()
    comparison = compare(base, [make_report(run_id="SAME0001")])
    deltas = comparison.cells[0].delta_pct
    assert deltas["tpot_mean_s"] == 0.0
    assert deltas["quality.accuracy"] == 0.0
    assert all(v in (0.0, None) for v in deltas.values())


def test_compare_builds_frontiers_and_table():
    base = make_report()
    slower_better = make_report(run_id="VAR00001", records=make_records(tpot=0.026), quality=0.75, quantization="int8")
    worse = make_report(run_id="VAR00002", records=make_records(tpot=0.030), quality=0.6, quantization="4bit")
    comparison = compare(base, [slower_better, worse])

    cell = comparison.cells[0]
    assert cell.delta_pct["quality.accuracy"] == pytest.approx(100 * 0.05 / 0.7)
    assert cell.delta_pct["tpot_mean_s"] == pytest.approx(100.0, rel=1e-6)
    assert comparison.frontiers["latency_quality"]["run_ids"] == ["BASE0001", "VAR00001"]
    assert comparison.frontiers["latency_quality"]["quality_direction"] == "max"
    assert comparison.frontiers["energy_quality"]["cost"] == "energy_per_token_j"

    table = render_comparison(comparison, [base, slower_better, worse])
    assert "VAR00002" in table
    assert "latency_quality frontier" in table


def test_compare_rejects_mismatched_runs():
    base = make_report()
    with pytest.raises(ComparisonError, match="task mismatch"):
        compare(base, [make_report(run_id="QA000001", task="qa")])
    other = make_report(run_id="OLD00001")
    other.schema_version = "0.9"
    with pytest.raises(ComparisonError, match="schema_version"):
        compare(base, [other])


def test_compare_reports_saturation_for_server_sweep():
    def sweep_point(run_id, users, rps):
        report = make_report(run_id=run_id, users=users, scenario="server")
        report.metrics["requests"]["throughput"]["rps"] = rps
        return report

    runs = [sweep_point("C4", 4, 4.0), sweep_point("C8", 8, 7.9), sweep_point("C16", 16, 8.0)]
    comparison = compare(runs[0], runs[1:])
    assert comparison.saturation_concurrency == 8
    assert "saturation point: 8" in render_comparison(comparison, runs)
