import csv
import io
import json
import logging
import statistics

import pytest

from faasbroker.bench import cli
from faasbroker.bench.harness import (
    RELAXED_LIMITS,
    SWEEP_COLUMNS,
    VENDOR_LIMITS,
    ExperimentConfig,
    ExperimentResult,
    LimitsProfile,
    RunResult,
    check_profile,
    demand,
    group_sizes,
    run_experiment,
    sweep,
    sweep_csv,
)
from faasbroker.bench.report import export_report, load_report, percentile, summarize
from faasbroker.errors import ExceedsProfile


def config(**kw):
    base = dict(subscribers=8, pubs_per_second=5, publication_count=20, repetitions=1, seed=1)
    base.update(kw)
    return ExperimentConfig(**base)


def test_group_sizes_even():
    assert group_sizes(352, 4) == [88, 88, 88, 88]
    assert group_sizes(10, 4) == [3, 3, 2, 2]
    assert sum(group_sizes(7, 4)) == 7


def test_topic_8x5x20_delivers_160():
    result = run_experiment(config())
    assert result.delivered_count == result.expected_count == 160
    assert not result.incomplete
    assert all(lat > 0 for lat in result.per_subscriber_latency_ms)
    assert result.conserved


def test_latency_at_least_the_pacing_duration():
    cfg = config(subscribers=4, pubs_per_second=20, publication_count=20)
    result = run_experiment(cfg)
    floor_ms = (cfg.publication_count / cfg.pubs_per_second - 1 / cfg.pubs_per_second) * 1000
    assert all(lat >= floor_ms for lat in result.per_subscriber_latency_ms)


def test_function_scheme_matches_everyone():
    result = run_experiment(config(scheme="function", pubs_per_second=20))
    assert result.delivered_count == result.expected_count == 160


def test_content_scheme_matches_everyone():
    result = run_experiment(config(scheme="content", pubs_per_second=20))
    assert result.delivered_count == result.expected_count == 160


def test_tight_concurrency_throttles():
    limits = LimitsProfile(max_concurrent=8)
    cfg = config(subscribers=64, pubs_per_second=20, publication_count=10, limits=limits, force=True, timeout=5)
    result = run_experiment(cfg)
    assert result.throttled_count > 0
    assert result.delivered_count < result.expected_count
    assert result.conserved
    assert result.incomplete


def test_exceeds_profile_refuses_large_point():
    cfg = config(subscribers=352, pubs_per_second=40, publication_count=400)
    concurrent, per_minute = demand(cfg)
    assert concurrent == 354 and per_minute > VENDOR_LIMITS.max_per_minute
    with pytest.raises(ExceedsProfile):
        run_experiment(cfg)
    relaxed = config(subscribers=352, pubs_per_second=40, publication_count=400, limits=RELAXED_LIMITS)
    check_profile(relaxed)


def test_desk_defaults_fit_the_vendor_profile():
    for n in (8, 16, 32, 64):
        for rate in (5, 10, 20, 40):
            check_profile(config(subscribers=n, pubs_per_second=rate, publication_count=rate * 2))


def test_determinism_across_repetitions():
    result = run_experiment(config(subscribers=4, pubs_per_second=40, publication_count=20,
                                   repetitions=3, limits=RELAXED_LIMITS))
    counts = {(r.delivered, r.expected, r.dropped, r.suppressed) for r in result.runs}
    assert counts == {(80, 80, 0, 0)}
    assert result.expected_count == 240


def test_sweep_rows_and_conservation(caplog):
    template = config(repetitions=1)
    with caplog.at_level(logging.WARNING):
        rows = sweep(template, [8, 16, 32], [5, 10], duration=0.4)
    assert len(rows) == 6
    assert [(r["subscribers"], r["rate"]) for r in rows] == [(n, r) for n in (8, 16, 32) for r in (5, 10)]
    assert all(r["delivered"] == r["expected"] for r in rows)
    text = sweep_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == SWEEP_COLUMNS and len(parsed) == 6


def _fake_result(latency_runs):
    runs = []
    for lats in latency_runs:
        runs.append(RunResult(latencies_ms=lats, delivered=len(lats) * 2, expected=len(lats) * 2, received=0,
                              dropped=0, suppressed=0, throttled=0, lookups=1, publish_seconds=1.0))
    return ExperimentResult(None, runs)


def test_summary_mean_is_mean_of_run_means():
    result = _fake_result([[100.0, 200.0], [300.0, 500.0], [1000.0, 1000.0 / 3]])
    expected = statistics.fmean([150.0, 400.0, (1000.0 + 1000.0 / 3) / 2])
    assert summarize(result)["meanLatencyMs"] == pytest.approx(expected, rel=0, abs=1e-9)


def test_report_round_trip(tmp_path):
    result = _fake_result([[100.125, 0.1 + 0.2, None], [7.0, 1 / 3, 2.5]])
    csv_path, summary_file = export_report(result, tmp_path / "r.csv")
    rows, summary = load_report(csv_path)
    assert [r[2] for r in rows] == [100.125, 0.1 + 0.2, None, 7.0, 1 / 3, 2.5]
    assert summary == summarize(result)
    assert summary_file.name == "r.summary.txt"


def test_empty_result_writes_header_only(tmp_path):
    csv_path, _ = export_report(ExperimentResult(), tmp_path / "empty.csv")
    assert csv_path.read_text() == "repetition,subscriber,latencyMs\n"
    rows, summary = load_report(csv_path)
    assert rows == [] and summary["meanLatencyMs"] is None


def test_percentile_linear():
    assert percentile([1, 2, 3, 4], 50) == 2.5
    assert percentile([5], 99) == 5
    assert percentile([], 50) is None
    assert percentile(list(range(101)), 95) == 95


def test_limits_profile_json(tmp_path):
    path = tmp_path / "limits.json"
    path.write_text(json.dumps({"maxConcurrent": 8, "lookupsPerSecond": None}))
    profile = LimitsProfile.load(path)
    assert profile.max_concurrent == 8 and profile.lookups_per_second is None
    assert LimitsProfile.from_json(profile.to_json()) == profile
    with pytest.raises(ValueError):
        LimitsProfile.from_json({"maxConcurent": 8})


def test_cli_run_writes_report(tmp_path, capsys):
    out = tmp_path / "run.csv"
    code = cli.main(["run", "--subscribers", "4", "--rate", "20", "--pubs", "10", "--reps", "1",
                     "--out", str(out)])
    assert code == 0
    assert "delivered: 40" in capsys.readouterr().out
    rows, summary = load_report(out)
    assert len(rows) == 4 and summary["delivered"] == 40


def test_cli_refuses_large_point(capsys):
    code = cli.main(["run", "--subscribers", "352", "--rate", "40", "--pubs", "400"])
    assert code == 2
    assert "refused" in capsys.readouterr().err


def test_cli_sweep(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    code = cli.main(["sweep", "--scheme", "topic,function", "--subscribers", "4", "--rates", "10",
                     "--duration", "0.5", "--reps", "1", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["scheme"] for r in rows] == ["topic", "function"]
    assert all(r["delivered"] == r["expected"] == "20" for r in rows)
