"""CSV and plain-text summaries of experiment results."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

from faasbroker.bench.harness import ExperimentResult

LATENCY_COLUMNS = ["repetition", "subscriber", "latencyMs"]
SUMMARY_KEYS = [
    "meanLatencyMs", "p50LatencyMs", "p95LatencyMs", "p99LatencyMs",
    "delivered", "expected", "dropped", "suppressed", "throttled", "lookups", "repetitions",
]


def percentile(values: list[float], q: float) -> Optional[float]:
    """Linear-interpolated percentile (the common "linear" method), q in [0, 100]."""
    if not values:
        return None
    ordered = sorted(values)
    pos = (len(ordered) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    return float(ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo))


def summarize(result: ExperimentResult) -> dict:
    lat = result.per_subscriber_latency_ms
    return {
        "meanLatencyMs": result.mean_latency_ms,
        "p50LatencyMs": percentile(lat, 50),
        "p95LatencyMs": percentile(lat, 95),
        "p99LatencyMs": percentile(lat, 99),
        "delivered": result.delivered_count,
        "expected": result.expected_count,
        "dropped": result.dropped_count,
        "suppressed": result.suppressed_count,
        "throttled": result.throttled_count,
        "lookups": result.store_lookup_count,
        "repetitions": len(result.runs),
    }


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.txt")


def export_report(result: ExperimentResult, path) -> tuple[Path, Path]:
    """Write per-subscriber latencies as CSV and a summary next to it."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LATENCY_COLUMNS)
        for rep, run in enumerate(result.runs, start=1):
            for i, latency in enumerate(run.latencies_ms):
                writer.writerow([rep, i, "" if latency is None else repr(latency)])
    summary = summarize(result)
    lines = [f"{k}: {'' if summary[k] is None else repr(summary[k])}" for k in SUMMARY_KEYS]
    spath = summary_path(path)
    spath.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path, spath


def _number(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_report(path) -> tuple[list[tuple], dict]:
    """Read back what ``export_report`` wrote: (latency rows, summary)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LATENCY_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        rows = [(int(r[0]), int(r[1]), _number(r[2])) for r in reader]
    summary = {}
    for line in summary_path(path).read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition(": ")
        summary[key] = _number(value.strip())
    return rows, summary
