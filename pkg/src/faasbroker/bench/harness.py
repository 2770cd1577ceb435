"""Latency experiment: one paced publisher, N subscribers split into worker groups.

Every subscriber is subscribed to every publication, so a run expects
``subscribers * publication_count`` frames. A subscriber's latency is the
time from the first publish until its last expected frame arrives; the
reported figure is the arithmetic mean over subscribers, then over
repetitions.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import queue
import statistics
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from faasbroker.broker import FINAL_STAGES, Broker, CandidateMode, PipelineConfig
from faasbroker.errors import ConservationError, ExceedsProfile
from faasbroker.gateway import DeliveryGateway
from faasbroker.runtime import FaasRuntime, RuntimeLimits, Status
from faasbroker.store import DocumentStore, LookupBudget

log = logging.getLogger(__name__)

POPULATION_SOURCE = (
    'let populations = {"new zealand": 4693000, "germany": 8267000}; '
    "let places = find_keys(publication, populations); "
    "lookup(populations, places[0], 0) > 4000000"
)
EVENT_SENTENCE = "DEBS2018 will be held at the University of Waikato in New Zealand."
BENCH_TOPIC = "bench"
BENCH_FUNCTION_TYPE = "population"

# invocations a publication needs before its per-subscriber fan-out
_LEAD_STAGES = {"topic": 2, "content": 2, "function": 1}


class Scheme(str, enum.Enum):
    TOPIC = "topic"
    CONTENT = "content"
    FUNCTION = "function"


@dataclass
class LimitsProfile:
    max_concurrent: int = 1200
    max_per_minute: int = 9000
    lookups_per_second: Optional[float] = 1000
    cache_ttl_seconds: float = 10.0
    eviction_jitter: float = 0.0

    _JSON_KEYS = {
        "maxConcurrent": "max_concurrent",
        "maxPerMinute": "max_per_minute",
        "lookupsPerSecond": "lookups_per_second",
        "cacheTtlSeconds": "cache_ttl_seconds",
        "evictionJitter": "eviction_jitter",
    }

    @classmethod
    def from_json(cls, raw: dict) -> "LimitsProfile":
        unknown = set(raw) - set(cls._JSON_KEYS)
        if unknown:
            raise ValueError(f"unknown limits profile keys: {sorted(unknown)}")
        return cls(**{cls._JSON_KEYS[k]: v for k, v in raw.items()})

    @classmethod
    def load(cls, path) -> "LimitsProfile":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return {k: getattr(self, attr) for k, attr in self._JSON_KEYS.items()}


# hosted-platform defaults; the relaxed profile lifts every ceiling for desk-scale load runs
VENDOR_LIMITS = LimitsProfile()
RELAXED_LIMITS = LimitsProfile(max_concurrent=100_000, max_per_minute=10**9, lookups_per_second=None)


@dataclass
class ExperimentConfig:
    scheme: Scheme = Scheme.TOPIC
    subscribers: int = 8
    pubs_per_second: float = 5
    publication_count: int = 20
    payload_bytes: int = 1024
    repetitions: int = 3
    worker_groups: int = 4
    limits: LimitsProfile = field(default_factory=LimitsProfile)
    candidate_mode: CandidateMode = CandidateMode.FIRST_KEY
    timeout: Optional[float] = None
    force: bool = False
    seed: Optional[int] = None

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        self.candidate_mode = CandidateMode(self.candidate_mode)
        if self.subscribers < 1 or self.publication_count < 1 or self.pubs_per_second <= 0:
            raise ValueError("subscribers, publication_count and pubs_per_second must be positive")
        if self.repetitions < 1 or self.worker_groups < 1:
            raise ValueError("repetitions and worker_groups must be positive")

    @property
    def expected_per_run(self) -> int:
        return self.subscribers * self.publication_count

    @property
    def deadline(self) -> float:
        if self.timeout is not None:
            return self.timeout
        return self.publication_count / self.pubs_per_second + 30.0


def group_sizes(subscribers: int, groups: int) -> list[int]:
    """Split subscribers across groups as evenly as possible."""
    base, extra = divmod(subscribers, groups)
    return [base + (1 if i < extra else 0) for i in range(groups)]


def demand(config: ExperimentConfig) -> tuple[int, int]:
    """Worst-case (concurrent, per-minute) invocation demand of one run.

    A single publication's fan-out can hold every subscriber branch plus the
    lead stages in flight at once; the per-minute figure counts the
    publications that fit in one minute plus the setup calls.
    """
    lead = _LEAD_STAGES[config.scheme.value]
    per_pub = lead + config.subscribers
    pubs_in_window = min(config.publication_count, math.ceil(config.pubs_per_second * 60))
    setup = 2 * config.subscribers
    return config.subscribers + lead, pubs_in_window * per_pub + setup


def check_profile(config: ExperimentConfig) -> None:
    concurrent, per_minute = demand(config)
    limits = config.limits
    if concurrent > limits.max_concurrent or per_minute > limits.max_per_minute:
        raise ExceedsProfile(
            f"{config.subscribers} subscribers at {config.pubs_per_second}/s need up to "
            f"{concurrent} concurrent and {per_minute} per-minute invocations; profile allows "
            f"{limits.max_concurrent} and {limits.max_per_minute} (relax the limits or force)"
        )


@dataclass
class RunResult:
    latencies_ms: list  # one entry per subscriber, None when incomplete
    delivered: int
    expected: int
    received: int
    dropped: int
    suppressed: int
    throttled: int
    lookups: int
    publish_seconds: float

    @property
    def complete_latencies(self) -> list[float]:
        return [x for x in self.latencies_ms if x is not None]

    @property
    def mean_latency_ms(self) -> Optional[float]:
        done = self.complete_latencies
        return statistics.fmean(done) if done else None

    @property
    def conserved(self) -> bool:
        return self.delivered + self.dropped + self.suppressed == self.expected


@dataclass
class ExperimentResult:
    config: Optional[ExperimentConfig] = None
    runs: list = field(default_factory=list)

    @property
    def per_subscriber_latency_ms(self) -> list[float]:
        return [x for r in self.runs for x in r.complete_latencies]

    @property
    def mean_latency_ms(self) -> Optional[float]:
        means = [r.mean_latency_ms for r in self.runs if r.mean_latency_ms is not None]
        return statistics.fmean(means) if means else None

    def _total(self, name: str) -> int:
        return sum(getattr(r, name) for r in self.runs)

    delivered_count = property(lambda self: self._total("delivered"))
    expected_count = property(lambda self: self._total("expected"))
    throttled_count = property(lambda self: self._total("throttled"))
    store_lookup_count = property(lambda self: self._total("lookups"))
    dropped_count = property(lambda self: self._total("dropped"))
    suppressed_count = property(lambda self: self._total("suppressed"))

    @property
    def incomplete(self) -> bool:
        return any(x is None for r in self.runs for x in r.latencies_ms)

    @property
    def conserved(self) -> bool:
        return all(r.conserved for r in self.runs)


class _WorkerGroup(threading.Thread):
    """Consumes frames for a slice of subscribers from one shared queue."""

    def __init__(self, index: int, expected_each: int):
        super().__init__(name=f"bench-group-{index}", daemon=True)
        self.sink: queue.Queue = queue.Queue()
        self.expected_each = expected_each
        self.counts: dict[str, int] = {}
        self.finished_at: dict[str, float] = {}
        self.start_time = 0.0
        self.members: list[str] = []
        self._halt = threading.Event()
        self.bad_frames = 0

    def add(self, subscriber: str) -> None:
        self.members.append(subscriber)
        self.counts[subscriber] = 0

    def run(self) -> None:
        while not self._halt.is_set():
            try:
                sid, line = self.sink.get(timeout=0.05)
            except queue.Empty:
                continue
            frame = json.loads(line)
            if frame["subscriberId"] != sid:
                self.bad_frames += 1
                continue
            self.counts[sid] += 1
            if self.counts[sid] == self.expected_each:
                self.finished_at[sid] = time.monotonic() - self.start_time

    def stop(self) -> None:
        self._halt.set()


def _payload(config: ExperimentConfig, i: int) -> str:
    head = EVENT_SENTENCE if config.scheme is Scheme.FUNCTION else f"publication {i}:"
    filler = config.payload_bytes - len(head.encode("utf-8")) - 1
    return head if filler <= 0 else head + " " + "x" * filler


def _subscribe(broker: Broker, config: ExperimentConfig, sid: str) -> None:
    if config.scheme is Scheme.TOPIC:
        broker.subscribe_topics(sid, [BENCH_TOPIC])
    elif config.scheme is Scheme.CONTENT:
        broker.subscribe_content(sid, [
            {"key": "key_1", "op": "=", "value": 1},
            {"key": "key_2", "op": ">=", "value": 10},
        ])
    else:
        broker.subscribe_function(sid, BENCH_FUNCTION_TYPE, POPULATION_SOURCE)


def _publish(broker: Broker, config: ExperimentConfig, i: int):
    data = _payload(config, i)
    if config.scheme is Scheme.TOPIC:
        return broker.publish_topic(data, [BENCH_TOPIC])
    if config.scheme is Scheme.CONTENT:
        return broker.publish_content(data, [("key_1", 1), ("key_2", 10 + i % 7)])
    return broker.publish_function(data, BENCH_FUNCTION_TYPE)


def _suppressed(receipts, subscribers: int) -> int:
    """Frames lost to throttled or failed branches, given that everyone matches."""
    lost = 0
    for receipt in receipts:
        for stage, handle in receipt.handles():
            if handle.status in (Status.THROTTLED, Status.TIMEOUT, Status.ERROR):
                lost += 1 if stage in FINAL_STAGES else subscribers
    return lost


def build_broker(config: ExperimentConfig) -> Broker:
    limits = config.limits
    runtime = FaasRuntime(
        RuntimeLimits(max_concurrent=limits.max_concurrent, max_per_minute=limits.max_per_minute,
                      eviction_jitter=limits.eviction_jitter),
        seed=config.seed, keep_log=False,
    )
    store = DocumentStore(LookupBudget(capacity=limits.lookups_per_second))
    pipeline = PipelineConfig(cache_ttl=limits.cache_ttl_seconds, content_candidate_mode=config.candidate_mode)
    return Broker(runtime=runtime, store=store, gateway=DeliveryGateway(), config=pipeline)


def run_once(config: ExperimentConfig) -> RunResult:
    broker = build_broker(config)
    try:
        return _run_once(broker, config)
    finally:
        broker.close()


def _run_once(broker: Broker, config: ExperimentConfig) -> RunResult:
    groups = [_WorkerGroup(i, config.publication_count) for i in range(config.worker_groups)]
    connections = []
    for group, size in zip(groups, group_sizes(config.subscribers, config.worker_groups)):
        for _ in range(size):
            sid = broker.register_client()
            _subscribe(broker, config, sid)
            connections.append(broker.gateway.connect(sid, sink=group.sink))
            group.add(sid)

    start = time.monotonic()
    for g in groups:
        g.start_time = start
        g.start()
    deadline = start + config.deadline
    receipts = []
    interval = 1.0 / config.pubs_per_second
    for i in range(config.publication_count):
        delay = start + i * interval - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        receipts.append(_publish(broker, config, i))
    publish_seconds = time.monotonic() - start

    # once every branch has settled, all frames have been handed to the gateway
    for r in receipts:
        r.wait(max(0.0, deadline - time.monotonic()))
    delivered = broker.gateway.stats.delivered
    while time.monotonic() < deadline and sum(sum(g.counts.values()) for g in groups) < delivered:
        time.sleep(0.01)
    for g in groups:
        g.stop()
        g.join()
    for conn in connections:
        broker.gateway.disconnect(conn)

    latencies = []
    for g in groups:
        for sid in g.members:
            t = g.finished_at.get(sid)
            latencies.append(None if t is None else t * 1000.0)
    return RunResult(
        latencies_ms=latencies,
        delivered=delivered,
        expected=config.expected_per_run,
        received=sum(sum(g.counts.values()) for g in groups),
        dropped=broker.gateway.stats.dropped_total,
        suppressed=_suppressed(receipts, config.subscribers),
        throttled=broker.runtime.stats.throttled,
        lookups=broker.stats.store_lookups,
        publish_seconds=publish_seconds,
    )


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    if not config.force:
        check_profile(config)
    result = ExperimentResult(config)
    for rep in range(config.repetitions):
        run = run_once(config)
        log.info("%s rep %d: delivered %d/%d, throttled %d, mean %.1f ms", config.scheme.value, rep + 1,
                 run.delivered, run.expected, run.throttled, run.mean_latency_ms or float("nan"))
        result.runs.append(run)
    return result


SWEEP_COLUMNS = ["scheme", "subscribers", "rate", "meanLatencyMs", "delivered", "expected", "throttled", "lookups"]


def sweep(template: ExperimentConfig, subscriber_steps: Sequence[int], rate_steps: Sequence[float],
          duration: Optional[float] = None, check_conservation: bool = True) -> list[dict]:
    """Run every (subscribers, rate) cell and return one row per cell.

    With ``duration`` set, each cell publishes ``rate * duration``
    publications; otherwise the template's count is used. Latency is
    expected to grow with the publication rate, but that is only logged.
    """
    rows = []
    for n in subscriber_steps:
        previous = None
        for rate in rate_steps:
            pubs = max(1, round(rate * duration)) if duration else template.publication_count
            cfg = ExperimentConfig(**{f.name: getattr(template, f.name) for f in fields(ExperimentConfig)})
            cfg.subscribers, cfg.pubs_per_second, cfg.publication_count = n, rate, pubs
            result = run_experiment(cfg)
            if check_conservation:
                for run in result.runs:
                    if not run.conserved:
                        raise ConservationError(
                            f"{cfg.scheme.value} {n}x{rate}: delivered {run.delivered} + dropped {run.dropped}"
                            f" + suppressed {run.suppressed} != expected {run.expected}")
            mean = result.mean_latency_ms
            if previous is not None and mean is not None and mean < previous:
                log.warning("%s, %d subscribers: mean latency fell from %.1f to %.1f ms as rate rose to %s",
                            cfg.scheme.value, n, previous, mean, rate)
            previous = mean if mean is not None else previous
            rows.append({
                "scheme": cfg.scheme.value,
                "subscribers": n,
                "rate": rate,
                "meanLatencyMs": mean,
                "delivered": result.delivered_count,
                "expected": result.expected_count,
                "throttled": result.throttled_count,
                "lookups": result.store_lookup_count,
            })
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in SWEEP_COLUMNS})
    return buf.getvalue()


def write_sweep(rows: list[dict], path) -> None:
    Path(path).write_text(sweep_csv(rows), encoding="utf-8")
