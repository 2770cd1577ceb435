"""An in-process stand-in for a serverless action platform.

Actions are plain callables ``handler(params, ctx) -> dict``. Each call runs
in its own thread inside a *container*: a reusable context whose ``cache``
dict survives between invocations until the container sits idle past its
TTL. The runtime enforces a concurrency ceiling and a per-minute start
ceiling by rejecting (never queueing) invocations that would break them,
and it abandons handlers that overrun their time limit.
"""

from __future__ import annotations

import collections
import enum
import heapq
import itertools
import json
import logging
import random
import threading
import time
import traceback
import uuid
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

from faasbroker.clock import SystemClock
from faasbroker.errors import (
    DuplicateName,
    HandlerError,
    InvocationTimeout,
    NotFound,
    ThrottledError,
)

log = logging.getLogger(__name__)

MIB = 1024 * 1024


@dataclass
class RuntimeLimits:
    max_concurrent: int = 1200
    max_per_minute: int = 9000
    container_idle_ttl: float = 600.0
    eviction_jitter: float = 0.0

    def __post_init__(self):
        if self.max_concurrent < 1 or self.max_per_minute < 1:
            raise ValueError("limits must be positive")
        if not 0.0 <= self.eviction_jitter <= 1.0:
            raise ValueError("eviction_jitter must lie in [0, 1]")


@dataclass
class ActionSpec:
    name: str
    handler: Callable[[dict, "ContainerContext"], Optional[Mapping]]
    time_limit: float = 60.0
    memory_limit: int = 256 * MIB  # recorded only


@dataclass
class ContainerContext:
    container_id: str
    action: str
    created_at: float
    last_used_at: float
    cache: dict = field(default_factory=dict)
    idle_ttl: float = 600.0
    invocations: int = 0


class Status(str, enum.Enum):
    RUNNING = "running"
    OK = "ok"
    THROTTLED = "throttled"
    TIMEOUT = "timeout"
    ERROR = "error"


@dataclass
class InvocationRecord:
    invocation_id: str
    action: str
    container_id: Optional[str]
    start_ms: int
    end_ms: Optional[int] = None
    status: Status = Status.RUNNING

    def to_json(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        return {
            "invocationId": d["invocation_id"],
            "action": d["action"],
            "containerId": d["container_id"],
            "startMs": d["start_ms"],
            "endMs": d["end_ms"],
            "status": d["status"],
        }


class Invocation:
    """Handle on one (possibly still running) invocation."""

    def __init__(self, record: InvocationRecord):
        self.record = record
        self.output: Optional[dict] = None
        self.error: Optional[BaseException] = None
        self._done = threading.Event()

    @property
    def id(self) -> str:
        return self.record.invocation_id

    @property
    def action(self) -> str:
        return self.record.action

    @property
    def status(self) -> Status:
        return self.record.status

    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout)

    def result(self, timeout: Optional[float] = None) -> dict:
        if not self._done.wait(timeout):
            raise TimeoutError(f"invocation {self.id} still running")
        if self.error is not None:
            raise self.error
        return self.output

    def __repr__(self) -> str:
        return f"<Invocation {self.action} {self.id[:8]} {self.status.value}>"


@dataclass
class RuntimeStats:
    started: int = 0
    throttled: int = 0
    timeouts: int = 0
    errors: int = 0
    in_flight: int = 0
    high_water: int = 0
    containers_created: int = 0
    containers_evicted: int = 0


class FaasRuntime:
    def __init__(self, limits: Optional[RuntimeLimits] = None, clock=None,
                 seed: Optional[int] = None, keep_log: bool = True):
        self.limits = limits or RuntimeLimits()
        self.clock = clock or SystemClock()
        self.stats = RuntimeStats()
        self.keep_log = keep_log
        self.log: list[InvocationRecord] = []
        self._actions: dict[str, ActionSpec] = {}
        self._idle: dict[str, list[ContainerContext]] = collections.defaultdict(list)
        self._starts: collections.deque = collections.deque()
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._deadlines: list = []
        self._seq = itertools.count()
        self._watch_cv = threading.Condition()
        self._watchdog: Optional[threading.Thread] = None
        self._closed = False

    # -- registration -----------------------------------------------------

    def register_action(self, spec: ActionSpec) -> None:
        with self._lock:
            if spec.name in self._actions:
                raise DuplicateName(spec.name)
            self._actions[spec.name] = spec

    def register(self, name: str, handler, time_limit: float = 60.0,
                 memory_limit: int = 256 * MIB) -> ActionSpec:
        spec = ActionSpec(name, handler, time_limit, memory_limit)
        self.register_action(spec)
        return spec

    def actions(self) -> list[str]:
        return sorted(self._actions)

    def compose_sequence(self, name: str, action_names: list[str]) -> None:
        """Register ``name`` as a pipeline of existing actions.

        The wrapper is itself an invocation, so running a k-step sequence
        consumes k + 1 invocation starts.
        """
        missing = [a for a in action_names if a not in self._actions]
        if missing:
            raise NotFound(f"unknown actions in sequence: {missing}")
        steps = list(action_names)

        def run_sequence(params, ctx):
            out = params
            for step in steps:
                out = self.invoke(step, out)
            return out

        limit = sum(self._actions[a].time_limit for a in steps)
        self.register(name, run_sequence, time_limit=limit)

    # -- invocation -------------------------------------------------------

    def invoke(self, name: str, params: Optional[Mapping] = None) -> dict:
        """Run an action and wait for its output (or raise its failure)."""
        return self.submit(name, params).result()

    def fanout(self, name: str, inputs: Iterable[Mapping]) -> list[Invocation]:
        """Dispatch every input as an independent invocation; nothing is awaited.

        The whole batch is admitted at once, as a platform would see parallel
        requests arrive together, so a fan-out wider than the free capacity
        is partly throttled even when each branch is quick.
        """
        spec = self._spec(name)
        inputs = list(inputs)
        now = self.clock.now()
        with self._lock:
            admitted = [self._record(name, now) for _ in inputs]
        for (handle, container), params in zip(admitted, inputs):
            self._launch(spec, handle, container, params)
        return [handle for handle, _ in admitted]

    invoke_async_fanout = fanout

    def submit(self, name: str, params: Optional[Mapping] = None) -> Invocation:
        spec = self._spec(name)
        now = self.clock.now()
        with self._lock:
            handle, container = self._record(name, now)
        self._launch(spec, handle, container, params)
        return handle

    def _spec(self, name: str) -> ActionSpec:
        spec = self._actions.get(name)
        if spec is None:
            raise NotFound(f"no action named {name!r}")
        return spec

    def _record(self, name: str, now: float) -> tuple[Invocation, Optional[ContainerContext]]:
        """Admit or throttle one invocation. Caller holds the lock."""
        limit = self._admit(now)
        if limit is None:
            container = self._take_container(name, now)
            rec = InvocationRecord(uuid.uuid4().hex, name, container.container_id, _ms(now))
        else:
            container = None
            rec = InvocationRecord(uuid.uuid4().hex, name, None, _ms(now), _ms(now), Status.THROTTLED)
        if self.keep_log:
            self.log.append(rec)
        handle = Invocation(rec)
        if limit is not None:
            handle.error = ThrottledError(name, limit)
            handle._done.set()
        return handle, container

    def _launch(self, spec: ActionSpec, handle: Invocation, container: Optional[ContainerContext],
                params: Optional[Mapping]) -> None:
        if container is None:
            return  # throttled
        self._arm_deadline(handle, container, spec.time_limit)
        worker = threading.Thread(target=self._run, args=(spec, dict(params or {}), container, handle),
                                  name=f"action-{spec.name}", daemon=True)
        worker.start()

    def _admit(self, now: float) -> Optional[str]:
        """Reserve a slot or name the limit that blocks it. Caller holds the lock."""
        window_start = now - 60.0
        while self._starts and self._starts[0] <= window_start:
            self._starts.popleft()
        if self.stats.in_flight >= self.limits.max_concurrent:
            self.stats.throttled += 1
            return "concurrency"
        if len(self._starts) >= self.limits.max_per_minute:
            self.stats.throttled += 1
            return "per-minute"
        self._starts.append(now)
        self.stats.started += 1
        self.stats.in_flight += 1
        self.stats.high_water = max(self.stats.high_water, self.stats.in_flight)
        return None

    def _run(self, spec: ActionSpec, params: dict, container: ContainerContext, handle: Invocation) -> None:
        try:
            out = spec.handler(params, container)
            if out is None:
                out = {}
            if not isinstance(out, Mapping):
                raise TypeError(f"handler returned {type(out).__name__}, expected a mapping")
            self._finish(handle, container, Status.OK, output=dict(out))
        except HandlerError as exc:
            self._finish(handle, container, Status.ERROR, error=exc)
        except BaseException as exc:  # handler failures must not kill the worker silently
            err = HandlerError(spec.name, exc, traceback.format_exc())
            self._finish(handle, container, Status.ERROR, error=err)

    def _finish(self, handle: Invocation, container: ContainerContext, status: Status,
                output: Optional[dict] = None, error: Optional[BaseException] = None) -> None:
        now = self.clock.now()
        with self._lock:
            if handle.done():
                return  # already timed out; the late result is discarded
            handle.record.status = status
            handle.record.end_ms = _ms(now)
            handle.output = output
            handle.error = error
            self.stats.in_flight -= 1
            if status is Status.ERROR:
                self.stats.errors += 1
            if status is Status.TIMEOUT:
                self.stats.timeouts += 1
            else:
                container.last_used_at = now
                container.idle_ttl = self._draw_ttl()
                self._idle[container.action].append(container)
            handle._done.set()

    # -- containers -------------------------------------------------------

    def _draw_ttl(self) -> float:
        jitter = self.limits.eviction_jitter
        base = self.limits.container_idle_ttl
        if jitter == 0:
            return base
        return base * (1.0 + self._rng.uniform(-jitter, jitter))

    def _take_container(self, action: str, now: float) -> ContainerContext:
        pool = self._idle[action]
        while pool:
            c = pool.pop()  # most recently used first
            if now - c.last_used_at > c.idle_ttl:
                self.stats.containers_evicted += 1
                continue
            c.invocations += 1
            return c
        self.stats.containers_created += 1
        return ContainerContext(uuid.uuid4().hex, action, now, now, idle_ttl=self._draw_ttl(), invocations=1)

    def evict_idle_containers(self, now: Optional[float] = None) -> int:
        now = self.clock.now() if now is None else now
        evicted = 0
        with self._lock:
            for action, pool in self._idle.items():
                keep = [c for c in pool if now - c.last_used_at <= c.idle_ttl]
                evicted += len(pool) - len(keep)
                self._idle[action] = keep
            self.stats.containers_evicted += evicted
        return evicted

    def idle_containers(self, action: Optional[str] = None) -> list[ContainerContext]:
        with self._lock:
            if action is not None:
                return list(self._idle.get(action, []))
            return [c for pool in self._idle.values() for c in pool]

    # -- time limits ------------------------------------------------------

    def _arm_deadline(self, handle: Invocation, container: ContainerContext, limit: float) -> None:
        with self._watch_cv:
            heapq.heappush(self._deadlines, (time.monotonic() + limit, next(self._seq), handle, container))
            if self._watchdog is None:
                self._watchdog = threading.Thread(target=self._watch, name="runtime-watchdog", daemon=True)
                self._watchdog.start()
            self._watch_cv.notify()

    def _watch(self) -> None:
        with self._watch_cv:
            while not self._closed:
                while self._deadlines and self._deadlines[0][2].done():
                    heapq.heappop(self._deadlines)
                if not self._deadlines:
                    self._watch_cv.wait()
                    continue
                deadline, _, handle, container = self._deadlines[0]
                remaining = deadline - time.monotonic()
                if remaining > 0:
                    self._watch_cv.wait(min(remaining, 0.5))
                    continue
                heapq.heappop(self._deadlines)
                err = InvocationTimeout(f"{handle.action} exceeded its time limit")
                # the container is discarded with the stuck handler
                self._finish(handle, container, Status.TIMEOUT, error=err)

    def close(self) -> None:
        with self._watch_cv:
            self._closed = True
            self._watch_cv.notify_all()

    # -- observability ----------------------------------------------------

    def export_log(self, path) -> int:
        with self._lock:
            records = [r.to_json() for r in self.log]
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")
        return len(records)


def _ms(t: float) -> int:
    return int(t * 1000)


__all__ = [
    "ActionSpec",
    "ContainerContext",
    "FaasRuntime",
    "Invocation",
    "InvocationRecord",
    "RuntimeLimits",
    "RuntimeStats",
    "Status",
]
