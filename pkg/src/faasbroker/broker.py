"""The broker's action pipelines, wired onto the runtime, store and gateway.

Every step is a separately registered runtime action, so the runtime's
concurrency and per-minute limits apply to each stage of each fan-out:

topic      topic-split -> topic-match (per topic) -> topic-deliver (per subscriber)
content    content-sort -> content-candidates -> content-match (per candidate)
function   function-candidates -> function-match (per subscriber)

Matching stages read subscriptions only through ``lookup_subscribers`` and
their container's cache. A cached entry is reused while it is at most
``cache_ttl`` seconds old, so subscription changes become visible to warm
containers within that bound and no sooner.
"""

from __future__ import annotations

import collections
import enum
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Iterable, Optional

from faasbroker.clock import SystemClock, epoch_millis
from faasbroker.errors import BrokerError, HandlerError, TypeMismatch
from faasbroker.gateway import DeliveryGateway
from faasbroker.matchlang import DEFAULT_LIMITS, EvalError, EvalLimits, ParseError, evaluate, parse
from faasbroker.model import Constraint, DeliveryFrame, normalize_properties, satisfies
from faasbroker.runtime import FaasRuntime, Invocation, Status
from faasbroker.store import DocumentStore, IndexKind

log = logging.getLogger(__name__)

REGISTER = "register-subscriber"
SUBSCRIBE_TOPICS = "subscribe-topics"
UNSUBSCRIBE_TOPICS = "unsubscribe-topics"
SUBSCRIBE_CONTENT = "subscribe-content"
UNSUBSCRIBE_CONTENT = "unsubscribe-content"
SUBSCRIBE_FUNCTION = "subscribe-function"
UNSUBSCRIBE_FUNCTION = "unsubscribe-function"
TOPIC_SPLIT = "topic-split"
TOPIC_MATCH = "topic-match"
TOPIC_DELIVER = "topic-deliver"
CONTENT_SORT = "content-sort"
CONTENT_CANDIDATES = "content-candidates"
CONTENT_MATCH = "content-match"
FUNCTION_CANDIDATES = "function-candidates"
FUNCTION_MATCH = "function-match"

# stages that emit at most one frame each; every other stage feeds a fan-out
FINAL_STAGES = frozenset({TOPIC_DELIVER, CONTENT_MATCH, FUNCTION_MATCH})


class CandidateMode(str, enum.Enum):
    FIRST_KEY = "first_key"
    ALL_KEYS = "all_keys"


@dataclass
class PipelineConfig:
    cache_ttl: float = 10.0
    content_candidate_mode: CandidateMode = CandidateMode.FIRST_KEY
    topic_dedupe: bool = False
    eval_limits: EvalLimits = DEFAULT_LIMITS

    def __post_init__(self):
        if self.cache_ttl <= 0:
            raise ValueError("cache_ttl must be positive")
        self.content_candidate_mode = CandidateMode(self.content_candidate_mode)


@dataclass
class CacheEntry:
    key: str
    payload: dict
    fetched_at: float


class Receipt:
    """Tracks every invocation spawned on behalf of one publication."""

    def __init__(self, publication_id: str, scheme: str):
        self.publication_id = publication_id
        self.scheme = scheme
        self._branches: list[tuple[str, Invocation]] = []
        self._lock = threading.Lock()

    def add(self, stage: str, handle: Invocation) -> None:
        with self._lock:
            self._branches.append((stage, handle))

    def handles(self) -> list[tuple[str, Invocation]]:
        with self._lock:
            return list(self._branches)

    @property
    def accepted(self) -> bool:
        branches = self.handles()
        return bool(branches) and branches[0][1].status is not Status.THROTTLED

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until every branch, including ones spawned later, is finished."""
        deadline = None if timeout is None else time.monotonic() + timeout
        seen = 0
        while True:
            branches = self.handles()
            for _, h in branches[seen:]:
                remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
                if not h.wait(remaining):
                    return False
            if len(self.handles()) == len(branches):
                return True
            seen = len(branches)

    def counts(self) -> dict[str, collections.Counter]:
        out: dict[str, collections.Counter] = collections.defaultdict(collections.Counter)
        for stage, h in self.handles():
            out[stage][h.status.value] += 1
        return dict(out)

    def to_json(self) -> dict:
        return {
            "publicationId": self.publication_id,
            "branches": [
                {"stage": stage, "status": h.status.value, "invocationId": h.id}
                for stage, h in self.handles()
            ],
        }


@dataclass
class BrokerStats:
    store_lookups: int = 0
    cache_hits: int = 0
    matches: int = 0
    non_matches: int = 0
    match_errors: int = 0
    by_key: collections.Counter = field(default_factory=collections.Counter)


def _constraints_from(raw: Iterable) -> list[Constraint]:
    out = []
    for c in raw:
        out.append(c if isinstance(c, Constraint) else Constraint.from_json(c))
    if not out:
        raise ValueError("content subscription needs at least one constraint")
    return out


def _require_topics(topics) -> list[str]:
    if isinstance(topics, str) or not topics:
        raise ValueError("topics must be a non-empty list of strings")
    topics = list(topics)
    if not all(isinstance(t, str) and t for t in topics):
        raise ValueError("topics must be non-empty strings")
    return topics


class Broker:
    def __init__(self, runtime: Optional[FaasRuntime] = None, store: Optional[DocumentStore] = None,
                 gateway: Optional[DeliveryGateway] = None, config: Optional[PipelineConfig] = None,
                 clock=None, max_receipts: int = 10_000):
        self.clock = clock or SystemClock()
        self.runtime = runtime or FaasRuntime(clock=self.clock)
        self.store = store or DocumentStore(clock=self.clock)
        self.gateway = gateway or DeliveryGateway(clock=self.clock)
        self.config = config or PipelineConfig()
        self.stats = BrokerStats()
        self._stats_lock = threading.Lock()
        self._receipts: collections.OrderedDict[str, Receipt] = collections.OrderedDict()
        self._max_receipts = max_receipts
        self._register_actions()

    def _register_actions(self) -> None:
        table = {
            REGISTER: self._act_register,
            SUBSCRIBE_TOPICS: self._act_subscribe_topics,
            UNSUBSCRIBE_TOPICS: self._act_unsubscribe_topics,
            SUBSCRIBE_CONTENT: self._act_subscribe_content,
            UNSUBSCRIBE_CONTENT: self._act_unsubscribe_content,
            SUBSCRIBE_FUNCTION: self._act_subscribe_function,
            UNSUBSCRIBE_FUNCTION: self._act_unsubscribe_function,
            TOPIC_SPLIT: self._act_topic_split,
            TOPIC_MATCH: self._act_topic_match,
            TOPIC_DELIVER: self._act_deliver,
            CONTENT_SORT: self._act_content_sort,
            CONTENT_CANDIDATES: self._act_content_candidates,
            CONTENT_MATCH: self._act_content_match,
            FUNCTION_CANDIDATES: self._act_function_candidates,
            FUNCTION_MATCH: self._act_function_match,
        }
        for name, handler in table.items():
            self.runtime.register(name, handler)

    def close(self) -> None:
        self.runtime.close()

    # -- client-facing API ------------------------------------------------

    def _call(self, action: str, params: dict) -> dict:
        try:
            return self.runtime.invoke(action, params)
        except HandlerError as exc:
            # surface validation failures as themselves rather than as handler crashes
            if isinstance(exc.cause, (BrokerError, ValueError, KeyError)):
                raise exc.cause from exc
            raise

    def register_subscriber(self) -> str:
        return self._call(REGISTER, {})["subscriberId"]

    def register_device(self, subscriber: str):
        return self.gateway.register_device(subscriber)

    def register_client(self) -> str:
        """Both registration phases: mint an id, then register it as a device."""
        sid = self.register_subscriber()
        self.register_device(sid)
        return sid

    def subscribe_topics(self, subscriber: str, topics: Iterable[str]) -> None:
        self._call(SUBSCRIBE_TOPICS, {"subscriberId": subscriber, "topics": list(topics)})

    def unsubscribe_topics(self, subscriber: str, topics: Iterable[str]) -> None:
        self._call(UNSUBSCRIBE_TOPICS, {"subscriberId": subscriber, "topics": list(topics)})

    def subscribe_content(self, subscriber: str, constraints: Iterable) -> None:
        encoded = [c.to_json() if isinstance(c, Constraint) else dict(c) for c in constraints]
        self._call(SUBSCRIBE_CONTENT, {"subscriberId": subscriber, "constraints": encoded})

    def unsubscribe_content(self, subscriber: str) -> None:
        self._call(UNSUBSCRIBE_CONTENT, {"subscriberId": subscriber})

    def subscribe_function(self, subscriber: str, function_type: str, source: str) -> None:
        self._call(SUBSCRIBE_FUNCTION,
                   {"subscriberId": subscriber, "functionType": function_type, "source": source})

    def unsubscribe_function(self, subscriber: str, function_type: str) -> None:
        self._call(UNSUBSCRIBE_FUNCTION, {"subscriberId": subscriber, "functionType": function_type})

    def publish_topic(self, data: str, topics: Iterable[str]) -> Receipt:
        topics = _require_topics(topics)
        return self._publish("topic", TOPIC_SPLIT, {"data": data, "topics": topics})

    def publish_content(self, data: str, properties) -> Receipt:
        props = normalize_properties(properties)
        if not props:
            raise ValueError("properties must be non-empty")
        return self._publish("content", CONTENT_SORT, {"data": data, "properties": [list(p) for p in props]})

    def publish_function(self, data: str, function_type: str) -> Receipt:
        if not isinstance(function_type, str) or not function_type:
            raise ValueError("functionType must be a non-empty string")
        return self._publish("function", FUNCTION_CANDIDATES, {"data": data, "functionType": function_type})

    def receipt(self, publication_id: str) -> Receipt:
        return self._receipts[publication_id]

    def _publish(self, scheme: str, entry: str, params: dict) -> Receipt:
        if not isinstance(params["data"], str):
            raise ValueError("publication data must be a string")
        pid = uuid.uuid4().hex
        receipt = Receipt(pid, scheme)
        with self._stats_lock:
            self._receipts[pid] = receipt
            while len(self._receipts) > self._max_receipts:
                self._receipts.popitem(last=False)
        handle = self.runtime.submit(entry, dict(params, publicationId=pid))
        receipt.add(entry, handle)
        handle.wait()
        return receipt

    def _fanout(self, publication_id: str, stage: str, inputs: list[dict]) -> list[Invocation]:
        handles = self.runtime.fanout(stage, inputs)
        receipt = self._receipts.get(publication_id)
        if receipt is not None:
            for h in handles:
                receipt.add(stage, h)
        throttled = sum(h.status is Status.THROTTLED for h in handles)
        if throttled:
            log.info("%s: %d of %d branches throttled", stage, throttled, len(handles))
        return handles

    # -- cache ------------------------------------------------------------

    def _cached_lookup(self, ctx, kind: IndexKind, key: str) -> dict:
        cache_key = (kind.value, key)
        now = self.clock.now()
        entry = ctx.cache.get(cache_key)
        if entry is not None and now - entry.fetched_at <= self.config.cache_ttl:
            with self._stats_lock:
                self.stats.cache_hits += 1
            return entry.payload
        payload = self.store.lookup_subscribers(kind, key)
        ctx.cache[cache_key] = CacheEntry(key, payload, now)
        with self._stats_lock:
            self.stats.store_lookups += 1
            self.stats.by_key[cache_key] += 1
        return payload

    # -- registration and subscription actions ------------------------------

    def _act_register(self, params, ctx):
        sid = uuid.uuid4().hex
        self.store.add_subscriber(sid, epoch_millis(self.clock))
        return {"subscriberId": sid}

    def _act_subscribe_topics(self, params, ctx):
        self.store.index_add_topic(params["subscriberId"], _require_topics(params["topics"]))
        return {"ok": True}

    def _act_unsubscribe_topics(self, params, ctx):
        self.store.index_remove_topic(params["subscriberId"], _require_topics(params["topics"]))
        return {"ok": True}

    def _act_subscribe_content(self, params, ctx):
        constraints = _constraints_from(params["constraints"])
        keys = [c.key for c in constraints]
        self.store.index_set_content(params["subscriberId"], constraints)
        return {"ok": True, "candidateKey": min(keys)}

    def _act_unsubscribe_content(self, params, ctx):
        self.store.index_clear_content(params["subscriberId"])
        return {"ok": True}

    def _act_subscribe_function(self, params, ctx):
        source = params["source"]
        parse(source)  # syntax errors go back to the subscriber now, not at publish time
        self.store.index_set_function(params["subscriberId"], params["functionType"], source)
        return {"ok": True}

    def _act_unsubscribe_function(self, params, ctx):
        self.store.index_remove_function(params["subscriberId"], params["functionType"])
        return {"ok": True}

    # -- publish pipelines ------------------------------------------------

    def _act_topic_split(self, params, ctx):
        topics = list(dict.fromkeys(params["topics"]))
        inputs = [{"data": params["data"], "topic": t, "topics": topics,
                   "publicationId": params["publicationId"]} for t in topics]
        self._fanout(params["publicationId"], TOPIC_MATCH, inputs)
        return {"branches": len(inputs)}

    def _act_topic_match(self, params, ctx):
        topic = params["topic"]
        subscribers = set(self._cached_lookup(ctx, IndexKind.TOPIC, topic))
        if self.config.topic_dedupe:
            # the earliest publication topic a subscriber holds owns its single frame
            for earlier in params["topics"]:
                if earlier == topic:
                    break
                subscribers -= set(self._cached_lookup(ctx, IndexKind.TOPIC, earlier))
        inputs = [{"subscriberId": s, "data": params["data"], "matchInfo": topic,
                   "publicationId": params["publicationId"]} for s in sorted(subscribers)]
        self._fanout(params["publicationId"], TOPIC_DELIVER, inputs)
        return {"subscribers": len(inputs)}

    def _act_deliver(self, params, ctx):
        return self._send(params["subscriberId"], params["data"], params["matchInfo"])

    def _send(self, subscriber: str, data: str, match_info) -> dict:
        frame = DeliveryFrame(subscriber, data, match_info, epoch_millis(self.clock))
        result = self.gateway.deliver(frame)
        return {"delivered": result.ok, "reason": result.reason.value if result.reason else None}

    def _act_content_sort(self, params, ctx):
        props = normalize_properties(params["properties"])
        keys = [k for k, _ in props]
        if self.config.content_candidate_mode is CandidateMode.FIRST_KEY:
            keys = keys[:1]
        self._fanout(params["publicationId"], CONTENT_CANDIDATES, [{
            "data": params["data"],
            "properties": [list(p) for p in props],
            "keys": keys,
            "publicationId": params["publicationId"],
        }])
        return {"keys": keys}

    def _act_content_candidates(self, params, ctx):
        candidates: dict[str, list] = {}
        for key in params["keys"]:
            for sid, constraints in self._cached_lookup(ctx, IndexKind.CKEY, key).items():
                candidates.setdefault(sid, constraints)
        inputs = [{
            "subscriberId": sid,
            "constraints": [c.to_json() for c in candidates[sid]],
            "data": params["data"],
            "properties": params["properties"],
            "publicationId": params["publicationId"],
        } for sid in sorted(candidates)]
        self._fanout(params["publicationId"], CONTENT_MATCH, inputs)
        return {"candidates": len(inputs)}

    def _act_content_match(self, params, ctx):
        constraints = _constraints_from(params["constraints"])
        props = [tuple(p) for p in params["properties"]]
        try:
            matched = satisfies(constraints, props)
        except TypeMismatch as exc:
            log.info("content match for %s skipped: %s", params["subscriberId"], exc)
            self._count(error=True)
            return {"matched": False, "error": str(exc)}
        self._count(matched)
        if not matched:
            return {"matched": False}
        info = [{"key": k, "value": v} for k, v in props]
        return dict(self._send(params["subscriberId"], params["data"], info), matched=True)

    def _act_function_candidates(self, params, ctx):
        ftype = params["functionType"]
        subscribers = self._cached_lookup(ctx, IndexKind.FTYPE, ftype)
        inputs = [{"subscriberId": sid, "functionType": ftype, "source": subscribers[sid],
                   "data": params["data"], "publicationId": params["publicationId"]}
                  for sid in sorted(subscribers)]
        self._fanout(params["publicationId"], FUNCTION_MATCH, inputs)
        return {"subscribers": len(inputs)}

    def _act_function_match(self, params, ctx):
        source = params["source"]
        programs = ctx.cache.setdefault("programs", {})
        try:
            program = programs.get(source)
            if program is None:
                program = programs[source] = parse(source)
            matched = evaluate(program, params["data"], self.config.eval_limits)
        except (EvalError, ParseError) as exc:
            log.info("matching function of %s failed: %s", params["subscriberId"], exc)
            self._count(error=True)
            return {"matched": False, "error": str(exc)}
        self._count(matched)
        if not matched:
            return {"matched": False}
        return dict(self._send(params["subscriberId"], params["data"], params["functionType"]), matched=True)

    def _count(self, matched: bool = False, error: bool = False) -> None:
        with self._stats_lock:
            if error:
                self.stats.match_errors += 1
            elif matched:
                self.stats.matches += 1
            else:
                self.stats.non_matches += 1
