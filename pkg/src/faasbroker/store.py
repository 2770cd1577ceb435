"""Identifier-addressed document store with a lookups-per-second budget.

Subscriptions are stored twice (the dual index): once under the matching key
(``topic/<t>``, ``ckey/<k>``, ``ftype/<T>``) so publish-time matching is a
single id lookup, and once under the subscriber (``sub-topics/<id>``,
``sub-content/<id>``, ``sub-funcs/<id>``) so unsubscribe and overwrite can
find every key doc that mentions the subscriber.
"""

from __future__ import annotations

import collections
import copy
import enum
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from faasbroker.clock import SystemClock
from faasbroker.errors import BudgetRejected, NotFound, UnknownSubscriber
from faasbroker.model import Constraint

log = logging.getLogger(__name__)

SUBSCRIBERS = "subscribers/"
TOPIC = "topic/"
SUB_TOPICS = "sub-topics/"
CKEY = "ckey/"
SUB_CONTENT = "sub-content/"
FTYPE = "ftype/"
SUB_FUNCS = "sub-funcs/"


class BudgetPolicy(str, enum.Enum):
    QUEUE = "queue"
    REJECT = "reject"


class IndexKind(str, enum.Enum):
    TOPIC = "topic"
    CKEY = "ckey"
    FTYPE = "ftype"


@dataclass
class LookupBudget:
    """Store operation budget. ``capacity=None`` disables throttling."""

    capacity: Optional[float] = 1000
    policy: BudgetPolicy = BudgetPolicy.QUEUE
    count_writes: bool = True

    def __post_init__(self):
        self.policy = BudgetPolicy(self.policy)
        if self.capacity is not None and self.capacity <= 0:
            raise ValueError("capacity must be positive")


class _ServiceSlots:
    """Paces operations like a single server with a fixed service rate.

    Each operation occupies ``1/capacity`` seconds of service time and
    completes at the end of its slot, so completions are spaced at least
    ``1/capacity`` apart and no half-open one-second window holds more than
    ``capacity`` of them. Under REJECT an operation that would have to wait
    behind a busy slot is refused instead.
    """

    def __init__(self, budget: LookupBudget, clock):
        self.budget = budget
        self.clock = clock
        self._next_free = 0.0
        self._lock = threading.Lock()

    def acquire(self, units: int = 1) -> float:
        if self.budget.capacity is None or units <= 0:
            return 0.0
        interval = 1.0 / self.budget.capacity
        with self._lock:
            now = self.clock.now()
            start = max(now, self._next_free)
            if self.budget.policy is BudgetPolicy.REJECT and start > now:
                raise BudgetRejected(f"store budget of {self.budget.capacity}/s exhausted")
            done = start + units * interval
            self._next_free = done
        delay = done - now
        self.clock.sleep(delay)
        return delay


@dataclass
class StoreStats:
    reads: int = 0
    writes: int = 0
    rejected: int = 0
    reads_by_id: collections.Counter = field(default_factory=collections.Counter)
    completions: list = field(default_factory=list)

    def lookups_for(self, doc_id: str) -> int:
        return self.reads_by_id[doc_id]


class DocumentStore:
    """Thread-safe in-memory JSON document store.

    Bodies are deep-copied on the way in and out, so callers never share
    mutable state with the store. With ``path`` set, every write is appended
    to an NDJSON log (``{"id", "rev", "body"}``, ``body: null`` for deletes)
    that is replayed on construction.
    """

    def __init__(self, budget: Optional[LookupBudget] = None, clock=None,
                 path: Optional[str | Path] = None, record_completions: bool = False):
        self.clock = clock or SystemClock()
        self.budget = budget or LookupBudget()
        self._slots = _ServiceSlots(self.budget, self.clock)
        self._docs: dict[str, tuple[int, dict]] = {}
        self._revs: dict[str, int] = {}
        self._lock = threading.Lock()
        self._index_lock = threading.RLock()
        self.stats = StoreStats()
        self._record_completions = record_completions
        self._path = Path(path) if path else None
        self._log_file = None
        if self._path is not None:
            self._replay()
            self._log_file = open(self._path, "a", encoding="utf-8")

    # -- budget -----------------------------------------------------------

    def _charge(self, units: int = 1, write: bool = False) -> None:
        if write and not self.budget.count_writes:
            return
        try:
            self._slots.acquire(units)
        except BudgetRejected:
            with self._lock:
                self.stats.rejected += 1
            raise
        if self._record_completions:
            t = self.clock.now()
            with self._lock:
                self.stats.completions.extend([t] * units)

    # -- persistence ------------------------------------------------------

    def _replay(self) -> None:
        if not self._path.exists():
            return
        with open(self._path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                self._revs[rec["id"]] = rec["rev"]
                if rec["body"] is None:
                    self._docs.pop(rec["id"], None)
                else:
                    self._docs[rec["id"]] = (rec["rev"], rec["body"])

    def _append(self, doc_id: str, rev: int, body) -> None:
        if self._log_file is not None:
            self._log_file.write(json.dumps({"id": doc_id, "rev": rev, "body": body}) + "\n")
            self._log_file.flush()

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # -- raw document API -------------------------------------------------

    def put_doc(self, doc_id: str, body: dict) -> int:
        if not doc_id:
            raise ValueError("document id must be non-empty")
        self._charge(write=True)
        return self._write(doc_id, body)

    def get_doc(self, doc_id: str) -> dict:
        self._charge()
        return self._read(doc_id, counted=True)

    def delete_doc(self, doc_id: str) -> None:
        """Delete ``doc_id``; raises NotFound if it does not exist."""
        self._charge(write=True)
        self._delete(doc_id)

    def has_doc(self, doc_id: str) -> bool:
        """Unbudgeted existence probe for internal consistency checks."""
        with self._lock:
            return doc_id in self._docs

    def revision(self, doc_id: str) -> int:
        with self._lock:
            if doc_id not in self._docs:
                raise NotFound(doc_id)
            return self._docs[doc_id][0]

    def snapshot(self) -> dict[str, dict]:
        """Deep copy of every live document, keyed by id."""
        with self._lock:
            return {k: copy.deepcopy(body) for k, (_, body) in sorted(self._docs.items())}

    def _write(self, doc_id: str, body: dict) -> int:
        body = copy.deepcopy(body)
        with self._lock:
            rev = self._revs.get(doc_id, 0) + 1
            self._revs[doc_id] = rev
            self._docs[doc_id] = (rev, body)
            self.stats.writes += 1
            self._append(doc_id, rev, body)
        return rev

    def _read(self, doc_id: str, counted: bool = False) -> dict:
        with self._lock:
            if counted:
                self.stats.reads += 1
                self.stats.reads_by_id[doc_id] += 1
            if doc_id not in self._docs:
                raise NotFound(doc_id)
            return copy.deepcopy(self._docs[doc_id][1])

    def _read_or(self, doc_id: str, default: dict) -> dict:
        try:
            return self._read(doc_id)
        except NotFound:
            return default

    def _delete(self, doc_id: str) -> None:
        with self._lock:
            if doc_id not in self._docs:
                raise NotFound(doc_id)
            del self._docs[doc_id]
            rev = self._revs[doc_id] + 1
            self._revs[doc_id] = rev
            self.stats.writes += 1
            self._append(doc_id, rev, None)

    def _store(self, doc_id: str, body: dict, empty: bool) -> None:
        """Write ``body`` or drop the document once it has nothing left in it."""
        if empty:
            if self.has_doc(doc_id):
                self._charge(write=True)
                self._delete(doc_id)
        else:
            self._charge(write=True)
            self._write(doc_id, body)

    # -- subscriber registry ----------------------------------------------

    def add_subscriber(self, subscriber: str, registered_at_ms: int) -> int:
        return self.put_doc(SUBSCRIBERS + subscriber,
                            {"id": subscriber, "registeredAt": registered_at_ms})

    def _require(self, subscriber: str) -> None:
        if not self.has_doc(SUBSCRIBERS + subscriber):
            raise UnknownSubscriber(subscriber)

    # -- topic index ------------------------------------------------------

    def index_add_topic(self, subscriber: str, topics: Iterable[str]) -> None:
        topics = sorted(set(topics))
        with self._index_lock:
            self._require(subscriber)
            mine = set(self._read_or(SUB_TOPICS + subscriber, {"topics": []})["topics"])
            for t in topics:
                members = set(self._read_or(TOPIC + t, {"subscribers": []})["subscribers"])
                if subscriber not in members:
                    members.add(subscriber)
                    self._store(TOPIC + t, {"subscribers": sorted(members)}, empty=False)
            if not set(topics) <= mine:
                mine.update(topics)
                self._store(SUB_TOPICS + subscriber, {"topics": sorted(mine)}, empty=False)

    def index_remove_topic(self, subscriber: str, topics: Iterable[str]) -> None:
        """Remove topics from both sides; topics never subscribed are ignored."""
        topics = sorted(set(topics))
        with self._index_lock:
            self._require(subscriber)
            mine = set(self._read_or(SUB_TOPICS + subscriber, {"topics": []})["topics"])
            for t in topics:
                members = set(self._read_or(TOPIC + t, {"subscribers": []})["subscribers"])
                if subscriber in members:
                    members.discard(subscriber)
                    self._store(TOPIC + t, {"subscribers": sorted(members)}, empty=not members)
            if mine & set(topics):
                mine.difference_update(topics)
                self._store(SUB_TOPICS + subscriber, {"topics": sorted(mine)}, empty=not mine)

    # -- content index ----------------------------------------------------

    def index_set_content(self, subscriber: str, constraints: Sequence[Constraint]) -> None:
        """Replace the subscriber's content subscription.

        Every ``ckey/<k>`` doc for a constrained key maps the subscriber to
        its full constraint list, so stage-three matching needs no further
        lookups. Keys dropped by the new subscription lose the subscriber.
        """
        if not constraints:
            raise ValueError("content subscription needs at least one constraint")
        encoded = [c.to_json() for c in sorted(constraints, key=lambda c: c.key)]
        new_keys = sorted({c.key for c in constraints})
        with self._index_lock:
            self._require(subscriber)
            old_keys = self._content_keys(subscriber)
            for k in sorted(set(old_keys) - set(new_keys)):
                self._drop_from_key_doc(CKEY + k, subscriber)
            for k in new_keys:
                doc = self._read_or(CKEY + k, {"subscribers": {}})
                doc["subscribers"][subscriber] = encoded
                self._store(CKEY + k, doc, empty=False)
            self._store(SUB_CONTENT + subscriber, {"constraints": encoded}, empty=False)

    def index_clear_content(self, subscriber: str) -> None:
        with self._index_lock:
            self._require(subscriber)
            for k in self._content_keys(subscriber):
                self._drop_from_key_doc(CKEY + k, subscriber)
            self._store(SUB_CONTENT + subscriber, {}, empty=True)

    def _content_keys(self, subscriber: str) -> list[str]:
        doc = self._read_or(SUB_CONTENT + subscriber, {"constraints": []})
        return sorted({c["key"] for c in doc["constraints"]})

    def _drop_from_key_doc(self, doc_id: str, subscriber: str) -> None:
        doc = self._read_or(doc_id, {"subscribers": {}})
        if doc["subscribers"].pop(subscriber, None) is not None:
            self._store(doc_id, doc, empty=not doc["subscribers"])

    # -- function index ---------------------------------------------------

    def index_set_function(self, subscriber: str, function_type: str, source: str) -> None:
        """Store one source per (subscriber, type); callers validate the source first."""
        if not function_type:
            raise ValueError("function type must be non-empty")
        with self._index_lock:
            self._require(subscriber)
            doc = self._read_or(FTYPE + function_type, {"subscribers": {}})
            doc["subscribers"][subscriber] = source
            self._store(FTYPE + function_type, doc, empty=False)
            mine = self._read_or(SUB_FUNCS + subscriber, {"functions": {}})
            mine["functions"][function_type] = source
            self._store(SUB_FUNCS + subscriber, mine, empty=False)

    def index_remove_function(self, subscriber: str, function_type: str) -> None:
        with self._index_lock:
            self._require(subscriber)
            mine = self._read_or(SUB_FUNCS + subscriber, {"functions": {}})
            if function_type not in mine["functions"]:
                raise NotFound(f"{subscriber} has no {function_type!r} function")
            del mine["functions"][function_type]
            self._drop_from_key_doc(FTYPE + function_type, subscriber)
            self._store(SUB_FUNCS + subscriber, mine, empty=not mine["functions"])

    # -- publish-time lookups ---------------------------------------------

    def lookup_subscribers(self, kind: IndexKind | str, key: str) -> dict:
        """One budgeted id lookup on the key side of the dual index.

        Returns ``{subscriber: detail}`` where detail is the topic itself,
        the subscriber's full constraint list, or the function source.
        """
        kind = IndexKind(kind)
        prefix = {IndexKind.TOPIC: TOPIC, IndexKind.CKEY: CKEY, IndexKind.FTYPE: FTYPE}[kind]
        try:
            doc = self.get_doc(prefix + key)
        except NotFound:
            return {}
        if kind is IndexKind.TOPIC:
            return {s: key for s in doc["subscribers"]}
        if kind is IndexKind.CKEY:
            return {s: [Constraint.from_json(c) for c in cs] for s, cs in doc["subscribers"].items()}
        return dict(doc["subscribers"])
