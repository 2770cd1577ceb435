import collections
import random

import pytest

import oracles
from faasbroker.broker import (
    CONTENT_CANDIDATES,
    CONTENT_MATCH,
    TOPIC_MATCH,
    CandidateMode,
    PipelineConfig,
)
from faasbroker.errors import NotFound, UnknownSubscriber
from faasbroker.matchlang import ParseError
from faasbroker.bench.harness import EVENT_SENTENCE, POPULATION_SOURCE
from faasbroker.model import Constraint, Op
from faasbroker.runtime import RuntimeLimits
from faasbroker.store import IndexKind


def test_register_mints_distinct_persisted_ids(harness):
    before = harness.store.stats.writes
    ids = [harness.broker.register_subscriber() for _ in range(352)]
    assert len(set(ids)) == 352
    assert harness.store.stats.writes - before == 352
    assert harness.store.has_doc(f"subscribers/{ids[0]}")


def test_subscribe_unknown_subscriber(harness):
    with pytest.raises(UnknownSubscriber):
        harness.broker.subscribe_topics("ghost", ["a"])


def test_topic_end_to_end(harness):
    s1, s2 = harness.subscriber(), harness.subscriber()
    for s in (s1, s2):
        harness.broker.subscribe_topics(s, ["a"])
    receipt, frames = harness.publish("topic", "hello", ["a"])
    assert sorted(f["subscriberId"] for f in frames) == sorted([s1, s2])
    assert all(f["data"] == "hello" and f["matchInfo"] == "a" for f in frames)
    assert receipt.accepted


def test_topic_duplicate_frames_without_dedupe(harness):
    s1 = harness.subscriber()
    harness.broker.subscribe_topics(s1, ["a", "b"])
    _, frames = harness.publish("topic", "d", ["a", "b"])
    assert sorted(f["matchInfo"] for f in frames) == ["a", "b"]


def test_topic_dedupe_keeps_one_frame(make_harness):
    h = make_harness(config=PipelineConfig(topic_dedupe=True))
    s1, s2 = h.subscriber(), h.subscriber()
    h.broker.subscribe_topics(s1, ["a", "b"])
    h.broker.subscribe_topics(s2, ["b"])
    _, frames = h.publish("topic", "d", ["a", "b"])
    got = sorted((f["subscriberId"], f["matchInfo"]) for f in frames)
    assert got == sorted([(s1, "a"), (s2, "b")])


def test_unsubscribe_takes_effect_after_ttl(harness):
    s = harness.subscriber()
    harness.broker.subscribe_topics(s, ["a"])
    harness.publish("topic", "1", ["a"])
    harness.broker.unsubscribe_topics(s, ["a"])
    harness.clock.advance(5)
    _, frames = harness.publish("topic", "2", ["a"])
    assert len(frames) <= 1  # allowed inside the stale-cache window
    harness.clock.advance(5.001)
    _, frames = harness.publish("topic", "3", ["a"])
    assert frames == []


def test_cache_one_lookup_per_window(harness):
    s = harness.subscriber()
    harness.broker.subscribe_topics(s, ["a"])
    harness.publish("topic", "1", ["a"])
    harness.clock.advance(4)
    harness.publish("topic", "2", ["a"])
    assert harness.broker.stats.by_key[("topic", "a")] == 1
    assert harness.broker.stats.cache_hits == 1
    harness.clock.advance(7)
    harness.publish("topic", "3", ["a"])
    assert harness.broker.stats.by_key[("topic", "a")] == 2


def test_cache_bound_over_observation_window(harness):
    s = harness.subscriber()
    harness.broker.subscribe_topics(s, ["a"])
    window = 0.0
    for _ in range(100):
        harness.publish("topic", "x", ["a"])
        harness.clock.advance(0.25)
        window += 0.25
    containers = {r.container_id for r in harness.runtime.log if r.action == TOPIC_MATCH}
    assert len(containers) == 1
    assert harness.broker.stats.by_key[("topic", "a")] <= -(-window // 10)


def test_content_delivery_and_match_info(harness):
    s = harness.subscriber()
    harness.broker.subscribe_content(s, [Constraint("k1", Op.EQ, 5), Constraint("k2", Op.GE, 10)])
    _, frames = harness.publish("content", "d", {"k2": 12, "k1": 5})
    assert len(frames) == 1
    assert frames[0]["matchInfo"] == [{"key": "k1", "value": 5}, {"key": "k2", "value": 12}]


def test_content_overwrite(harness):
    s = harness.subscriber()
    harness.broker.subscribe_content(s, [Constraint("k1", Op.GT, 5)])
    harness.broker.subscribe_content(s, [Constraint("k1", Op.GT, 7)])
    _, frames = harness.publish("content", "d", {"k1": 6})
    assert frames == []
    _, frames = harness.publish("content", "d", {"k1": 8})
    assert len(frames) == 1


def test_content_unsubscribe_without_subscription(harness):
    s = harness.subscriber()
    harness.broker.unsubscribe_content(s)


def test_content_subscription_stored_sorted(harness):
    s = harness.subscriber()
    harness.broker.subscribe_content(s, [Constraint("b", Op.EQ, 1), Constraint("a", Op.EQ, 1)])
    stored = harness.store.get_doc(f"sub-content/{s}")["constraints"]
    assert [c["key"] for c in stored] == ["a", "b"]


def test_first_key_misses_but_all_keys_delivers(make_harness):
    for mode, expected in [(CandidateMode.FIRST_KEY, 0), (CandidateMode.ALL_KEYS, 1)]:
        h = make_harness(config=PipelineConfig(content_candidate_mode=mode))
        s = h.subscriber()
        h.broker.subscribe_content(s, [Constraint("k2", Op.GE, 10)])
        _, frames = h.publish("content", "d", {"k1": 5, "k2": 12})
        assert len(frames) == expected, mode


def test_content_type_mismatch_is_non_match(harness):
    s = harness.subscriber()
    harness.broker.subscribe_content(s, [Constraint("k", Op.GT, "x")])
    _, frames = harness.publish("content", "d", {"k": 1})
    assert frames == []
    assert harness.broker.stats.match_errors == 1


def test_content_rejects_empty_properties(harness):
    with pytest.raises(ValueError):
        harness.broker.publish_content("d", {})


def test_function_population_delivers(harness):
    s = harness.subscriber()
    harness.broker.subscribe_function(s, "population", POPULATION_SOURCE)
    _, frames = harness.publish("function", EVENT_SENTENCE, "population")
    assert [(f["subscriberId"], f["matchInfo"]) for f in frames] == [(s, "population")]
    _, frames = harness.publish("function", "A meeting in Germany.", "population")
    assert len(frames) == 1
    _, frames = harness.publish("function", "Sunny in Paris.", "population")
    assert frames == []
    assert harness.broker.stats.match_errors == 1


def test_function_false_never_delivers(harness):
    s = harness.subscriber()
    harness.broker.subscribe_function(s, "T", "false")
    _, frames = harness.publish("function", "x", "T")
    assert frames == []


def test_function_parse_error_leaves_store_untouched(harness):
    s = harness.subscriber()
    before = harness.store.snapshot()
    with pytest.raises(ParseError):
        harness.broker.subscribe_function(s, "T", "publication >")
    assert harness.store.snapshot() == before


def test_function_types_coexist_and_overwrite(harness):
    s = harness.subscriber()
    harness.broker.subscribe_function(s, "T1", "true")
    harness.broker.subscribe_function(s, "T2", "true")
    harness.broker.subscribe_function(s, "T2", "false")
    assert len(harness.publish("function", "x", "T1")[1]) == 1
    assert harness.publish("function", "x", "T2")[1] == []
    harness.broker.unsubscribe_function(s, "T1")
    with pytest.raises(NotFound):
        harness.broker.unsubscribe_function(s, "T1")


def test_receipt_lists_every_branch(harness):
    subs = [harness.subscriber() for _ in range(3)]
    for s in subs:
        harness.broker.subscribe_topics(s, ["a", "b"])
    receipt, frames = harness.publish("topic", "d", ["a", "b"])
    counts = receipt.counts()
    assert counts["topic-split"]["ok"] == 1
    assert counts["topic-match"]["ok"] == 2
    assert counts["topic-deliver"]["ok"] == 6
    assert len(frames) == 6
    body = receipt.to_json()
    assert body["publicationId"] == receipt.publication_id
    assert harness.broker.receipt(receipt.publication_id) is receipt


def test_throttled_branches_show_in_receipt(make_harness):
    # 5 registrations + 5 subscriptions + 7 stages for the first publish, then 5 more
    h = make_harness(limits=RuntimeLimits(max_per_minute=22))
    subs = [h.subscriber() for _ in range(5)]
    for s in subs:
        h.broker.subscribe_topics(s, ["a"])
    receipt, frames = h.publish("topic", "d", ["a"])
    statuses = collections.Counter()
    for stage, handle in receipt.handles():
        statuses[handle.status.value] += 1
    assert statuses["ok"] + statuses["throttled"] == 1 + 1 + 5
    assert len(frames) == 5
    receipt, frames = h.publish("topic", "d", ["a"])
    assert receipt.counts()["topic-deliver"]["throttled"] == 2
    assert len(frames) == 3


# -- properties ---------------------------------------------------------------

VALUES = [0, 1, 2, 5, 10, "a", "m"]


def _random_constraints(rng):
    keys = rng.sample(["k1", "k2", "k3", "k4"], rng.randint(1, 3))
    return [(k, rng.choice(["=", "<", "<=", ">", ">="]), rng.choice(VALUES)) for k in keys]


def test_all_keys_matches_brute_force_and_no_false_positives(make_harness):
    rng = random.Random(21)
    h = make_harness(config=PipelineConfig(content_candidate_mode="all_keys"))
    subs = {}
    for _ in range(12):
        sid = h.subscriber()
        subs[sid] = _random_constraints(rng)
        h.broker.subscribe_content(sid, [Constraint(k, Op.parse(o), v) for k, o, v in subs[sid]])
    for _ in range(60):
        props = {k: rng.choice(VALUES) for k in rng.sample(["k1", "k2", "k3", "k4"], rng.randint(1, 4))}
        _, frames = h.publish("content", "d", props)
        got = collections.Counter(f["subscriberId"] for f in frames)
        expected = {sid for sid, cs in subs.items() if oracles.pipeline_match(cs, props)}
        assert set(got) == expected
        assert all(n == 1 for n in got.values())


def test_topic_matches_set_intersection(harness):
    rng = random.Random(4)
    universe = ["a", "b", "c", "d", "e"]
    subs = {}
    for _ in range(10):
        sid = harness.subscriber()
        subs[sid] = set(rng.sample(universe, rng.randint(1, 3)))
        harness.broker.subscribe_topics(sid, sorted(subs[sid]))
    for _ in range(40):
        topics = rng.sample(universe, rng.randint(1, 3))
        _, frames = harness.publish("topic", "d", topics)
        got = collections.Counter((f["subscriberId"], f["matchInfo"]) for f in frames)
        expected = collections.Counter((sid, t) for sid, ts in subs.items() for t in topics if t in ts)
        assert got == expected


class CountingStore:
    """Forwards to a real store and records every method called on it."""

    def __init__(self, inner):
        self._inner = inner
        self.calls = collections.Counter()

    def __getattr__(self, name):
        target = getattr(self._inner, name)
        if callable(target):
            def wrapper(*a, **kw):
                self.calls[name] += 1
                return target(*a, **kw)
            return wrapper
        return target


def test_publish_stages_only_read_the_index(harness):
    s = harness.subscriber()
    harness.broker.subscribe_topics(s, ["a"])
    harness.broker.subscribe_content(s, [Constraint("k", Op.EQ, 1)])
    harness.broker.subscribe_function(s, "T", "true")
    counting = CountingStore(harness.store)
    harness.broker.store = counting
    harness.publish("topic", "d", ["a"])
    harness.publish("content", "d", {"k": 1})
    harness.publish("function", "d", "T")
    assert set(counting.calls) == {"lookup_subscribers"}
    assert counting.calls["lookup_subscribers"] == 3


def test_content_stages_in_receipt(harness):
    s = harness.subscriber()
    harness.broker.subscribe_content(s, [Constraint("k", Op.EQ, 1)])
    receipt, _ = harness.publish("content", "d", {"k": 1})
    assert receipt.counts()[CONTENT_CANDIDATES]["ok"] == 1
    assert receipt.counts()[CONTENT_MATCH]["ok"] == 1


def test_lookup_kinds_used(harness):
    s = harness.subscriber()
    harness.broker.subscribe_function(s, "T", "true")
    assert harness.store.lookup_subscribers(IndexKind.FTYPE, "T") == {s: "true"}
