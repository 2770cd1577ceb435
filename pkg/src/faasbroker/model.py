"""Publications, subscriptions, and the matching predicates shared by every pipeline.

Scalars are either numbers (IEEE doubles) or strings. Python's ``str``
ordering is by code point, which coincides with byte-wise UTF-8 ordering,
so plain comparisons give the byte-wise semantics we want.
"""

from __future__ import annotations

import enum
import operator
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

from faasbroker.errors import TypeMismatch

Scalar = Union[float, int, str]


class Op(str, enum.Enum):
    EQ = "="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="

    @classmethod
    def parse(cls, text: str) -> "Op":
        """Accept either the symbol (``">="``) or the name (``"GE"``)."""
        text = text.strip()
        if text == "==":
            return cls.EQ
        for op in cls:
            if text == op.value or text.upper() == op.name:
                return op
        raise ValueError(f"unknown comparison operator {text!r}")


_ORDERING = {
    Op.LT: operator.lt,
    Op.LE: operator.le,
    Op.GT: operator.gt,
    Op.GE: operator.ge,
}


def is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def check_scalar(value) -> Scalar:
    if is_number(value) or isinstance(value, str):
        return value
    raise ValueError(f"scalar must be a number or a string, got {type(value).__name__}")


def compare_scalars(left: Scalar, op: Op, right: Scalar) -> bool:
    same_kind = is_number(left) == is_number(right)
    if op is Op.EQ:
        return same_kind and left == right
    if not same_kind:
        raise TypeMismatch(f"cannot order {left!r} {op.value} {right!r}")
    return _ORDERING[op](left, right)


@dataclass(frozen=True)
class Constraint:
    key: str
    op: Op
    value: Scalar

    def __post_init__(self):
        if not isinstance(self.key, str) or not self.key:
            raise ValueError("constraint key must be a non-empty string")
        if not isinstance(self.op, Op):
            object.__setattr__(self, "op", Op.parse(self.op))
        check_scalar(self.value)

    def to_json(self) -> dict:
        return {"key": self.key, "op": self.op.value, "value": self.value}

    @classmethod
    def from_json(cls, raw: Mapping) -> "Constraint":
        return cls(raw["key"], Op.parse(raw["op"]), raw["value"])

    def __str__(self) -> str:
        return f"{self.key} {self.op.value} {self.value!r}"


PropertyList = tuple  # tuple[tuple[str, Scalar], ...], sorted by key


def normalize_properties(entries: Iterable) -> PropertyList:
    """Validate key/value pairs and return them sorted by key.

    Accepts a mapping, an iterable of pairs, or an iterable of
    ``{"key": ..., "value": ...}`` objects. Repeated keys are rejected.
    """
    if isinstance(entries, Mapping):
        pairs = list(entries.items())
    else:
        pairs = []
        for entry in entries:
            if isinstance(entry, Mapping):
                pairs.append((entry["key"], entry["value"]))
            else:
                key, value = entry
                pairs.append((key, value))
    seen = set()
    for key, value in pairs:
        if not isinstance(key, str) or not key:
            raise ValueError("property key must be a non-empty string")
        if key in seen:
            raise ValueError(f"duplicate property key {key!r}")
        seen.add(key)
        check_scalar(value)
    return tuple(sorted(pairs, key=lambda kv: kv[0]))


def satisfies(constraints: Sequence[Constraint], properties: Iterable) -> bool:
    """Conjunctive match: every constraint needs a same-key property that passes it."""
    if not constraints:
        raise ValueError("constraint list must be non-empty")
    props = dict(properties) if not isinstance(properties, Mapping) else properties
    for c in constraints:
        if c.key not in props:
            return False
        if not compare_scalars(props[c.key], c.op, c.value):
            return False
    return True


def topic_matches(subscribed: Iterable[str], publication_topics: Sequence[str]) -> list[str]:
    """Publication topics the subscriber holds, in publication order."""
    if not publication_topics:
        raise ValueError("publication must carry at least one topic")
    wanted = set(subscribed)
    return [t for t in publication_topics if t in wanted]


@dataclass(frozen=True)
class TopicList:
    topics: tuple

    def __post_init__(self):
        if not self.topics:
            raise ValueError("topic list must be non-empty")
        object.__setattr__(self, "topics", tuple(self.topics))


@dataclass(frozen=True)
class Properties:
    entries: tuple

    def __post_init__(self):
        if not self.entries:
            raise ValueError("property list must be non-empty")
        object.__setattr__(self, "entries", normalize_properties(self.entries))


@dataclass(frozen=True)
class FunctionType:
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("function type must be non-empty")


@dataclass(frozen=True)
class Publication:
    data: str
    attachment: Union[TopicList, Properties, FunctionType]

    @classmethod
    def topics(cls, data: str, topics: Sequence[str]) -> "Publication":
        return cls(data, TopicList(tuple(topics)))

    @classmethod
    def content(cls, data: str, properties) -> "Publication":
        return cls(data, Properties(tuple(normalize_properties(properties))))

    @classmethod
    def function(cls, data: str, function_type: str) -> "Publication":
        return cls(data, FunctionType(function_type))


@dataclass(frozen=True)
class TopicSubscription:
    topics: frozenset

    def __post_init__(self):
        if not self.topics:
            raise ValueError("topic subscription needs at least one topic")
        object.__setattr__(self, "topics", frozenset(self.topics))

    def matches(self, publication: Publication) -> list[str]:
        return topic_matches(self.topics, publication.attachment.topics)


@dataclass(frozen=True)
class ContentSubscription:
    constraints: tuple

    def __post_init__(self):
        if not self.constraints:
            raise ValueError("content subscription needs at least one constraint")
        ordered = sorted(self.constraints, key=lambda c: c.key)
        object.__setattr__(self, "constraints", tuple(ordered))

    @property
    def keys(self) -> list[str]:
        return sorted({c.key for c in self.constraints})

    def matches(self, publication: Publication) -> bool:
        return satisfies(self.constraints, publication.attachment.entries)


@dataclass(frozen=True)
class FunctionSubscription:
    function_type: str
    source: str
    program: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        from faasbroker.matchlang import parse

        if not self.function_type:
            raise ValueError("function type must be non-empty")
        if self.program is None:
            object.__setattr__(self, "program", parse(self.source))


@dataclass(frozen=True)
class DeliveryFrame:
    subscriber: str
    data: str
    match_info: object
    timestamp: int

    def to_wire(self) -> dict:
        return {
            "subscriberId": self.subscriber,
            "data": self.data,
            "matchInfo": self.match_info,
            "timestamp": self.timestamp,
        }
