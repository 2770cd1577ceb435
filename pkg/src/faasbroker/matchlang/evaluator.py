"""Step-bounded evaluation of parsed matching functions.

The evaluator only sees the program and the publication text. There is no
builtin that touches the clock, randomness, the store or the network, so
evaluation is deterministic and side-effect free by construction.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

from faasbroker.errors import BrokerError
from faasbroker.matchlang.parser import (
    PUBLICATION,
    Binary,
    Call,
    Index,
    ListLit,
    Literal,
    MapLit,
    Name,
    Program,
    Unary,
    parse,
)

TYPE_ERROR = "TypeError"
STEP_BUDGET = "StepBudgetExceeded"
INDEX_OUT_OF_RANGE = "IndexOutOfRange"
STRING_LIMIT = "StringLimitExceeded"


class EvalError(BrokerError):
    code = "eval_error"

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


@dataclass(frozen=True)
class EvalLimits:
    max_steps: int = 100_000
    max_string_bytes: int = 1024 * 1024


DEFAULT_LIMITS = EvalLimits()

_NUMBER_RE = re.compile(r"[+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")


def _kind(value) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, tuple):
        return "list"
    if isinstance(value, dict):
        return "map"
    return type(value).__name__


def _equal(a, b) -> bool:
    if _kind(a) != _kind(b):
        return False
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_equal(a[k], b[k]) for k in a)
    return a == b


def _type_error(message: str) -> EvalError:
    return EvalError(TYPE_ERROR, message)


class _Machine:
    def __init__(self, publication: str, limits: EvalLimits):
        self.limits = limits
        self.steps = 0
        self.env = {PUBLICATION: self.check_string(publication)}

    def tick(self, n: int = 1) -> None:
        self.steps += n
        if self.steps > self.limits.max_steps:
            raise EvalError(STEP_BUDGET, f"more than {self.limits.max_steps} steps")

    def check_string(self, s: str) -> str:
        if len(s) * 4 > self.limits.max_string_bytes and len(s.encode("utf-8")) > self.limits.max_string_bytes:
            raise EvalError(STRING_LIMIT, f"string longer than {self.limits.max_string_bytes} bytes")
        return s

    def run(self, program: Program):
        for binding in program.lets:
            self.tick()
            self.env[binding.name] = self.eval(binding.value)
        return self.eval(program.body)

    def eval(self, node):
        self.tick()
        if isinstance(node, Literal):
            return node.value
        if isinstance(node, Name):
            return self.env[node.ident]
        if isinstance(node, Binary):
            return self.binary(node)
        if isinstance(node, Unary):
            value = self.eval(node.operand)
            if node.op == "!":
                if not isinstance(value, bool):
                    raise _type_error(f"'!' needs a boolean, got {_kind(value)}")
                return not value
            if not isinstance(value, float):
                raise _type_error(f"unary '-' needs a number, got {_kind(value)}")
            return -value
        if isinstance(node, Index):
            return self.index(self.eval(node.target), self.eval(node.index))
        if isinstance(node, Call):
            args = [self.eval(a) for a in node.args]
            return getattr(self, "fn_" + node.fn)(*args)
        if isinstance(node, MapLit):
            return {k: self.eval(v) for k, v in node.items}
        if isinstance(node, ListLit):
            return tuple(self.eval(v) for v in node.items)
        raise _type_error(f"cannot evaluate {type(node).__name__}")

    def binary(self, node: Binary):
        op = node.op
        if op in ("&&", "||"):
            left = self.eval(node.left)
            if not isinstance(left, bool):
                raise _type_error(f"'{op}' needs booleans, got {_kind(left)}")
            if (op == "&&" and not left) or (op == "||" and left):
                return left
            right = self.eval(node.right)
            if not isinstance(right, bool):
                raise _type_error(f"'{op}' needs booleans, got {_kind(right)}")
            return right
        left = self.eval(node.left)
        right = self.eval(node.right)
        if op in ("==", "!="):
            equal = _equal(left, right)
            return equal if op == "==" else not equal
        if op in ("<", "<=", ">", ">="):
            if _kind(left) != _kind(right) or _kind(left) not in ("number", "string"):
                raise _type_error(f"cannot order {_kind(left)} {op} {_kind(right)}")
            if op == "<":
                return left < right
            if op == "<=":
                return left <= right
            if op == ">":
                return left > right
            return left >= right
        if op == "+" and isinstance(left, str) and isinstance(right, str):
            self.tick(len(left) + len(right))
            return self.check_string(left + right)
        if not (isinstance(left, float) and isinstance(right, float)):
            raise _type_error(f"'{op}' needs numbers, got {_kind(left)} and {_kind(right)}")
        if op == "+":
            return left + right
        if op == "-":
            return left - right
        if op == "*":
            return left * right
        return _divide(left, right)

    def index(self, target, key):
        if isinstance(target, dict):
            if not isinstance(key, str):
                raise _type_error(f"map index must be a string, got {_kind(key)}")
            if key not in target:
                raise EvalError(INDEX_OUT_OF_RANGE, f"no key {key!r}")
            return target[key]
        if isinstance(target, (tuple, str)):
            if not isinstance(key, float) or not math.isfinite(key) or key != int(key):
                raise _type_error(f"{_kind(target)} index must be an integer, got {key!r}")
            i = int(key)
            if not 0 <= i < len(target):
                raise EvalError(INDEX_OUT_OF_RANGE, f"index {i} outside length {len(target)}")
            return target[i]
        raise _type_error(f"cannot index a {_kind(target)}")

    # -- builtins ---------------------------------------------------------

    def _string(self, fn: str, value) -> str:
        if not isinstance(value, str):
            raise _type_error(f"{fn} needs a string, got {_kind(value)}")
        return value

    def fn_lowercase(self, s):
        s = self._string("lowercase", s)
        self.tick(len(s))
        return self.check_string(s.lower())

    def fn_contains(self, haystack, needle):
        if isinstance(haystack, str):
            needle = self._string("contains", needle)
            self.tick(len(haystack))
            return needle in haystack
        if isinstance(haystack, tuple):
            self.tick(len(haystack))
            return any(_equal(x, needle) for x in haystack)
        if isinstance(haystack, dict):
            self.tick()
            return isinstance(needle, str) and needle in haystack
        raise _type_error(f"contains needs a string, list or map, got {_kind(haystack)}")

    def fn_length(self, value):
        if isinstance(value, (str, tuple, dict)):
            return float(len(value))
        raise _type_error(f"length needs a string, list or map, got {_kind(value)}")

    def fn_split(self, s, sep):
        s = self._string("split", s)
        sep = self._string("split", sep)
        self.tick(len(s))
        return tuple(s) if sep == "" else tuple(s.split(sep))

    def fn_find_keys(self, s, mapping):
        s = self._string("find_keys", s)
        if not isinstance(mapping, dict):
            raise _type_error(f"find_keys needs a map, got {_kind(mapping)}")
        self.tick(len(s) * max(1, len(mapping)))
        folded = s.casefold()
        return tuple(k for k in sorted(mapping) if k.casefold() in folded)

    def fn_lookup(self, mapping, key, default):
        if not isinstance(mapping, dict):
            raise _type_error(f"lookup needs a map, got {_kind(mapping)}")
        if not isinstance(key, str):
            raise _type_error(f"lookup key must be a string, got {_kind(key)}")
        return mapping.get(key, default)

    def fn_to_number(self, value, default):
        if isinstance(value, float):
            return value
        if isinstance(value, str):
            self.tick(len(value))
            text = value.strip()
            # same spelling as number literals, plus a sign; no inf/nan or underscores
            if _NUMBER_RE.fullmatch(text):
                return float(text)
            return default
        return default


def _divide(left: float, right: float) -> float:
    if right != 0:
        return left / right
    if left == 0 or math.isnan(left):
        return math.nan
    return math.copysign(math.inf, left) * math.copysign(1.0, right)


def _program(source) -> Program:
    return source if isinstance(source, Program) else parse(source)


def run(program, publication: str, limits: Optional[EvalLimits] = None) -> tuple[object, int]:
    """Evaluate and return ``(value, steps)`` without checking the result type."""
    machine = _Machine(publication, limits or DEFAULT_LIMITS)
    value = machine.run(_program(program))
    return value, machine.steps


def evaluate(program, publication: str, limits: Optional[EvalLimits] = None) -> bool:
    value, _ = run(program, publication, limits)
    if not isinstance(value, bool):
        raise _type_error(f"matching function returned a {_kind(value)}, expected a boolean")
    return value


def step_count(program, publication: str, limits: Optional[EvalLimits] = None) -> int:
    """Steps used by a successful evaluation (raises like ``evaluate`` on failure)."""
    machine = _Machine(publication, limits or DEFAULT_LIMITS)
    value = machine.run(_program(program))
    if not isinstance(value, bool):
        raise _type_error(f"matching function returned a {_kind(value)}, expected a boolean")
    return machine.steps
