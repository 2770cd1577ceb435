"""A small total expression language for user-supplied matching functions.

Sources are parsed once when a subscription arrives (so syntax errors reach
the subscriber immediately) and evaluated per publication under a step
budget. Example, equivalent to a population check on a place name::

    let populations = {"new zealand": 4693000, "germany": 8267000};
    let places = find_keys(publication, populations);
    lookup(populations, places[0], 0) > 4000000
"""

from faasbroker.matchlang.evaluator import (
    DEFAULT_LIMITS,
    INDEX_OUT_OF_RANGE,
    STEP_BUDGET,
    STRING_LIMIT,
    TYPE_ERROR,
    EvalError,
    EvalLimits,
    evaluate,
    run,
    step_count,
)
from faasbroker.matchlang.parser import ParseError, Program, parse, unparse

__all__ = [
    "DEFAULT_LIMITS",
    "EvalError",
    "EvalLimits",
    "INDEX_OUT_OF_RANGE",
    "ParseError",
    "Program",
    "STEP_BUDGET",
    "STRING_LIMIT",
    "TYPE_ERROR",
    "evaluate",
    "parse",
    "run",
    "step_count",
    "unparse",
]
