"""Tokenizer, recursive-descent parser and printer for matching functions.

Grammar::

    program    := ("let" IDENT "=" expr ";")* expr ";"?
    expr       := or
    or         := and ("||" and)*
    and        := equality ("&&" equality)*
    equality   := compare (("==" | "!=") compare)*
    compare    := additive (("<" | "<=" | ">" | ">=") additive)*
    additive   := term (("+" | "-") term)*
    term       := unary (("*" | "/") unary)*
    unary      := ("!" | "-") unary | postfix
    postfix    := primary ("[" expr "]")*
    primary    := NUMBER | STRING | "true" | "false" | IDENT | IDENT "(" args ")"
                | "{" (STRING ":" expr ("," STRING ":" expr)*)? "}"
                | "[" (expr ("," expr)*)? "]" | "(" expr ")"

There are no loops, no user functions and no recursion, so every program
terminates. Names are resolved at parse time: only ``publication`` and
earlier ``let`` bindings are visible, and calls must name a builtin with a
matching arity.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional

from faasbroker.errors import BrokerError

PUBLICATION = "publication"

# name -> accepted argument counts
BUILTIN_ARITY = {
    "lowercase": (1,),
    "contains": (2,),
    "length": (1,),
    "split": (2,),
    "find_keys": (2,),
    "lookup": (3,),
    "to_number": (2,),
}


class ParseError(BrokerError, SyntaxError):
    code = "parse_error"

    def __init__(self, message: str, offset: int, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.message = message
        self.offset = offset
        self.line = line
        self.column = column

    def to_json(self) -> dict:
        return {"message": self.message, "offset": self.offset, "line": self.line, "column": self.column}


# -- AST ----------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Literal(Node):
    value: object  # bool | float | str


@dataclass(frozen=True)
class MapLit(Node):
    items: tuple  # ((key, Node), ...)


@dataclass(frozen=True)
class ListLit(Node):
    items: tuple


@dataclass(frozen=True)
class Name(Node):
    ident: str


@dataclass(frozen=True)
class Index(Node):
    target: Node
    index: Node


@dataclass(frozen=True)
class Call(Node):
    fn: str
    args: tuple


@dataclass(frozen=True)
class Unary(Node):
    op: str
    operand: Node


@dataclass(frozen=True)
class Binary(Node):
    op: str
    left: Node
    right: Node


@dataclass(frozen=True)
class Let:
    name: str
    value: Node


@dataclass(frozen=True)
class Program:
    lets: tuple
    body: Node
    source: Optional[str] = field(default=None, compare=False, repr=False)


# -- tokenizer ----------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # NUMBER STRING IDENT OP EOF
    text: str
    value: object
    offset: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|//[^\n]*)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>&&|\|\||==|!=|<=|>=|[<>!+\-*/=;:,(){}\[\]])
    """,
    re.VERBOSE,
)

_ESCAPES = {'"': '"', "'": "'", "\\": "\\", "/": "/", "b": "\b", "f": "\f", "n": "\n", "r": "\r", "t": "\t"}


def _position(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    column = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return line, column


def _error(text: str, message: str, offset: int) -> ParseError:
    line, column = _position(text, offset)
    return ParseError(message, offset, line, column)


def _read_string(text: str, start: int) -> tuple[str, int]:
    quote = text[start]
    out = []
    i = start + 1
    while i < len(text):
        ch = text[i]
        if ch == quote:
            return "".join(out), i + 1
        if ch == "\n":
            break
        if ch == "\\":
            i += 1
            if i >= len(text):
                break
            esc = text[i]
            if esc == "u":
                digits = text[i + 1:i + 5]
                if not re.fullmatch(r"[0-9a-fA-F]{4}", digits):
                    raise _error(text, "bad \\u escape", i - 1)
                out.append(chr(int(digits, 16)))
                i += 5
                continue
            if esc not in _ESCAPES:
                raise _error(text, f"unknown escape \\{esc}", i - 1)
            out.append(_ESCAPES[esc])
            i += 1
            continue
        out.append(ch)
        i += 1
    raise _error(text, "unterminated string", start)


def tokenize(text: str) -> list[Token]:
    tokens = []
    i = 0
    while i < len(text):
        if text[i] in "\"'":
            value, end = _read_string(text, i)
            tokens.append(Token("STRING", text[i:end], value, i))
            i = end
            continue
        m = _TOKEN_RE.match(text, i)
        if m is None:
            raise _error(text, f"unexpected character {text[i]!r}", i)
        kind = m.lastgroup
        if kind == "number":
            tokens.append(Token("NUMBER", m.group(), float(m.group()), i))
        elif kind == "ident":
            tokens.append(Token("IDENT", m.group(), m.group(), i))
        elif kind == "op":
            tokens.append(Token("OP", m.group(), m.group(), i))
        i = m.end()
    tokens.append(Token("EOF", "", None, len(text)))
    return tokens


# -- parser -------------------------------------------------------------------

_BINARY_LEVELS = [
    ("||",),
    ("&&",),
    ("==", "!="),
    ("<", "<=", ">", ">="),
    ("+", "-"),
    ("*", "/"),
]

_KEYWORDS = {"let", "true", "false"}

MAX_NESTING = 48
MAX_DEPTH = 256


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.pos = 0
        self.scope = {PUBLICATION}
        self.nesting = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def fail(self, message: str, token: Optional[Token] = None) -> ParseError:
        token = token or self.tok
        if token.kind == "EOF":
            message = f"{message}, found end of input"
        else:
            message = f"{message}, found {token.text!r}"
        return _error(self.text, message, token.offset)

    def accept(self, text: str) -> bool:
        if self.tok.kind in ("OP", "IDENT") and self.tok.text == text:
            self.pos += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        tok = self.tok
        if not self.accept(text):
            raise self.fail(f"expected {text!r}")
        return tok

    def program(self) -> Program:
        lets = []
        while self.tok.kind == "IDENT" and self.tok.text == "let":
            self.pos += 1
            name_tok = self.tok
            if name_tok.kind != "IDENT" or name_tok.text in _KEYWORDS:
                raise self.fail("expected a name after 'let'")
            if name_tok.text in self.scope or name_tok.text in BUILTIN_ARITY:
                raise self.fail(f"name {name_tok.text!r} is already defined")
            self.pos += 1
            self.expect("=")
            value = self.expr()
            self.expect(";")
            self.scope.add(name_tok.text)
            lets.append(Let(name_tok.text, value))
        body = self.expr()
        self.accept(";")
        if self.tok.kind != "EOF":
            raise self.fail("expected end of program")
        return Program(tuple(lets), body, self.text)

    def expr(self, level: int = 0) -> Node:
        if level == len(_BINARY_LEVELS):
            return self.unary()
        ops = _BINARY_LEVELS[level]
        left = self.expr(level + 1)
        while self.tok.kind == "OP" and self.tok.text in ops:
            op = self.tok.text
            self.pos += 1
            right = self.expr(level + 1)
            left = Binary(op, left, right)
        return left

    def nested(self, parse_inner):
        if self.nesting >= MAX_NESTING:
            raise self.fail("expression nested too deeply")
        self.nesting += 1
        try:
            return parse_inner()
        finally:
            self.nesting -= 1

    def unary(self) -> Node:
        if self.tok.kind == "OP" and self.tok.text in ("!", "-"):
            op = self.tok.text
            self.pos += 1
            return Unary(op, self.nested(self.unary))
        return self.postfix()

    def postfix(self) -> Node:
        node = self.primary()
        while self.accept("["):
            index = self.nested(self.expr)
            self.expect("]")
            node = Index(node, index)
        return node

    def primary(self) -> Node:
        tok = self.tok
        if tok.kind == "NUMBER":
            self.pos += 1
            return Literal(tok.value)
        if tok.kind == "STRING":
            self.pos += 1
            return Literal(tok.value)
        if tok.kind == "IDENT":
            if tok.text in ("true", "false"):
                self.pos += 1
                return Literal(tok.text == "true")
            if tok.text == "let":
                raise self.fail("'let' is only allowed at the start of the program")
            self.pos += 1
            if self.accept("("):
                return self.call(tok)
            if tok.text not in self.scope:
                raise self.fail(f"undefined name {tok.text!r}", tok)
            return Name(tok.text)
        if self.accept("("):
            inner = self.nested(self.expr)
            self.expect(")")
            return inner
        if self.accept("{"):
            return self.nested(self.map_literal)
        if self.accept("["):
            return self.nested(self.list_literal)
        raise self.fail("expected an expression")

    def list_literal(self) -> Node:
        items = []
        if not self.accept("]"):
            items.append(self.expr())
            while self.accept(","):
                items.append(self.expr())
            self.expect("]")
        return ListLit(tuple(items))

    def call(self, name_tok: Token) -> Node:
        if name_tok.text not in BUILTIN_ARITY:
            raise self.fail(f"unknown function {name_tok.text!r}", name_tok)
        return self.nested(lambda: self.call_args(name_tok))

    def call_args(self, name_tok: Token) -> Node:
        args = []
        if not self.accept(")"):
            args.append(self.expr())
            while self.accept(","):
                args.append(self.expr())
            self.expect(")")
        if len(args) not in BUILTIN_ARITY[name_tok.text]:
            raise self.fail(f"{name_tok.text} takes {BUILTIN_ARITY[name_tok.text][0]} argument(s)", name_tok)
        return Call(name_tok.text, tuple(args))

    def map_literal(self) -> Node:
        items = []
        seen = set()
        if self.accept("}"):
            return MapLit(())
        while True:
            key_tok = self.tok
            if key_tok.kind != "STRING":
                raise self.fail("map keys must be string literals")
            if key_tok.value in seen:
                raise self.fail(f"duplicate map key {key_tok.value!r}")
            seen.add(key_tok.value)
            self.pos += 1
            self.expect(":")
            items.append((key_tok.value, self.expr()))
            if self.accept("}"):
                return MapLit(tuple(items))
            self.expect(",")


def children(node) -> tuple:
    if isinstance(node, MapLit):
        return tuple(v for _, v in node.items)
    if isinstance(node, ListLit):
        return node.items
    if isinstance(node, Index):
        return (node.target, node.index)
    if isinstance(node, Call):
        return node.args
    if isinstance(node, Unary):
        return (node.operand,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    return ()


def depth(node: Node) -> int:
    """Height of an expression tree, computed without recursion."""
    best = 0
    stack = [(node, 1)]
    while stack:
        n, d = stack.pop()
        best = max(best, d)
        stack.extend((c, d + 1) for c in children(n))
    return best


def parse(text: str) -> Program:
    if not isinstance(text, str):
        raise TypeError("function source must be a string")
    program = _Parser(text).program()
    # long operator chains build deep left-leaning trees without deep parser recursion
    for node in [b.value for b in program.lets] + [program.body]:
        if depth(node) > MAX_DEPTH:
            raise _error(text, "expression nested too deeply", 0)
    return program


# -- printer ------------------------------------------------------------------

def _fmt_number(x: float) -> str:
    if math.isinf(x):
        return "1e999"
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


_LEVEL = {op: i for i, ops in enumerate(_BINARY_LEVELS) for op in ops}
_UNARY_LEVEL = len(_BINARY_LEVELS)


def _level(node: Node) -> int:
    if isinstance(node, Binary):
        return _LEVEL[node.op]
    if isinstance(node, Unary):
        return _UNARY_LEVEL
    return _UNARY_LEVEL + 1


def _wrap(node: Node, min_level: int) -> str:
    text = unparse_node(node)
    return text if _level(node) >= min_level else f"({text})"


def unparse_node(node: Node) -> str:
    """Print with the fewest parentheses that keep the tree shape.

    Operators are left-associative, so a long ``a + b + c`` chain prints flat
    and reparses without hitting the nesting limit.
    """
    if isinstance(node, Literal):
        v = node.value
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v, ensure_ascii=False)
        return _fmt_number(v)
    if isinstance(node, Name):
        return node.ident
    if isinstance(node, MapLit):
        return "{" + ", ".join(f"{json.dumps(k, ensure_ascii=False)}: {unparse_node(v)}" for k, v in node.items) + "}"
    if isinstance(node, ListLit):
        return "[" + ", ".join(unparse_node(v) for v in node.items) + "]"
    if isinstance(node, Index):
        return f"{_wrap(node.target, _UNARY_LEVEL + 1)}[{unparse_node(node.index)}]"
    if isinstance(node, Call):
        return f"{node.fn}(" + ", ".join(unparse_node(a) for a in node.args) + ")"
    if isinstance(node, Unary):
        return node.op + _wrap(node.operand, _UNARY_LEVEL)
    if isinstance(node, Binary):
        level = _LEVEL[node.op]
        return f"{_wrap(node.left, level)} {node.op} {_wrap(node.right, level + 1)}"
    raise TypeError(f"not an AST node: {node!r}")


def unparse(program: Program) -> str:
    parts = [f"let {b.name} = {unparse_node(b.value)};" for b in program.lets]
    parts.append(unparse_node(program.body))
    return " ".join(parts)
