"""Small arithmetic expression language for coefficients and sources.

Grammar (highest precedence first)::

    atom    := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'
    power   := atom ['^' unary]             (right associative)
    unary   := '-' unary | '+' unary | power
    term    := unary (('*' | '/') unary)*
    expr    := term (('+' | '-') term)*

Evaluation accepts scalars or numpy arrays as bindings, so the same
expression is used for single-point checks and for vectorised sampling at
quadrature points.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprSyntaxError",
    "ExprEvalError",
    "FUNCTIONS",
    "parse",
    "evaluate",
    "eval_expr",
    "free_names",
    "to_string",
]

BUILTIN_CONSTANTS = {"pi": math.pi}
FUNCTIONS = ("sin", "cos", "exp", "sqrt", "abs")


class ExprSyntaxError(ValueError):
    """Raised on malformed input; ``offset`` is the byte offset of the fault."""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at offset {offset}")


class ExprEvalError(ArithmeticError):
    """Unbound identifier, division by zero or sqrt of a negative number."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Call]

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos), text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), _byte_offset(text, pos)))
        pos = m.end()
    tokens.append(("end", "", _byte_offset(text, len(text))))
    return tokens


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        kind, val, off = self.take()
        if val != value or kind != "op":
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", off, self.text)

    def parse(self) -> Expr:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off, self.text)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {val!r}", off, self.text)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", off, self.text)


def parse(text: str) -> Expr:
    """Parse ``text`` into an immutable expression tree."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text or "")
    return _Parser(text).parse()


def free_names(e: Expr) -> set[str]:
    """Identifiers that must be bound (builtin constants excluded)."""
    if isinstance(e, Var):
        return set() if e.name in BUILTIN_CONSTANTS else {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, Neg):
        return free_names(e.operand)
    if isinstance(e, Call):
        return free_names(e.arg)
    return free_names(e.left) | free_names(e.right)


def _lookup(name: str, bindings: Mapping[str, object]):
    if name in bindings:
        return bindings[name]
    if name in BUILTIN_CONSTANTS:
        return BUILTIN_CONSTANTS[name]
    raise ExprEvalError(f"unbound identifier {name!r}")


def _eval(e: Expr, b: Mapping[str, object]):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return _lookup(e.name, b)
    if isinstance(e, Neg):
        return -_eval(e.operand, b)
    if isinstance(e, Call):
        x = _eval(e.arg, b)
        if e.func == "sqrt" and np.any(np.asarray(x) < 0):
            raise ExprEvalError("sqrt of negative number")
        if np.ndim(x) == 0:
            try:
                return _SCALAR_FUNCS[e.func](float(x))
            except OverflowError as exc:
                raise ExprEvalError(f"{e.func}: {exc}") from None
        return _UFUNCS[e.func](x)
    left = _eval(e.left, b)
    right = _eval(e.right, b)
    op = e.op
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    if op == "/":
        if np.any(np.asarray(right) == 0):
            raise ExprEvalError("division by zero")
        return left / right
    if np.ndim(left) == 0 and np.ndim(right) == 0:
        try:
            return math.pow(float(left), float(right))
        except (ValueError, OverflowError) as exc:
            raise ExprEvalError(f"invalid power: {exc}") from None
    with np.errstate(all="raise"):
        try:
            return np.power(np.asarray(left, dtype=float), right)
        except FloatingPointError as exc:
            raise ExprEvalError(f"invalid power: {exc}") from None


_UFUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt, "abs": np.abs}
# Scalars go through libm so that scalar results do not depend on numpy's
# vectorised (not always correctly rounded) implementations.
_SCALAR_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp, "sqrt": math.sqrt, "abs": abs}


def evaluate(e: Expr, bindings: Mapping[str, object] | None = None):
    """Evaluate over scalars or broadcastable numpy arrays."""
    with np.errstate(over="ignore"):
        out = _eval(e, bindings or {})
    return out


def eval_expr(e: Expr, bindings: Mapping[str, float] | None = None) -> float:
    """Scalar evaluation returning a Python float."""
    return float(evaluate(e, bindings))


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def to_string(e: Expr) -> str:
    """Render with enough parentheses that ``parse(to_string(e))`` is equivalent."""
    if isinstance(e, Num):
        r = repr(e.value)
        return r if e.value >= 0 else f"({r})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_string(e.operand)})"
    if isinstance(e, Call):
        return f"{e.func}({to_string(e.arg)})"
    return f"({to_string(e.left)} {e.op} {to_string(e.right)})"
