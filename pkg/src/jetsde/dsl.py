"""Expression language for SDE coefficients, curves, maps and metrics.

Grammar, lowest to highest precedence::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := ("-" | "+") unary | power
    power   := atom ("^" unary)?          # right associative
    atom    := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Evaluation is polymorphic: the same tree walk runs over floats, numpy arrays
(vectorised over sample points) or :class:`~jetsde.jetcore.Jet2` values, so
first and second derivatives always come from jet arithmetic.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from ._domain import require
from .errors import ArityError, ExprSyntaxError, UnknownSymbol
from .jetcore import ELEMENTARY, Jet2, JetPoint, jet_apply

__all__ = [
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "SymbolTable",
    "Expr",
    "parse",
    "eval_real",
    "eval_jet",
    "to_text",
    "jet_of_map",
]

# AST ------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Node", ...]


Node = Union[Num, Var, Neg, BinOp, Call]

FUNCTIONS = {name: 1 for name in ELEMENTARY} | {"pow": 2}
# Not twice differentiable, so jets cannot carry them.
REJECTED = {"abs", "min", "max", "sign", "floor", "ceil", "round"}
BUILTIN_CONSTANTS = {"pi": math.pi}


@dataclass(frozen=True)
class SymbolTable:
    """Names an expression may refer to."""

    states: tuple[str, ...]
    drivers: tuple[str, ...] = ()
    time: str | None = "t"
    constants: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "drivers", tuple(self.drivers))
        object.__setattr__(self, "constants", dict(self.constants))
        names = list(self.states) + list(self.drivers) + list(self.constants)
        if self.time is not None:
            names.append(self.time)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate names in symbol table: {names}")
        if not self.states:
            raise ValueError("symbol table needs at least one state name")
        clash = set(names) & (set(FUNCTIONS) | REJECTED)
        if clash:
            raise ValueError(f"names shadow built-in functions: {sorted(clash)}")

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def d(self) -> int:
        return len(self.drivers)

    def knows(self, name: str) -> bool:
        return (
            name in self.states
            or name in self.drivers
            or name == self.time
            or name in self.constants
            or name in BUILTIN_CONSTANTS
        )


# Tokenizer --------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind != "ws":
            tokens.append(_Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(_Token("end", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, source: str, symbols: SymbolTable):
        self.tokens = _tokenize(source)
        self.i = 0
        self.symbols = symbols

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def _error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        return ExprSyntaxError(message, tok.line, tok.col)

    def _accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def _expect(self, text: str) -> None:
        if not self._accept(text):
            found = self.tok.text or "end of input"
            raise self._error(f"expected {text!r}, found {found!r}")

    def parse(self) -> Node:
        if self.tok.kind == "end":
            raise self._error("empty expression")
        node = self.expr()
        if self.tok.kind != "end":
            raise self._error(f"unexpected {self.tok.text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self._accept("-"):
            return Neg(self.unary())
        if self._accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self._accept("^"):
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "name":
            self.i += 1
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(tok)
            if tok.text in FUNCTIONS or tok.text in REJECTED:
                raise self._error(f"function {tok.text!r} used without arguments", tok)
            if not self.symbols.knows(tok.text):
                raise UnknownSymbol(
                    f"unknown identifier {tok.text!r} (line {tok.line}, column {tok.col})"
                )
            return Var(tok.text)
        if self._accept("("):
            node = self.expr()
            self._expect(")")
            return node
        found = tok.text or "end of input"
        raise self._error(f"unexpected {found!r}")

    def call(self, name_tok: _Token) -> Node:
        name = name_tok.text
        if name in REJECTED:
            raise UnknownSymbol(
                f"function {name!r} is not twice differentiable and is not supported "
                f"(line {name_tok.line}, column {name_tok.col})"
            )
        if name not in FUNCTIONS:
            raise UnknownSymbol(
                f"unknown function {name!r} (line {name_tok.line}, column {name_tok.col})"
            )
        self._expect("(")
        args = [self.expr()]
        while self._accept(","):
            args.append(self.expr())
        self._expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ArityError(
                f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)} "
                f"(line {name_tok.line}, column {name_tok.col})"
            )
        return Call(name, tuple(args))


def parse(source: str, symbols: SymbolTable) -> Node:
    """Parse ``source`` against ``symbols``; unknown names are rejected here."""
    return _Parser(source, symbols).parse()


# Printing -----------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_NEG_PREC = 3
_ATOM_PREC = 5


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _NEG_PREC
    return _ATOM_PREC


def _wrap(node: Node, parens: bool) -> str:
    text = to_text(node)
    return f"({text})" if parens else text


def to_text(node: Node) -> str:
    """Canonical text; parsing it back yields an equal tree."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return "-" + _wrap(node.operand, _prec(node.operand) < _NEG_PREC)
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_text(a) for a in node.args)})"
    p = _PREC[node.op]
    if node.op == "^":
        left = _wrap(node.left, _prec(node.left) <= p)
        right = _wrap(node.right, _prec(node.right) < _NEG_PREC)
        return f"{left}^{right}"
    left = _wrap(node.left, _prec(node.left) < p)
    right = _wrap(node.right, _prec(node.right) <= p)
    return f"{left} {node.op} {right}"


# Evaluation -----------------------------------------------------------------------


def _is_const(x) -> bool:
    return not isinstance(x, Jet2) and np.ndim(x) == 0


def _real_div(a, b):
    require(np.asarray(b) != 0, "division by zero", b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.divide(a, b)


def _real_pow(base, exponent):
    base = np.asarray(base, dtype=float)
    exponent = np.asarray(exponent, dtype=float)
    integral = np.equal(np.mod(exponent, 1.0), 0.0)
    ok = (base > 0) | ((base == 0) & (exponent > 0)) | (integral & (base != 0)) | (exponent == 0)
    require(ok, "negative base with fractional exponent (or zero to a negative power)", base)
    with np.errstate(all="ignore"):
        out = np.power(base, exponent)
    return out if out.ndim else float(out)


def _pow(base, exponent):
    if isinstance(exponent, Jet2):
        if isinstance(base, Jet2):
            return base**exponent
        base = np.asarray(base, dtype=float)
        require(base > 0, "variable exponent needs a positive base", base)
        with np.errstate(all="ignore"):
            return jet_apply("exp", exponent * np.log(base))
    if isinstance(base, Jet2):
        if _is_const(exponent):
            return base ** float(exponent)
        # array-valued constant exponent: treat as a constant jet exponent
        return base ** Jet2.constant(exponent, base.d)
    return _real_pow(base, exponent)


def _apply(func: str, args: list):
    if func == "pow":
        return _pow(args[0], args[1])
    (x,) = args
    if isinstance(x, Jet2):
        return jet_apply(func, x)
    f0, _, _, domain, text = ELEMENTARY[func]
    if domain is not None:
        require(domain(np.asarray(x, dtype=float)), text, x)
    with np.errstate(all="ignore"):
        out = f0(x)
    return out if np.ndim(out) else float(out)


def _walk(node: Node, env: Mapping[str, object]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            if node.name in BUILTIN_CONSTANTS:
                return BUILTIN_CONSTANTS[node.name]
            raise UnknownSymbol(f"variable {node.name!r} is not bound") from None
    if isinstance(node, Neg):
        return -_walk(node.operand, env)
    if isinstance(node, Call):
        return _apply(node.func, [_walk(a, env) for a in node.args])
    left = _walk(node.left, env)
    right = _walk(node.right, env)
    op = node.op
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    if op == "/":
        if isinstance(left, Jet2) or isinstance(right, Jet2):
            return (left if isinstance(left, Jet2) else Jet2.constant(left, right.d)) / right
        return _real_div(left, right)
    return _pow(left, right)


def eval_real(node: Node, bindings: Mapping[str, object]):
    """Evaluate over floats or numpy arrays (elementwise)."""
    return _walk(node, bindings)


def eval_jet(node: Node, bindings: Mapping[str, object]) -> Jet2:
    """Evaluate with Jet2 bindings; the result is always a Jet2.

    Bindings may mix jets and plain numbers (constants).  If no binding is a
    jet the result cannot be promoted, so at least one jet is required.
    """
    jets = [v for v in bindings.values() if isinstance(v, Jet2)]
    if not jets:
        raise ValueError("eval_jet needs at least one Jet2 binding")
    out = _walk(node, bindings)
    if isinstance(out, Jet2):
        return out
    return Jet2.constant(np.broadcast_to(out, jets[0].shape), jets[0].d)


def variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Neg):
        return variables(node.operand)
    if isinstance(node, Call):
        return set().union(*(variables(a) for a in node.args))
    return variables(node.left) | variables(node.right)


class Expr:
    """A parsed expression bound to its symbol table (constants included)."""

    __slots__ = ("source", "ast", "symbols")

    def __init__(self, source: str | float, symbols: SymbolTable):
        self.source = str(source)
        self.symbols = symbols
        self.ast = parse(self.source, symbols)

    def _env(self, bindings: Mapping[str, object]) -> dict:
        env = dict(self.symbols.constants)
        env.update(bindings)
        return env

    def eval_real(self, bindings: Mapping[str, object]):
        return eval_real(self.ast, self._env(bindings))

    def eval_jet(self, bindings: Mapping[str, object]) -> Jet2:
        return eval_jet(self.ast, self._env(bindings))

    @property
    def names(self) -> set[str]:
        return variables(self.ast)

    def __str__(self) -> str:
        return to_text(self.ast)

    def __repr__(self) -> str:
        return f"Expr({self.source!r})"


def jet_of_map(exprs: Sequence[Expr], names: Sequence[str], x, extra=None) -> JetPoint:
    """2-jet at ``x`` of the map ``x -> (e(x) for e in exprs)`` in the variables ``names``.

    ``x`` has shape ``batch + (len(names),)``; ``extra`` binds further names
    (time, parameters) as plain values.
    """
    seeds = JetPoint.identity(x)
    env = dict(extra or {})
    env.update(zip(names, seeds.coords()))
    return JetPoint.from_coords([e.eval_jet(env) for e in exprs])
