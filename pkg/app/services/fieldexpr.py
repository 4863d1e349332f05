"""
Text-defined scalar, vector and matrix fields of (t, x).

Expressions use the variables ``t`` and ``x1..xd``, numeric literals, ``pi``,
the operators ``+ - * /`` and integer powers ``^``, and the unary functions
``exp log sin cos sqrt abs sign``. A vector is written ``[e1, e2, ...]``.

Phase-space fields of (t, x, v) additionally use ``v1..vd``; they are stored
as fields of dimension ``2d`` and may be evaluated at complex ``v`` when ``v``
enters polynomially.

Derivatives are exact: they are produced by transforming the expression tree,
never by finite differencing.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from app.core.errors import (
    FieldArityError,
    FieldDomainError,
    FieldNameError,
    FieldSyntaxError,
)

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs", "sign")
CONSTANTS = {"pi": math.pi}


# --------------------------------------------------------------------------
# Expression tree
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Const:
    value: float


@dataclass(frozen=True, slots=True)
class Time:
    pass


@dataclass(frozen=True, slots=True)
class Coord:
    index: int  # 0-based, printed as x{index + 1}


@dataclass(frozen=True, slots=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True, slots=True)
class Add:
    left: "Node"
    right: "Node"


@dataclass(frozen=True, slots=True)
class Sub:
    left: "Node"
    right: "Node"


@dataclass(frozen=True, slots=True)
class Mul:
    left: "Node"
    right: "Node"


@dataclass(frozen=True, slots=True)
class Div:
    left: "Node"
    right: "Node"


@dataclass(frozen=True, slots=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True, slots=True)
class Call:
    name: str
    arg: "Node"


Node = Union[Const, Time, Coord, Neg, Add, Sub, Mul, Div, Pow, Call]

ZERO = Const(0.0)
ONE = Const(1.0)


# Smart constructors. They fold trivial constants only; no rewriting beyond that.


def _is_const(node: Node, value: float | None = None) -> bool:
    return isinstance(node, Const) and (value is None or node.value == value)


def add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return Add(a, b)


def sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    return Sub(a, b)


def mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    return Mul(a, b)


def div(a: Node, b: Node) -> Node:
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return Const(a.value / b.value)
    return Div(a, b)


def neg(a: Node) -> Node:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(a: Node, n: int) -> Node:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const) and (a.value != 0.0 or n > 0):
        return Const(a.value**n)
    return Pow(a, n)


def call(name: str, a: Node) -> Node:
    return Call(name, a)


# --------------------------------------------------------------------------
# Tokenizer and parser
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),\[\]])"
    r")"
)


@dataclass(frozen=True, slots=True)
class _Token:
    kind: str  # number | ident | op | end
    text: str
    position: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise FieldSyntaxError(f"unexpected character {text[bad]!r}", text, bad)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, dim: int, velocities: bool = False):
        self.text = text
        self.dim = dim
        # v1..vd name coordinates d+1..2d of a phase-space field
        self.velocities = velocities
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def peek(self, offset: int = 1) -> _Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        tok = self.tok
        self.i += 1
        return tok

    def error(self, message: str, position: int | None = None, cls=FieldSyntaxError):
        return cls(message, self.text, self.tok.position if position is None else position)

    def expect(self, text: str, opened_at: int | None = None) -> _Token:
        if self.tok.text != text or self.tok.kind != "op":
            if self.tok.kind == "end" and opened_at is not None:
                raise self.error("unclosed parenthesis", opened_at)
            raise self.error(f"expected {text!r}")
        return self.advance()

    # grammar ---------------------------------------------------------

    def parse_top(self) -> tuple[Node, ...] | Node:
        if self.tok.kind == "end":
            raise self.error("empty expression")
        if self.tok.kind == "op" and self.tok.text == "[":
            opened = self.advance().position
            items = [self.parse_expr()]
            while self.tok.text == ",":
                self.advance()
                items.append(self.parse_expr())
            self.expect("]", opened)
            result: tuple[Node, ...] | Node = tuple(items)
        else:
            result = self.parse_expr()
        if self.tok.kind != "end":
            raise self.error(f"unexpected token {self.tok.text!r}")
        return result

    def parse_expr(self) -> Node:
        node = self.parse_term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            rhs = self.parse_term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def parse_term(self) -> Node:
        node = self.parse_unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            rhs = self.parse_unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def parse_unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            # A minus applied to a bare literal is a negative constant.
            if (
                op == "-"
                and self.tok.kind == "number"
                and not (self.peek().kind == "op" and self.peek().text == "^")
            ):
                return Const(-float(self.advance().text))
            operand = self.parse_unary()
            return Neg(operand) if op == "-" else operand
        return self.parse_power()

    def parse_power(self) -> Node:
        node = self.parse_atom()
        while self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            node = Pow(node, self.parse_int_exponent())
        return node

    def parse_int_exponent(self) -> int:
        opened = None
        if self.tok.kind == "op" and self.tok.text == "(":
            opened = self.advance().position
        sign = 1
        if self.tok.kind == "op" and self.tok.text in "+-":
            sign = -1 if self.advance().text == "-" else 1
        if self.tok.kind != "number" or not self.tok.text.isdigit():
            raise self.error("integer exponent required")
        value = sign * int(self.advance().text)
        if opened is not None:
            self.expect(")", opened)
        return value

    def parse_atom(self) -> Node:
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "ident":
            self.advance()
            return self.parse_identifier(tok)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.parse_expr()
            self.expect(")", tok.position)
            return node
        if tok.kind == "end":
            raise self.error("unexpected end of expression")
        raise self.error(f"unexpected token {tok.text!r}")

    def parse_identifier(self, tok: _Token) -> Node:
        name = tok.text
        is_call = self.tok.kind == "op" and self.tok.text == "("
        if name in FUNCTIONS:
            if not is_call:
                raise self.error(f"function {name!r} requires an argument", tok.position)
            opened = self.advance().position
            args = [self.parse_expr()]
            while self.tok.kind == "op" and self.tok.text == ",":
                self.advance()
                args.append(self.parse_expr())
            self.expect(")", opened)
            if len(args) != 1:
                raise FieldArityError(
                    f"function {name!r} takes 1 argument, got {len(args)}",
                    self.text,
                    tok.position,
                )
            return Call(name, args[0])
        if is_call:
            raise FieldNameError(f"unknown function {name!r}", self.text, tok.position)
        if name == "t":
            return Time()
        if name in CONSTANTS:
            return Const(CONSTANTS[name])
        m = re.fullmatch(r"x([1-9]\d*)", name)
        if m and int(m.group(1)) <= self.dim:
            return Coord(int(m.group(1)) - 1)
        m = re.fullmatch(r"v([1-9]\d*)", name)
        if self.velocities and m and int(m.group(1)) <= self.dim:
            return Coord(self.dim + int(m.group(1)) - 1)
        raise FieldNameError(f"unknown identifier {name!r}", self.text, tok.position)


# --------------------------------------------------------------------------
# FieldExpr
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldExpr:
    """An immutable field of (t, x) in dimension ``dim``.

    ``nodes`` holds the flattened components and ``shape`` their layout:
    ``()`` for a scalar, ``(k,)`` for a vector, ``(k, m)`` for a matrix.
    """

    nodes: tuple[Node, ...]
    dim: int
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if int(np.prod(self.shape, dtype=int)) != len(self.nodes):
            raise FieldArityError(
                f"shape {self.shape} does not match {len(self.nodes)} components"
            )

    @property
    def is_scalar(self) -> bool:
        return self.shape == ()

    @property
    def node(self) -> Node:
        if not self.is_scalar:
            raise FieldArityError("scalar field expected")
        return self.nodes[0]

    def component(self, index: int) -> "FieldExpr":
        return FieldExpr((self.nodes[index],), self.dim)

    def components(self) -> list["FieldExpr"]:
        return [self.component(i) for i in range(len(self.nodes))]

    def __call__(self, t, x) -> np.ndarray:
        return eval_field(self, t, x)

    def __str__(self) -> str:
        return to_text(self)

    # Elementwise arithmetic used to assemble derived fields.

    def _combine(self, other, op) -> "FieldExpr":
        if isinstance(other, (int, float)):
            other = constant_field(float(other), self.dim, self.shape)
        if other.is_scalar and not self.is_scalar:
            other = FieldExpr((other.node,) * len(self.nodes), self.dim, self.shape)
        if self.is_scalar and not other.is_scalar:
            return FieldExpr((self.node,) * len(other.nodes), self.dim, other.shape)._combine(other, op)
        if self.shape != other.shape or self.dim != other.dim:
            raise FieldArityError(f"cannot combine shapes {self.shape} and {other.shape}")
        return FieldExpr(
            tuple(op(a, b) for a, b in zip(self.nodes, other.nodes)), self.dim, self.shape
        )

    def __add__(self, other):
        return self._combine(other, add)

    def __sub__(self, other):
        return self._combine(other, sub)

    def __mul__(self, other):
        return self._combine(other, mul)

    def __neg__(self):
        return FieldExpr(tuple(neg(n) for n in self.nodes), self.dim, self.shape)


def constant_field(value, dim: int, shape: tuple[int, ...] = ()) -> FieldExpr:
    values = np.broadcast_to(np.asarray(value, dtype=float), shape)
    return FieldExpr(tuple(Const(float(v)) for v in values.ravel()), dim, shape)


def parse_field(text: str, dim: int) -> FieldExpr:
    """Parse a scalar expression, or a vector written ``[e1, e2, ...]``.

    Raises:
        FieldSyntaxError: malformed text, with the 0-based position.
        FieldNameError: unknown identifier or function.
        FieldArityError: a function called with more than one argument.
    """
    if dim < 1:
        raise FieldArityError(f"dimension must be >= 1, got {dim}")
    parsed = _Parser(text, dim).parse_top()
    if isinstance(parsed, tuple):
        return FieldExpr(parsed, dim, (len(parsed),))
    return FieldExpr((parsed,), dim)


def parse_phase_field(text: str, dim: int) -> FieldExpr:
    """Parse a scalar field of (t, x, v) written with ``x1..xd`` and ``v1..vd``.

    The result has dimension ``2 * dim``: coordinate ``d + i`` is ``v(i+1)``.
    """
    if dim < 1:
        raise FieldArityError(f"dimension must be >= 1, got {dim}")
    parsed = _Parser(text, dim, velocities=True).parse_top()
    if isinstance(parsed, tuple):
        raise FieldArityError("phase-space field must be scalar", text)
    return FieldExpr((parsed,), 2 * dim)


def parse_vector_field(
    source: str | Sequence[str], dim: int, arity: int | None = None
) -> FieldExpr:
    """Parse a vector field from ``"[e1, e2]"`` or a list of scalar expressions."""
    if isinstance(source, str):
        field = parse_field(source, dim)
        if field.is_scalar:
            field = FieldExpr(field.nodes, dim, (1,))
    else:
        nodes = tuple(parse_field(text, dim).node for text in source)
        field = FieldExpr(nodes, dim, (len(nodes),))
    if arity is not None and field.shape != (arity,):
        raise FieldArityError(
            f"expected {arity} components, got {len(field.nodes)}",
            source if isinstance(source, str) else ", ".join(source),
        )
    return field


def parse_matrix_field(rows: Sequence[Sequence[str]], dim: int) -> FieldExpr:
    """Parse a matrix field given row by row."""
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise FieldArityError("matrix rows must have equal length")
    nodes = tuple(parse_field(text, dim).node for row in rows for text in row)
    return FieldExpr(nodes, dim, (len(rows), widths.pop()))


# --------------------------------------------------------------------------
# Printing
# --------------------------------------------------------------------------


def _node_text(node: Node) -> str:
    if isinstance(node, Const):
        text = repr(float(node.value))
        return f"({text})" if math.copysign(1.0, node.value) < 0 else text
    if isinstance(node, Time):
        return "t"
    if isinstance(node, Coord):
        return f"x{node.index + 1}"
    if isinstance(node, Neg):
        inner = _node_text(node.arg)
        # Keep a negated literal distinguishable from a negative constant.
        return f"(-({inner}))" if isinstance(node.arg, Const) else f"(-{inner})"
    if isinstance(node, Pow):
        return f"({_node_text(node.base)}^{node.exponent})"
    if isinstance(node, Call):
        return f"{node.name}({_node_text(node.arg)})"
    op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(node)]
    return f"({_node_text(node.left)} {op} {_node_text(node.right)})"


def to_text(field: FieldExpr) -> str:
    """Canonical fully parenthesised text; re-parses to an equal tree."""
    if field.is_scalar:
        return _node_text(field.node)
    if len(field.shape) == 1:
        return "[" + ", ".join(_node_text(n) for n in field.nodes) + "]"
    rows = np.array(field.nodes, dtype=object).reshape(field.shape)
    return "[" + ", ".join("[" + ", ".join(_node_text(n) for n in row) + "]" for row in rows) + "]"


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def _eval_node(node: Node, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    if isinstance(node, Const):
        return np.full(t.shape, node.value)
    if isinstance(node, Time):
        return t
    if isinstance(node, Coord):
        return x[..., node.index]
    if isinstance(node, Neg):
        return -_eval_node(node.arg, t, x)
    if isinstance(node, Add):
        return _eval_node(node.left, t, x) + _eval_node(node.right, t, x)
    if isinstance(node, Sub):
        return _eval_node(node.left, t, x) - _eval_node(node.right, t, x)
    if isinstance(node, Mul):
        return _eval_node(node.left, t, x) * _eval_node(node.right, t, x)
    if isinstance(node, Div):
        denominator = _real(_eval_node(node.right, t, x))
        if np.any(denominator == 0.0):
            raise FieldDomainError("division by zero")
        return _eval_node(node.left, t, x) / denominator
    if isinstance(node, Pow):
        base = _eval_node(node.base, t, x)
        if node.exponent < 0 and np.any(base == 0.0):
            raise FieldDomainError("division by zero in negative power")
        return base ** float(node.exponent)
    if isinstance(node, Call):
        arg = _real(_eval_node(node.arg, t, x))
        if node.name == "log":
            if np.any(arg <= 0.0):
                raise FieldDomainError("log of a nonpositive value")
            return np.log(arg)
        if node.name == "sqrt":
            if np.any(arg < 0.0):
                raise FieldDomainError("sqrt of a negative value")
            return np.sqrt(arg)
        return _UFUNCS[node.name](arg)
    raise TypeError(f"unknown node {node!r}")


_UFUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "abs": np.abs, "sign": np.sign}


def _real(values: np.ndarray) -> np.ndarray:
    # function arguments and denominators never depend on complex velocities
    return values.real if np.iscomplexobj(values) else values


def eval_field(field: FieldExpr, t, x) -> np.ndarray:
    """Evaluate ``field`` at a batch of points.

    Args:
        field: the expression.
        t: time, scalar or array broadcastable to ``x.shape[:-1]``.
        x: points of shape ``(..., dim)``; a 1-D array of length ``dim`` is a single point.

    Returns:
        Array of shape ``x.shape[:-1] + field.shape``.

    Raises:
        FieldDomainError: a value outside the domain of log/sqrt/division, or any
            non-finite result.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != field.dim:
        raise FieldArityError(f"points must have trailing dimension {field.dim}")
    batch = x.shape[:-1]
    t = np.broadcast_to(np.asarray(t, dtype=float), batch)
    with np.errstate(all="ignore"):
        parts = [_eval_node(node, t, x) for node in field.nodes]
    out = np.stack(parts, axis=-1).reshape(batch + field.shape) if parts else np.zeros(batch)
    if not np.all(np.isfinite(out)):
        raise FieldDomainError("non-finite value")
    return out


def eval_phase_field(field: FieldExpr, t, x, v) -> np.ndarray:
    """Evaluate a field of (t, x, v) at real positions and complex velocities.

    The velocities must enter polynomially (see :func:`velocity_is_polynomial`);
    the result is then the holomorphic extension in ``v``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=complex)
    if x.shape != v.shape or x.ndim == 0 or 2 * x.shape[-1] != field.dim:
        raise FieldArityError(f"positions and velocities must both have trailing dimension {field.dim // 2}")
    batch = x.shape[:-1]
    z = np.concatenate([x.astype(complex), v], axis=-1)
    t = np.broadcast_to(np.asarray(t, dtype=float), batch)
    with np.errstate(all="ignore"):
        parts = [_eval_node(node, t, z) for node in field.nodes]
    out = np.stack(parts, axis=-1).reshape(batch + field.shape).astype(complex)
    if not np.all(np.isfinite(out)):
        raise FieldDomainError("non-finite value")
    return out


# --------------------------------------------------------------------------
# Symbolic derivatives
# --------------------------------------------------------------------------


def diff_node(node: Node, var: int | str) -> Node:
    """Derivative of ``node`` with respect to ``"t"`` or coordinate index ``var``."""
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Time):
        return ONE if var == "t" else ZERO
    if isinstance(node, Coord):
        return ONE if var == node.index else ZERO
    if isinstance(node, Neg):
        return neg(diff_node(node.arg, var))
    if isinstance(node, Add):
        return add(diff_node(node.left, var), diff_node(node.right, var))
    if isinstance(node, Sub):
        return sub(diff_node(node.left, var), diff_node(node.right, var))
    if isinstance(node, Mul):
        a, b = node.left, node.right
        return add(mul(diff_node(a, var), b), mul(a, diff_node(b, var)))
    if isinstance(node, Div):
        a, b = node.left, node.right
        return sub(div(diff_node(a, var), b), div(mul(a, diff_node(b, var)), power(b, 2)))
    if isinstance(node, Pow):
        inner = diff_node(node.base, var)
        return mul(mul(Const(float(node.exponent)), power(node.base, node.exponent - 1)), inner)
    if isinstance(node, Call):
        a = node.arg
        da = diff_node(a, var)
        if _is_const(da, 0.0):
            return ZERO
        if node.name == "exp":
            return mul(node, da)
        if node.name == "log":
            return div(da, a)
        if node.name == "sin":
            return mul(call("cos", a), da)
        if node.name == "cos":
            return neg(mul(call("sin", a), da))
        if node.name == "sqrt":
            return div(da, mul(Const(2.0), node))
        if node.name == "abs":
            return mul(call("sign", a), da)
        if node.name == "sign":
            return ZERO
    raise TypeError(f"unknown node {node!r}")


def _map(field: FieldExpr, fn, shape: tuple[int, ...] | None = None) -> FieldExpr:
    return FieldExpr(tuple(fn(n) for n in field.nodes), field.dim, field.shape if shape is None else shape)


def dt_field(field: FieldExpr) -> FieldExpr:
    """Partial time derivative, same shape as ``field``."""
    return _map(field, lambda n: diff_node(n, "t"))


def grad_field(field: FieldExpr) -> FieldExpr:
    """Spatial gradient of a scalar field (vector of length ``dim``)."""
    node = field.node
    return FieldExpr(tuple(diff_node(node, i) for i in range(field.dim)), field.dim, (field.dim,))


def jacobian_field(field: FieldExpr) -> FieldExpr:
    """Matrix J[i, j] = d f_i / d x_j of a vector field."""
    if len(field.shape) != 1:
        raise FieldArityError("jacobian requires a vector field")
    nodes = tuple(diff_node(n, j) for n in field.nodes for j in range(field.dim))
    return FieldExpr(nodes, field.dim, (field.shape[0], field.dim))


def hessian_field(field: FieldExpr) -> FieldExpr:
    """Matrix of second partial derivatives of a scalar field."""
    grads = [diff_node(field.node, i) for i in range(field.dim)]
    nodes = tuple(diff_node(g, j) for g in grads for j in range(field.dim))
    return FieldExpr(nodes, field.dim, (field.dim, field.dim))


def laplacian_field(field: FieldExpr) -> FieldExpr:
    """Laplacian of a scalar field, or componentwise Laplacian of a vector field."""
    if field.is_scalar:
        return FieldExpr((_laplacian_node(field.node, field.dim),), field.dim)
    return _map(field, lambda n: _laplacian_node(n, field.dim))


def _laplacian_node(node: Node, dim: int) -> Node:
    total: Node = ZERO
    for i in range(dim):
        total = add(total, diff_node(diff_node(node, i), i))
    return total


def divergence_field(field: FieldExpr) -> FieldExpr:
    """Divergence of a vector field (scalar) or row divergence of a matrix field (vector)."""
    if len(field.shape) == 1:
        total: Node = ZERO
        for i, n in enumerate(field.nodes):
            total = add(total, diff_node(n, i))
        return FieldExpr((total,), field.dim)
    rows, cols = field.shape
    if cols != field.dim:
        raise FieldArityError("matrix divergence requires dim columns")
    out = []
    for i in range(rows):
        total = ZERO
        for j in range(cols):
            total = add(total, diff_node(field.nodes[i * cols + j], j))
        out.append(total)
    return FieldExpr(tuple(out), field.dim, (rows,))


def hessian_apply(field: FieldExpr, a: FieldExpr | np.ndarray | float) -> FieldExpr:
    """The contraction a^{ij} d_i d_j f for a scalar field ``f``.

    ``a`` may be a matrix field, a constant matrix or a scalar (meaning ``a * Id``).
    """
    d = field.dim
    if isinstance(a, FieldExpr):
        if a.shape != (d, d):
            raise FieldArityError(f"diffusion matrix must be {d}x{d}")
        entries = a.nodes
    else:
        matrix = np.asarray(a, dtype=float)
        if matrix.ndim == 0:
            matrix = matrix * np.eye(d)
        if matrix.shape != (d, d):
            raise FieldArityError(f"diffusion matrix must be {d}x{d}")
        entries = tuple(Const(float(v)) for v in matrix.ravel())
    grads = [diff_node(field.node, i) for i in range(d)]
    total: Node = ZERO
    for i in range(d):
        for j in range(d):
            total = add(total, mul(entries[i * d + j], diff_node(grads[i], j)))
    return FieldExpr((total,), d)


def matmul_transpose(sigma: FieldExpr) -> FieldExpr:
    """a = sigma sigma^T for a matrix field ``sigma`` of shape (d, m)."""
    rows, cols = sigma.shape
    out = []
    for i in range(rows):
        for j in range(rows):
            total: Node = ZERO
            for k in range(cols):
                total = add(total, mul(sigma.nodes[i * cols + k], sigma.nodes[j * cols + k]))
            out.append(total)
    return FieldExpr(tuple(out), sigma.dim, (rows, rows))


def _walk(node: Node) -> Iterable[Node]:
    yield node
    for child in (getattr(node, name, None) for name in ("arg", "left", "right", "base")):
        if child is not None:
            yield from _walk(child)


def is_constant(field: FieldExpr) -> bool:
    """True when the field depends on neither t nor x."""
    return not any(isinstance(n, (Time, Coord)) for root in field.nodes for n in _walk(root))


def depends_on_time(field: FieldExpr) -> bool:
    return any(isinstance(n, Time) for root in field.nodes for n in _walk(root))


def velocity_is_polynomial(field: FieldExpr) -> bool:
    """True when the velocity slots of a phase-space field appear only under
    ``+ - *``, negation and nonnegative integer powers."""
    d = field.dim // 2

    def has_velocity(node: Node) -> bool:
        return any(isinstance(n, Coord) and n.index >= d for n in _walk(node))

    for root in field.nodes:
        for node in _walk(root):
            if isinstance(node, Call) and has_velocity(node.arg):
                return False
            if isinstance(node, Div) and has_velocity(node.right):
                return False
            if isinstance(node, Pow) and node.exponent < 0 and has_velocity(node.base):
                return False
    return True
