"""
Arithmetic expressions over time, state and control with exact derivatives.

Expressions are parsed with lark into a small immutable AST and evaluated by
forward-mode propagation of second-order jets (value, gradient, Hessian) over
the joint variable vector (x_1..x_n, u_1..u_m). Time is a plain parameter.
"""
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from lark import Lark, Transformer, v_args
from lark.exceptions import UnexpectedCharacters, UnexpectedEOF, UnexpectedToken, VisitError

from .exceptions import (
    DomainError,
    ExpressionSyntaxError,
    IndexOutOfRange,
    UnknownIdentifier,
)

logger = logging.getLogger(__name__)

GRAMMAR = r"""
?start: sum

?sum: product
    | sum "+" product      -> add
    | sum "-" product      -> sub

?product: unary
    | product "*" unary    -> mul
    | product "/" unary    -> div

?unary: power
    | "-" unary            -> neg

?power: atom
    | atom "^" exponent    -> pow

exponent: INT              -> pos_exponent
    | "-" INT              -> neg_exponent

?atom: NUMBER              -> number
    | NAME "(" [arguments] ")" -> call
    | NAME                 -> name
    | "(" sum ")"

arguments: sum ("," sum)*

%import common.INT
%import common.NUMBER
%import common.CNAME -> NAME
%import common.WS
%ignore WS
"""

_PARSER = Lark(GRAMMAR, parser="lalr", maybe_placeholders=True, propagate_positions=True)

FUNCTIONS = {"exp": 1, "ln": 1, "sqrt": 1, "sin": 1, "cos": 1, "max2": 2}
_VARIABLE = re.compile(r"^([xu])(\d+)$")


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # "t", "x" or "u"
    index: int = 0  # 1-based for x and u


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * /
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    args: Tuple["Node", ...]


Node = Union[Const, Var, Binary, Neg, Pow, Call]


@dataclass(frozen=True)
class ExprAst:
    root: Node
    n: int
    m: int

    def __str__(self):
        return serialize(self)


class _AstBuilder(Transformer):
    def __init__(self, n, m):
        super().__init__()
        self.n = n
        self.m = m

    def number(self, children):
        return Const(float(children[0]))

    def name(self, children):
        token = children[0]
        ident = str(token)
        if ident == "t":
            return Var("t")
        match = _VARIABLE.match(ident)
        if not match:
            raise UnknownIdentifier(ident)
        kind, index = match.group(1), int(match.group(2))
        limit = self.n if kind == "x" else self.m
        if not 1 <= index <= limit:
            raise IndexOutOfRange(ident, limit)
        return Var(kind, index)

    def call(self, children):
        token, args = children
        func = str(token)
        if func not in FUNCTIONS:
            raise UnknownIdentifier(func)
        args = tuple(args or ())
        arity = FUNCTIONS[func]
        if len(args) != arity:
            raise ExpressionSyntaxError(token.start_pos, {f"{arity} argument(s) for {func}"})
        return Call(func, args)

    def arguments(self, children):
        return list(children)

    @v_args(inline=True)
    def add(self, left, right):
        return Binary("+", left, right)

    @v_args(inline=True)
    def sub(self, left, right):
        return Binary("-", left, right)

    @v_args(inline=True)
    def mul(self, left, right):
        return Binary("*", left, right)

    @v_args(inline=True)
    def div(self, left, right):
        return Binary("/", left, right)

    @v_args(inline=True)
    def neg(self, operand):
        return Neg(operand)

    @v_args(inline=True)
    def pow(self, base, exponent):
        return Pow(base, exponent)

    @v_args(inline=True)
    def pos_exponent(self, token):
        return int(token)

    @v_args(inline=True)
    def neg_exponent(self, token):
        return -int(token)


def parse_expression(src: str, n: int, m: int = 0) -> ExprAst:
    """Parse ``src`` into an :class:`ExprAst` over t, x1..xn, u1..um."""
    try:
        tree = _PARSER.parse(src)
    except UnexpectedToken as exc:
        position = len(src) if exc.token.type == "$END" else exc.token.start_pos
        raise ExpressionSyntaxError(position, exc.expected, src) from None
    except UnexpectedCharacters as exc:
        raise ExpressionSyntaxError(exc.pos_in_stream, exc.allowed or (), src) from None
    except UnexpectedEOF as exc:
        raise ExpressionSyntaxError(len(src), exc.expected, src) from None
    try:
        root = _AstBuilder(n, m).transform(tree)
    except VisitError as exc:
        if isinstance(exc.orig_exc, ExpressionSyntaxError):
            raise ExpressionSyntaxError(exc.orig_exc.position, exc.orig_exc.expected, src) from None
        raise exc.orig_exc from None
    return ExprAst(root, n, m)


# --- serialization ---------------------------------------------------------

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def _precedence(node):
    if isinstance(node, Binary):
        return _PRECEDENCE[node.op]
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Pow):
        return 4
    return 5


def _format(node) -> str:
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        return "t" if node.kind == "t" else f"{node.kind}{node.index}"
    if isinstance(node, Binary):
        prec = _PRECEDENCE[node.op]
        left = _format(node.left)
        right = _format(node.right)
        if _precedence(node.left) < prec:
            left = f"({left})"
        if _precedence(node.right) <= prec:
            right = f"({right})"
        return f"{left} {node.op} {right}"
    if isinstance(node, Neg):
        inner = _format(node.operand)
        if _precedence(node.operand) < 3:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        base = _format(node.base)
        if _precedence(node.base) < 5:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_format(arg) for arg in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def serialize(ast: Union[ExprAst, Node]) -> str:
    root = ast.root if isinstance(ast, ExprAst) else ast
    return _format(root)


def contains_max2(node) -> bool:
    if isinstance(node, ExprAst):
        node = node.root
    if isinstance(node, Call):
        return node.func == "max2" or any(contains_max2(arg) for arg in node.args)
    if isinstance(node, Binary):
        return contains_max2(node.left) or contains_max2(node.right)
    if isinstance(node, Neg):
        return contains_max2(node.operand)
    if isinstance(node, Pow):
        return contains_max2(node.base)
    return False


# --- jets ------------------------------------------------------------------

class Jet:
    """Second-order truncated Taylor expansion in ``dim`` variables."""

    __slots__ = ("val", "grad", "hess")

    def __init__(self, val, grad=None, hess=None):
        self.val = val
        self.grad = grad
        self.hess = hess

    def apply(self, fval, d1, d2):
        """Chain rule for a scalar function with derivatives d1, d2 at self.val."""
        grad = hess = None
        if self.grad is not None:
            grad = d1 * self.grad
        if self.hess is not None:
            hess = d1 * self.hess + d2 * np.outer(self.grad, self.grad)
        return Jet(fval, grad, hess)


class _Evaluator:
    def __init__(self, t, x, u, order, n, m):
        self.t = float(t)
        self.x = x
        self.u = u
        self.order = order
        self.dim = n + m
        self.n = n

    def constant(self, value):
        grad = np.zeros(self.dim) if self.order >= 1 else None
        hess = np.zeros((self.dim, self.dim)) if self.order >= 2 else None
        return Jet(float(value), grad, hess)

    def variable(self, node):
        if node.kind == "t":
            return self.constant(self.t)
        slot = node.index - 1 if node.kind == "x" else self.n + node.index - 1
        value = self.x[node.index - 1] if node.kind == "x" else self.u[node.index - 1]
        jet = self.constant(value)
        if jet.grad is not None:
            jet.grad[slot] = 1.0
        return jet

    def __call__(self, node) -> Jet:
        if isinstance(node, Const):
            return self.constant(node.value)
        if isinstance(node, Var):
            return self.variable(node)
        if isinstance(node, Neg):
            a = self(node.operand)
            return Jet(-a.val,
                       None if a.grad is None else -a.grad,
                       None if a.hess is None else -a.hess)
        if isinstance(node, Binary):
            return self.binary(node)
        if isinstance(node, Pow):
            return self.power(node)
        return self.call(node)

    def binary(self, node):
        a = self(node.left)
        b = self(node.right)
        op = node.op
        if op == "+" or op == "-":
            sign = 1.0 if op == "+" else -1.0
            return Jet(a.val + sign * b.val,
                       None if a.grad is None else a.grad + sign * b.grad,
                       None if a.hess is None else a.hess + sign * b.hess)
        if op == "*":
            grad = hess = None
            if a.grad is not None:
                grad = a.val * b.grad + b.val * a.grad
            if a.hess is not None:
                cross = np.outer(a.grad, b.grad)
                hess = a.val * b.hess + b.val * a.hess + cross + cross.T
            return Jet(a.val * b.val, grad, hess)
        if b.val == 0.0:
            raise DomainError(serialize(node), b.val)
        q = a.val / b.val
        grad = hess = None
        if a.grad is not None:
            grad = (a.grad - q * b.grad) / b.val
        if a.hess is not None:
            cross = np.outer(grad, b.grad)
            hess = (a.hess - q * b.hess - cross - cross.T) / b.val
        return Jet(q, grad, hess)

    def power(self, node):
        a = self(node.base)
        k = node.exponent
        if k == 0:
            return self.constant(1.0)
        if a.val == 0.0 and k < 0:
            raise DomainError(serialize(node), a.val)
        value = a.val ** k
        d1 = k * a.val ** (k - 1)
        d2 = 0.0 if k == 1 else k * (k - 1) * a.val ** (k - 2)
        return a.apply(value, d1, d2)

    def call(self, node):
        if node.func == "max2":
            a = self(node.args[0])
            b = self(node.args[1])
            return a if a.val >= b.val else b
        a = self(node.args[0])
        v = a.val
        func = node.func
        if func == "exp":
            e = math.exp(v)
            return a.apply(e, e, e)
        if func == "ln":
            if v <= 0.0:
                raise DomainError(serialize(node), v)
            return a.apply(math.log(v), 1.0 / v, -1.0 / (v * v))
        if func == "sqrt":
            if v < 0.0 or (v == 0.0 and self.order >= 1):
                raise DomainError(serialize(node), v)
            s = math.sqrt(v)
            if self.order == 0:
                return Jet(s)
            return a.apply(s, 0.5 / s, -0.25 / (s * s * s))
        if func == "sin":
            return a.apply(math.sin(v), math.cos(v), -math.sin(v))
        if func == "cos":
            return a.apply(math.cos(v), -math.sin(v), -math.cos(v))
        raise UnknownIdentifier(func)


# --- fields ----------------------------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """Differentiable scalar function of (t, x, u) backed by a parsed expression."""

    ast: ExprAst
    source: str = ""
    label: str = ""
    differentiability: int = 2

    @property
    def n(self):
        return self.ast.n

    @property
    def m(self):
        return self.ast.m

    @property
    def smooth(self):
        return not contains_max2(self.ast)

    def jet(self, t, x, u=None, order=0) -> Jet:
        if order > self.differentiability:
            raise ValueError(f"order {order} exceeds the declared differentiability of {self.label or self.source}")
        x = np.asarray(x, dtype=float)
        u = np.zeros(0) if u is None else np.asarray(u, dtype=float)
        return _Evaluator(t, x, u, order, self.n, self.m)(self.ast.root)

    def value(self, t, x, u=None) -> float:
        return self.jet(t, x, u, 0).val

    def variables(self) -> Tuple[str, ...]:
        """Identifiers referenced by the expression, sorted as t, x1.., u1.."""
        found = set()
        stack = [self.ast.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Var):
                found.add((node.kind, node.index))
            elif isinstance(node, Neg):
                stack.append(node.operand)
            elif isinstance(node, Binary):
                stack.extend((node.left, node.right))
            elif isinstance(node, Pow):
                stack.append(node.base)
            elif isinstance(node, Call):
                stack.extend(node.args)
        order = {"t": 0, "x": 1, "u": 2}
        return tuple(
            "t" if kind == "t" else f"{kind}{index}"
            for kind, index in sorted(found, key=lambda item: (order[item[0]], item[1] or 0))
        )

    def __str__(self):
        return self.source or serialize(self.ast)


def parse_field(src: str, n: int, m: int = 0, label: str = "", differentiability: int = 2) -> ScalarField:
    ast = parse_expression(src, n, m)
    return ScalarField(ast=ast, source=src, label=label, differentiability=differentiability)


def eval_with_derivatives(field: ScalarField, t, x, u=None, order: int = 0):
    """Return ``(value, grad_x, hess_x)``; derivatives are ``None`` unless requested."""
    jet = field.jet(t, x, u, order)
    n = field.n
    grad_x = None if jet.grad is None else jet.grad[:n].copy()
    hess_x = None if jet.hess is None else jet.hess[:n, :n].copy()
    return jet.val, grad_x, hess_x


def grad_u(field: ScalarField, t, x, u):
    """Return ``(grad_u, hess_ux)`` with shapes (m,) and (m, n)."""
    jet = field.jet(t, x, u, 2)
    n = field.n
    return jet.grad[n:].copy(), jet.hess[n:, :n].copy()


@dataclass(frozen=True)
class VectorField:
    """Vector of scalar fields sharing the same (n, m) signature."""

    components: Tuple[ScalarField, ...] = field(default_factory=tuple)

    @property
    def n(self):
        return self.components[0].n

    @property
    def m(self):
        return self.components[0].m

    def __len__(self):
        return len(self.components)

    def value(self, t, x, u=None) -> np.ndarray:
        return np.array([c.value(t, x, u) for c in self.components])

    def jacobians(self, t, x, u=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (value, d/dx, d/du) with shapes (k,), (k, n), (k, m)."""
        n = self.n
        jets = [c.jet(t, x, u, 1) for c in self.components]
        value = np.array([j.val for j in jets])
        grads = np.array([j.grad for j in jets]).reshape(len(jets), -1)
        return value, grads[:, :n], grads[:, n:]


def parse_vector(sources, n: int, m: int = 0, label: str = "f") -> VectorField:
    return VectorField(tuple(
        parse_field(src, n, m, label=f"{label}{i + 1}") for i, src in enumerate(sources)
    ))


def zero_field(n: int, m: int = 0) -> ScalarField:
    return parse_field("0", n, m, label="zero")


def optional_field(src: Optional[str], n: int, m: int = 0, label: str = "") -> ScalarField:
    return parse_field(src if src else "0", n, m, label=label)
