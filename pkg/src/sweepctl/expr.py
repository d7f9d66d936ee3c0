"""Arithmetic expressions over named variables with exact differentiation.

Grammar accepted by :func:`parse`::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := base ('^' integer)?
    base   := number | ident | func '(' expr ')' | '(' expr ')'
    func   := 'exp' | 'log' | 'sqrt' | 'sin' | 'cos' | 'neg'

There is no unary minus; negation is spelled ``neg(...)`` and exponents are
integer literals.  Expressions are immutable trees.  Differentiation is exact
(no numerical approximation), memoized per node and variable, and simplifies
only by constant folding and zero/one elimination so printed results stay
within the grammar above.
"""

from __future__ import annotations

import math
import re
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr",
    "ExprError",
    "ExprSyntaxError",
    "ExprNameError",
    "ExprDomainError",
    "parse",
    "evaluate",
    "differentiate",
    "gradient",
    "compile_exprs",
    "FUNCTIONS",
]

FUNCTIONS = ("exp", "log", "sqrt", "sin", "cos", "neg")


class ExprError(ValueError):
    """Base class for expression failures."""


class ExprSyntaxError(ExprError):
    """Malformed source text; carries the 0-based offset of the failure."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class ExprNameError(ExprError):
    """Unknown variable or function name."""


class ExprDomainError(ExprError):
    """Evaluation left the domain: division by zero, log/sqrt of bad input."""


def _any(flag) -> bool:
    # works for scalars and arrays alike
    return bool(np.any(flag))


class Expr:
    """Immutable expression node."""

    __slots__ = ("_dcache", "_vars")

    #: printing precedence: 1 add/sub, 2 mul/div, 3 pow, 4 atom
    precedence = 4

    def eval(self, env: Mapping[str, object]):
        raise NotImplementedError

    def _diff(self, var: str) -> "Expr":
        raise NotImplementedError

    def diff(self, var: str) -> "Expr":
        """Exact derivative with respect to ``var`` (memoized)."""
        cache = getattr(self, "_dcache", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_dcache", cache)
        # benign race under concurrent calls: both threads build equal trees
        hit = cache.get(var)
        if hit is None:
            hit = self._diff(var)
            cache[var] = hit
        return hit

    @property
    def free_vars(self) -> frozenset:
        got = getattr(self, "_vars", None)
        if got is None:
            got = self._free_vars()
            object.__setattr__(self, "_vars", got)
        return got

    def _free_vars(self) -> frozenset:
        raise NotImplementedError

    def to_source(self, backend: str = "m") -> str:
        """Python source for this expression; functions prefixed by ``backend``."""
        raise NotImplementedError

    def __str__(self) -> str:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        object.__setattr__(self, "value", float(value))

    def eval(self, env):
        return self.value

    def _diff(self, var):
        return _ZERO

    def _free_vars(self):
        return frozenset()

    def to_source(self, backend="m"):
        return repr(self.value)

    def __str__(self):
        if self.value < 0:
            return f"neg({-self.value!r})"
        return repr(self.value)


class Var(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str):
        object.__setattr__(self, "name", name)

    def eval(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise ExprNameError(f"unbound variable {self.name!r}") from None

    def _diff(self, var):
        return _ONE if var == self.name else _ZERO

    def _free_vars(self):
        return frozenset((self.name,))

    def to_source(self, backend="m"):
        return self.name

    def __str__(self):
        return self.name


class _Binary(Expr):
    __slots__ = ("left", "right")
    op = "?"

    def __init__(self, left: Expr, right: Expr):
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def _free_vars(self):
        return self.left.free_vars | self.right.free_vars

    def _wrap(self, side: Expr, tight: bool, backend=None) -> str:
        text = side.to_source(backend) if backend is not None else str(side)
        need = side.precedence < self.precedence or (
            tight and side.precedence == self.precedence
        )
        return f"({text})" if need else text

    def to_source(self, backend="m"):
        a = self._wrap(self.left, False, backend)
        b = self._wrap(self.right, True, backend)
        return f"{a} {self.op} {b}"

    def __str__(self):
        return f"{self._wrap(self.left, False)} {self.op} {self._wrap(self.right, True)}"


class Add(_Binary):
    __slots__ = ()
    op = "+"
    precedence = 1

    def eval(self, env):
        return self.left.eval(env) + self.right.eval(env)

    def _diff(self, var):
        return add(self.left.diff(var), self.right.diff(var))

    def to_source(self, backend="m"):
        # '+' is associative; no tight parens on the right
        return f"{self._wrap(self.left, False, backend)} + {self._wrap(self.right, False, backend)}"

    def __str__(self):
        return f"{self._wrap(self.left, False)} + {self._wrap(self.right, False)}"


class Sub(_Binary):
    __slots__ = ()
    op = "-"
    precedence = 1

    def eval(self, env):
        return self.left.eval(env) - self.right.eval(env)

    def _diff(self, var):
        return sub(self.left.diff(var), self.right.diff(var))


class Mul(_Binary):
    __slots__ = ()
    op = "*"
    precedence = 2

    def eval(self, env):
        return self.left.eval(env) * self.right.eval(env)

    def _diff(self, var):
        u, v = self.left, self.right
        return add(mul(u.diff(var), v), mul(u, v.diff(var)))

    def to_source(self, backend="m"):
        return f"{self._wrap(self.left, False, backend)} * {self._wrap(self.right, False, backend)}"

    def __str__(self):
        return f"{self._wrap(self.left, False)} * {self._wrap(self.right, False)}"


class Div(_Binary):
    __slots__ = ()
    op = "/"
    precedence = 2

    def eval(self, env):
        den = self.right.eval(env)
        if _any(den == 0):
            raise ExprDomainError(f"division by zero in {self}")
        return self.left.eval(env) / den

    def _diff(self, var):
        u, v = self.left, self.right
        num = sub(mul(u.diff(var), v), mul(u, v.diff(var)))
        return Div(num, Pow(v, 2))


class Pow(Expr):
    """Integer power ``base^n``; ``n`` is a constant Python int."""

    __slots__ = ("base", "exponent")
    precedence = 3

    def __init__(self, base: Expr, exponent: int):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "exponent", int(exponent))

    def eval(self, env):
        b = self.base.eval(env)
        if self.exponent < 0 and _any(b == 0):
            raise ExprDomainError(f"zero raised to negative power in {self}")
        return b ** self.exponent

    def _diff(self, var):
        n = self.exponent
        inner = self.base.diff(var)
        return mul(mul(Const(n), pow_(self.base, n - 1)), inner)

    def _free_vars(self):
        return self.base.free_vars

    def to_source(self, backend="m"):
        b = self.base.to_source(backend)
        if self.base.precedence < 4:
            b = f"({b})"
        return f"{b}**{self.exponent}"

    def __str__(self):
        b = str(self.base)
        if self.base.precedence < 4:
            b = f"({b})"
        return f"{b}^{self.exponent}"


class Neg(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        object.__setattr__(self, "arg", arg)

    def eval(self, env):
        return -self.arg.eval(env)

    def _diff(self, var):
        return neg(self.arg.diff(var))

    def _free_vars(self):
        return self.arg.free_vars

    def to_source(self, backend="m"):
        return f"(-({self.arg.to_source(backend)}))"

    def __str__(self):
        return f"neg({self.arg})"


class Func(Expr):
    """One of exp/log/sqrt/sin/cos applied to a subexpression."""

    __slots__ = ("name", "arg")

    def __init__(self, name: str, arg: Expr):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "arg", arg)

    def eval(self, env):
        x = self.arg.eval(env)
        name = self.name
        if name == "exp":
            return np.exp(x)
        if name == "log":
            if _any(x <= 0):
                raise ExprDomainError(f"log of non-positive argument in {self}")
            return np.log(x)
        if name == "sqrt":
            if _any(x < 0):
                raise ExprDomainError(f"sqrt of negative argument in {self}")
            return np.sqrt(x)
        if name == "sin":
            return np.sin(x)
        return np.cos(x)

    def _diff(self, var):
        u = self.arg
        du = u.diff(var)
        name = self.name
        if name == "exp":
            return mul(self, du)
        if name == "log":
            return Div(du, u)
        if name == "sqrt":
            return Div(du, mul(Const(2.0), self))
        if name == "sin":
            return mul(Func("cos", u), du)
        return neg(mul(Func("sin", u), du))

    def _free_vars(self):
        return self.arg.free_vars

    def to_source(self, backend="m"):
        return f"{backend}.{self.name}({self.arg.to_source(backend)})"

    def __str__(self):
        return f"{self.name}({self.arg})"


_ZERO = Const(0.0)
_ONE = Const(1.0)


def _is_const(e: Expr, value: float | None = None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


# ---------------------------------------------------------------------------
# smart constructors: constant folding and zero/one elimination only
# ---------------------------------------------------------------------------


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Mul(a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def pow_(base: Expr, exponent: int) -> Expr:
    exponent = int(exponent)
    if exponent == 0:
        return _ONE
    if exponent == 1:
        return base
    if isinstance(base, Const) and (base.value != 0 or exponent > 0):
        return Const(base.value ** exponent)
    return Pow(base, exponent)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        m = _TOKEN.match(source, pos)
        if m is None:
            # skip leading whitespace manually to report a clean offset
            at = pos
            while at < n and source[at].isspace():
                at += 1
            if at >= n:
                break
            raise ExprSyntaxError(f"unexpected character {source[at]!r}", at)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str, allowed_vars: Iterable[str]):
        self.source = source
        self.allowed = frozenset(allowed_vars)
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, symbol: str):
        kind, text, pos = self.take()
        if kind != "op" or text != symbol:
            raise ExprSyntaxError(f"expected {symbol!r}", pos)

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected trailing input {text!r}", pos)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.take()
                rhs = self.term()
                e = Add(e, rhs) if text == "+" else Sub(e, rhs)
            else:
                return e

    def term(self) -> Expr:
        e = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.take()
                rhs = self.factor()
                e = Mul(e, rhs) if text == "*" else Div(e, rhs)
            else:
                return e

    def factor(self) -> Expr:
        e = self.base()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.take()
            e = Pow(e, self.integer())
        return e

    def integer(self) -> int:
        sign = 1
        kind, text, pos = self.take()
        if kind == "op" and text == "-":
            sign = -1
            kind, text, pos = self.take()
        if kind != "num":
            raise ExprSyntaxError("expected integer exponent", pos)
        if not re.fullmatch(r"\d+", text):
            raise ExprSyntaxError("exponent must be an integer literal", pos)
        return sign * int(text)

    def base(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Const(float(text))
        if kind == "ident":
            nkind, ntext, _ = self.peek()
            if nkind == "op" and ntext == "(":
                if text == "neg":
                    self.take()
                    inner = self.expr()
                    self.expect_op(")")
                    return Neg(inner)
                if text in FUNCTIONS:
                    self.take()
                    inner = self.expr()
                    self.expect_op(")")
                    return Func(text, inner)
                raise ExprNameError(f"unknown function {text!r} (at offset {pos})")
            if text in self.allowed:
                return Var(text)
            raise ExprNameError(f"unknown variable {text!r} (at offset {pos})")
        if kind == "op" and text == "(":
            inner = self.expr()
            self.expect_op(")")
            return inner
        if kind == "end":
            raise ExprSyntaxError("unexpected end of input", pos)
        raise ExprSyntaxError(f"unexpected token {text!r}", pos)


def parse(source: str, allowed_vars: Sequence[str]) -> Expr:
    """Parse ``source`` into an Expr; only names in ``allowed_vars`` may appear."""
    return _Parser(source, allowed_vars).parse()


def evaluate(e: Expr, env: Mapping[str, object]):
    """Evaluate ``e``; values in ``env`` may be scalars or numpy arrays."""
    return e.eval(env)


def differentiate(e: Expr, var: str) -> Expr:
    """Exact symbolic derivative of ``e`` with respect to ``var``."""
    return e.diff(var)


def gradient(e: Expr, variables: Sequence[str]) -> list[Expr]:
    return [e.diff(v) for v in variables]


class _MathBackend:
    """math-module backend; plain '-' wrapped exp for scalar speed."""

    exp = staticmethod(math.exp)
    log = staticmethod(math.log)
    sqrt = staticmethod(math.sqrt)
    sin = staticmethod(math.sin)
    cos = staticmethod(math.cos)


SCALAR_BACKEND = _MathBackend
ARRAY_BACKEND = np

_compile_counter = 0


def compile_exprs(exprs: Sequence[Expr], argnames: Sequence[str], name: str = "compiled"):
    """Compile expressions into one function ``fn(backend, *args) -> tuple``.

    ``backend`` supplies exp/log/sqrt/sin/cos (``SCALAR_BACKEND`` for floats,
    ``ARRAY_BACKEND`` for numpy arrays).  The compiled code performs no domain
    checking; callers own that trade-off on hot paths.
    """
    global _compile_counter
    _compile_counter += 1
    fname = f"_{name}_{_compile_counter}"
    args = ", ".join(argnames)
    body = ", ".join(e.to_source("m") for e in exprs)
    if len(exprs) == 1:
        body += ","
    source = f"def {fname}(m, {args}):\n    return ({body})\n" if argnames else (
        f"def {fname}(m):\n    return ({body})\n"
    )
    scope: dict = {}
    exec(source, scope)  # noqa: S102 - source is generated from validated Expr trees
    fn = scope[fname]
    fn.__source__ = source
    return fn
