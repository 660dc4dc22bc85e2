"""Small expression language for scalar and vector fields.

Grammar (LL(1), lowest precedence first)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ["^" ["-"] INT]
    atom   := NUMBER | VAR | FUNC "(" expr ")" | "(" expr ")"

Variables are ``x1`` .. ``xn`` (1-indexed). Functions: sin, cos, tan, exp,
log, sqrt. Exponents must be integer literals, and there is no implicit
multiplication (``2x1`` is rejected).

Parsed trees are immutable and can be differentiated symbolically, which is
how nested Lie derivatives stay exact.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import NumericsError, ParseError, UnknownVariableError

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Pow, Call]

ZERO = Num(0.0)
ONE = Num(1.0)


# ---------------------------------------------------------------- lexing

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()])"
)

_ATOM_START = frozenset({"-", "NUMBER", "VARIABLE", "FUNCTION", "("})


@dataclass(frozen=True)
class _Tok:
    kind: str  # NUMBER, VARIABLE, FUNCTION, OP, END
    text: str
    offset: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", pos, _ATOM_START, src)
        kind = m.lastgroup
        text = m.group()
        if kind == "num":
            # reject implicit multiplication such as "2x1"
            if m.end() < len(src) and (src[m.end()].isalpha() or src[m.end()] == "_"):
                raise ParseError("implicit multiplication is not allowed", m.end(),
                                 {"+", "-", "*", "/", "^", ")"}, src)
            toks.append(_Tok("NUMBER", text, pos))
        elif kind == "name":
            if re.fullmatch(r"x[1-9][0-9]*", text):
                toks.append(_Tok("VARIABLE", text, pos))
            elif text in FUNCTIONS:
                toks.append(_Tok("FUNCTION", text, pos))
            else:
                raise ParseError(f"unknown identifier {text!r}", pos, {"VARIABLE", "FUNCTION"}, src)
        elif kind == "op":
            toks.append(_Tok("OP", text, pos))
        pos = m.end()
    toks.append(_Tok("END", "", len(src)))
    return toks


# ---------------------------------------------------------------- parsing

class _Parser:
    def __init__(self, src: str, n: int | None):
        self.src = src
        self.n = n
        self.toks = _tokenize(src)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _is(self, text):
        return self.tok.kind == "OP" and self.tok.text == text

    def _fail(self, expected, message=None):
        t = self.tok
        what = "end of input" if t.kind == "END" else repr(t.text)
        raise ParseError(message or f"unexpected {what}", t.offset, expected, self.src)

    def _expect(self, text):
        if not self._is(text):
            self._fail({text})
        self.i += 1

    def parse(self) -> Expr:
        if self.tok.kind == "END":
            self._fail(_ATOM_START, "empty expression")
        e = self.expr()
        if self.tok.kind != "END":
            self._fail({"+", "-", "*", "/", "^", "END"})
        return e

    def expr(self):
        e = self.term()
        while self._is("+") or self._is("-"):
            op = self.tok.text
            self.i += 1
            e = BinOp(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self._is("*") or self._is("/"):
            op = self.tok.text
            self.i += 1
            e = BinOp(op, e, self.unary())
        return e

    def unary(self):
        if self._is("-"):
            self.i += 1
            literal = self.tok.kind == "NUMBER"
            arg = self.unary()
            if literal and isinstance(arg, Num):
                return Num(-arg.value)
            return Neg(arg)
        return self.power()

    def power(self):
        base = self.atom()
        if self._is("^"):
            self.i += 1
            sign = 1
            if self._is("-"):
                sign = -1
                self.i += 1
            t = self.tok
            if t.kind != "NUMBER" or not re.fullmatch(r"\d+", t.text):
                self._fail({"INTEGER"}, "exponent must be an integer literal")
            self.i += 1
            if self._is("^"):
                self._fail({"+", "-", "*", "/", ")", "END"}, "chained exponents are ambiguous")
            return Pow(base, sign * int(t.text))
        return base

    def atom(self):
        t = self.tok
        if t.kind == "NUMBER":
            self.i += 1
            return Num(float(t.text))
        if t.kind == "VARIABLE":
            idx = int(t.text[1:])
            if self.n is not None and idx > self.n:
                raise UnknownVariableError(
                    f"variable {t.text} exceeds arity {self.n}", t.offset,
                    {f"x1..x{self.n}"}, self.src)
            self.i += 1
            return Var(idx)
        if t.kind == "FUNCTION":
            self.i += 1
            self._expect("(")
            arg = self.expr()
            self._expect(")")
            return Call(t.text, arg)
        if self._is("("):
            self.i += 1
            e = self.expr()
            self._expect(")")
            return e
        self._fail(_ATOM_START)


def parse(src: str, n: int | None = None) -> Expr:
    """Parse ``src`` into an expression tree; ``n`` bounds the variable index."""
    if not isinstance(src, str):
        src = str(src)
    return _Parser(src, n).parse()


# ---------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return 3
    if isinstance(e, Num) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return 3
    if isinstance(e, Pow):
        return 4
    return 5


def _fmt_num(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v)) if v != 0 or math.copysign(1.0, v) > 0 else "-0"
    return repr(v)


def to_string(e: Expr) -> str:
    """Render ``e`` with the minimal parentheses needed to reparse the same tree."""
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Call):
        return f"{e.func}({to_string(e.arg)})"
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        # "-(-2)" must not collapse into a literal
        if _prec(e.arg) < 3 or isinstance(e.arg, Num):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Pow):
        base = to_string(e.base)
        if _prec(e.base) < 5:
            base = f"({base})"
        return f"{base}^{e.exponent}"
    p = _PREC[e.op]
    left = to_string(e.left)
    if _prec(e.left) < p:
        left = f"({left})"
    right = to_string(e.right)
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


# ---------------------------------------------------------------- algebra
# Folding constructors keep derivative trees small.

def num(v) -> Num:
    return Num(float(v))


def _is_num(e, v=None):
    return isinstance(e, Num) and (v is None or e.value == v)


def add(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return neg(b)
    if a == b:
        return ZERO
    if isinstance(b, Neg):
        return add(a, b.arg)
    return BinOp("-", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value) if a.value != 0 else ZERO
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return ZERO
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a, -1.0):
        return neg(b)
    if _is_num(b, -1.0):
        return neg(a)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.arg, b.arg)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    if _is_num(b) and not _is_num(a):
        a, b = b, a
    if _is_num(a) and isinstance(b, BinOp) and b.op == "*" and _is_num(b.left):
        return mul(Num(a.value * b.left.value), b.right)
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_num(a, 0.0):
        return ZERO
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b) and b.value != 0:
        return Num(a.value / b.value)
    return BinOp("/", a, b)


def power(a: Expr, k: int) -> Expr:
    if k == 0:
        return ONE
    if k == 1:
        return a
    if _is_num(a) and (a.value != 0 or k > 0):
        return Num(a.value ** k)
    if isinstance(a, Pow):
        return power(a.base, a.exponent * k)
    return Pow(a, k)


def call(func: str, a: Expr) -> Expr:
    if _is_num(a):
        return Num(float(_SCALAR_FUNCS[func](a.value)))
    return Call(func, a)


_SCALAR_FUNCS = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan,
    "exp": math.exp, "log": math.log, "sqrt": math.sqrt,
}


def diff(e: Expr, i: int) -> Expr:
    """Symbolic partial derivative of ``e`` with respect to ``x_i`` (1-based)."""
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == i else ZERO
    if isinstance(e, Neg):
        return neg(diff(e.arg, i))
    if isinstance(e, BinOp):
        da, db = diff(e.left, i), diff(e.right, i)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, e.right), mul(e.left, db))
        # quotient rule split as a'/b - a b'/b^2
        return sub(div(da, e.right), div(mul(e.left, db), power(e.right, 2)))
    if isinstance(e, Pow):
        du = diff(e.base, i)
        if _is_num(du, 0.0):
            return ZERO
        return mul(mul(num(e.exponent), power(e.base, e.exponent - 1)), du)
    if isinstance(e, Call):
        du = diff(e.arg, i)
        if _is_num(du, 0.0):
            return ZERO
        u = e.arg
        if e.func == "sin":
            outer = call("cos", u)
        elif e.func == "cos":
            outer = neg(call("sin", u))
        elif e.func == "tan":
            outer = add(ONE, power(call("tan", u), 2))
        elif e.func == "exp":
            outer = e
        elif e.func == "log":
            return div(du, u)
        else:  # sqrt
            return div(du, mul(num(2), e))
        return mul(outer, du)
    raise TypeError(f"not an expression node: {e!r}")


def free_vars(e: Expr) -> frozenset[int]:
    if isinstance(e, Var):
        return frozenset({e.index})
    if isinstance(e, (Neg,)):
        return free_vars(e.arg)
    if isinstance(e, Call):
        return free_vars(e.arg)
    if isinstance(e, Pow):
        return free_vars(e.base)
    if isinstance(e, BinOp):
        return free_vars(e.left) | free_vars(e.right)
    return frozenset()


def size(e: Expr) -> int:
    if isinstance(e, (Num, Var)):
        return 1
    if isinstance(e, (Neg, Call)):
        return 1 + size(e.arg)
    if isinstance(e, Pow):
        return 1 + size(e.base)
    return 1 + size(e.left) + size(e.right)


# ---------------------------------------------------------------- evaluation

def _checked_div(a, b):
    if np.any(np.asarray(b) == 0):
        raise NumericsError("division by zero during field evaluation")
    return a / b


def _checked_log(a):
    if np.any(np.asarray(a) <= 0):
        raise NumericsError("log of a non-positive value during field evaluation")
    return np.log(a)


def _checked_sqrt(a):
    if np.any(np.asarray(a) < 0):
        raise NumericsError("sqrt of a negative value during field evaluation")
    return np.sqrt(a)


def _checked_pow(a, k):
    if k < 0 and np.any(np.asarray(a) == 0):
        raise NumericsError("negative power of zero during field evaluation")
    return a ** k if k >= 0 else 1.0 / a ** (-k)


_ARRAY_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": _checked_log, "sqrt": _checked_sqrt,
}


def compile_expr(e: Expr) -> Callable[[np.ndarray], np.ndarray]:
    """Turn ``e`` into a function of an ``(..., n)`` array returning ``(...)``."""
    if isinstance(e, Num):
        v = e.value
        return lambda X: np.full(X.shape[:-1], v)
    if isinstance(e, Var):
        k = e.index - 1
        return lambda X: X[..., k]
    if isinstance(e, Neg):
        f = compile_expr(e.arg)
        return lambda X: -f(X)
    if isinstance(e, Pow):
        f, k = compile_expr(e.base), e.exponent
        return lambda X: _checked_pow(f(X), k)
    if isinstance(e, Call):
        f, g = compile_expr(e.arg), _ARRAY_FUNCS[e.func]
        return lambda X: g(f(X))
    fl, fr = compile_expr(e.left), compile_expr(e.right)
    if e.op == "+":
        return lambda X: fl(X) + fr(X)
    if e.op == "-":
        return lambda X: fl(X) - fr(X)
    if e.op == "*":
        return lambda X: fl(X) * fr(X)
    return lambda X: _checked_div(fl(X), fr(X))


def evaluate(e: Expr, x) -> np.ndarray:
    """Evaluate directly by tree walking (reference path for the compiled form)."""
    x = np.asarray(x, dtype=float)
    with np.errstate(all="ignore"):
        return compile_expr(e)(x)


# ---------------------------------------------------------------- field constructors

def parse_scalar(src: str, n: int):
    """Parse one expression into a :class:`~densteer.vectorfield.ScalarField`."""
    from .vectorfield import ScalarField

    return ScalarField(parse(src, n), n)


def parse_vector(srcs, n: int):
    """Parse ``n`` component expressions into a :class:`~densteer.vectorfield.VectorField`."""
    from .vectorfield import VectorField

    srcs = list(srcs)
    if len(srcs) != n:
        raise ParseError(f"vector field needs {n} components, got {len(srcs)}", 0)
    comps = []
    for k, s in enumerate(srcs):
        try:
            comps.append(parse(s, n))
        except ParseError as err:
            cls = type(err)
            raise cls(f"component {k + 1}: {err.message}", err.offset, err.expected,
                      err.source) from None
    return VectorField(tuple(comps), n)


# ---------------------------------------------------------------- normal form
# Sum-of-monomials form over "atoms" (variables, function calls, and
# non-monomial denominators). Collecting like terms removes the cancellations
# that symbolic differentiation leaves behind, e.g. x2 + x2^2 - x2^2 -> x2.

_MAX_EXPAND = 6


def _pmul(p, q):
    out = {}
    for ka, ca in p.items():
        for kb, cb in q.items():
            powers = dict(ka)
            for atom, k in kb:
                powers[atom] = powers.get(atom, 0) + k
            key = tuple(sorted((a, k) for a, k in powers.items() if k != 0))
            out[key] = out.get(key, 0.0) + ca * cb
    return {k: c for k, c in out.items() if c != 0.0}


def _padd(p, q, sign=1.0):
    out = dict(p)
    for k, c in q.items():
        out[k] = out.get(k, 0.0) + sign * c
    return {k: c for k, c in out.items() if c != 0.0}


def _atom(e, atoms, k=1):
    s = to_string(e)
    atoms[s] = e
    return {((s, k),): 1.0}


def _poly(e, atoms):
    if isinstance(e, Num):
        return {(): e.value} if e.value != 0 else {}
    if isinstance(e, Var):
        return _atom(e, atoms)
    if isinstance(e, Neg):
        return {k: -c for k, c in _poly(e.arg, atoms).items()}
    if isinstance(e, Call):
        arg = simplify(e.arg)
        if isinstance(arg, Num):
            return _poly(call(e.func, arg), atoms)
        return _atom(Call(e.func, arg), atoms)
    if isinstance(e, Pow):
        p = _poly(e.base, atoms)
        if not p:
            return {} if e.exponent > 0 else _atom(Pow(ZERO, e.exponent), atoms)
        if len(p) == 1:
            (key, c), = p.items()
            return {tuple((a, k * e.exponent) for a, k in key): c ** e.exponent}
        if 0 < e.exponent <= _MAX_EXPAND:
            out = {(): 1.0}
            for _ in range(e.exponent):
                out = _pmul(out, p)
            return out
        return _atom(_from_poly(p, atoms), atoms, e.exponent)
    a = _poly(e.left, atoms)
    if e.op == "+":
        return _padd(a, _poly(e.right, atoms))
    if e.op == "-":
        return _padd(a, _poly(e.right, atoms), -1.0)
    b = _poly(e.right, atoms)
    if e.op == "*":
        return _pmul(a, b)
    if not b:
        # keep the division so evaluation reports it
        return _atom(BinOp("/", _from_poly(a, atoms), ZERO), atoms)
    if len(b) == 1:
        (key, c), = b.items()
        inv = {tuple((s, -k) for s, k in key): 1.0 / c}
        return _pmul(a, inv)
    return _pmul(a, _atom(_from_poly(b, atoms), atoms, -1))


def _monomial_expr(key, atoms):
    numer, denom = ONE, ONE
    for s, k in key:
        if k > 0:
            numer = mul(numer, power(atoms[s], k))
        else:
            denom = mul(denom, power(atoms[s], -k))
    return div(numer, denom)


def _degree(key):
    return sum(abs(k) for _, k in key)


def _from_poly(p, atoms):
    acc = ZERO
    for key in sorted(p, key=lambda k: (_degree(k), k)):
        c = p[key]
        term = _monomial_expr(key, atoms)
        if acc == ZERO:
            acc = mul(num(c), term)
        elif c < 0:
            acc = sub(acc, mul(num(-c), term))
        else:
            acc = add(acc, mul(num(c), term))
    return acc


def simplify(e: Expr) -> Expr:
    """Expand and collect like terms; the result evaluates to the same function."""
    atoms = {}
    return _from_poly(_poly(e, atoms), atoms)
