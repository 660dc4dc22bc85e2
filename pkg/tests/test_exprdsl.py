import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from densteer import exprdsl as ex
from densteer.errors import NumericsError, ParseError, UnknownVariableError
from densteer.registry import get

N = 3


def trees(depth=3):
    leaf = st.one_of(
        st.integers(1, N).map(ex.Var),
        st.integers(0, 9).map(lambda v: ex.Num(float(v))),
    )
    if depth == 0:
        return leaf
    sub = trees(depth - 1)
    return st.one_of(
        leaf,
        sub.map(ex.Neg),
        st.tuples(st.sampled_from("+-*"), sub, sub).map(lambda t: ex.BinOp(*t)),
        st.tuples(sub, st.integers(1, 3)).map(lambda t: ex.Pow(*t)),
        st.tuples(st.sampled_from(["sin", "cos", "exp"]), sub).map(lambda t: ex.Call(*t)),
    )


def direct(e, x):
    """Plain recursive float arithmetic, independent of the compiled path."""
    if isinstance(e, ex.Num):
        return e.value
    if isinstance(e, ex.Var):
        return x[e.index - 1]
    if isinstance(e, ex.Neg):
        return -direct(e.arg, x)
    if isinstance(e, ex.Pow):
        return direct(e.base, x) ** e.exponent
    if isinstance(e, ex.Call):
        return getattr(math, e.func)(direct(e.arg, x))
    a, b = direct(e.left, x), direct(e.right, x)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    return a * b


def test_scalar_examples():
    assert ex.evaluate(ex.parse("x1 - x5", 5), [2, 0, 0, 0, 1]) == 1.0
    assert ex.evaluate(ex.parse("cos(x1 - x5)", 5), np.zeros(5)) == 1.0
    zero = ex.parse_scalar("0", 4)
    assert zero(np.ones(4)) == 0.0


def test_vector_examples():
    f = ex.parse_vector(get("paper_example").f, 5)
    np.testing.assert_array_equal(f(np.zeros(5)), np.zeros(5))
    assert f(np.array([0, 1.0, 0, 0, 0]))[0] == 2.0
    z = ex.parse_vector(["0"] * 5, 5)
    np.testing.assert_array_equal(z(np.arange(5.0)), np.zeros(5))


def test_rejects_misplaced_operator():
    with pytest.raises(ParseError) as info:
        ex.parse("1 + * 2")
    assert info.value.offset == 4
    assert "VARIABLE" in info.value.expected


@pytest.mark.parametrize("src", ["2x1", "x1 +", "(x1", "foo(x1)", "x1^x2", "", "x1 ** 2"])
def test_rejects_bad_syntax(src):
    with pytest.raises(ParseError):
        ex.parse(src, 3)


def test_unknown_variable():
    with pytest.raises(UnknownVariableError):
        ex.parse("x1 + x7", 5)
    with pytest.raises(ParseError):
        ex.parse("x0", 5)


def test_vector_error_names_component():
    with pytest.raises(ParseError, match="component 2"):
        ex.parse_vector(["x1", "x1 +"], 2)
    with pytest.raises(ParseError):
        ex.parse_vector(["x1"], 2)


def test_division_by_zero_is_numeric():
    e = ex.parse("1 / x1", 1)
    with pytest.raises(NumericsError):
        ex.evaluate(e, [0.0])


def test_precedence():
    assert ex.evaluate(ex.parse("-x1^2", 1), [3.0]) == -9.0
    assert ex.evaluate(ex.parse("2 * 3 + 4", 0), []) == 10.0
    assert ex.evaluate(ex.parse("2 ^ -1", 0), []) == 0.5
    assert ex.evaluate(ex.parse("8 / 2 / 2", 0), []) == 2.0
    assert ex.evaluate(ex.parse("1 - 2 - 3", 0), []) == -4.0


def test_cube_derivative_exact():
    d = ex.diff(ex.parse("x1^3", 1), 1)
    assert ex.evaluate(d, [2.0]) == 12.0


def test_free_vars():
    assert ex.free_vars(ex.parse("x1 * cos(x3) + 2", 3)) == {1, 3}


@given(trees())
def test_print_parse_round_trip(e):
    assert ex.parse(ex.to_string(e), N) == e


@given(trees(), st.lists(st.floats(-1.5, 1.5), min_size=N, max_size=N))
def test_compiled_matches_direct(e, x):
    ref = direct(e, x)
    got = float(ex.evaluate(e, np.array(x)))
    assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


@given(trees(), st.lists(st.floats(-1.0, 1.0), min_size=N, max_size=N))
def test_simplify_preserves_value(e, x):
    x = np.array(x)
    a = float(ex.evaluate(e, x))
    b = float(ex.evaluate(ex.simplify(e), x))
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


@given(trees(depth=2), st.lists(st.floats(-1.0, 1.0), min_size=N, max_size=N),
       st.integers(1, N))
def test_symbolic_derivative_matches_fd(e, x, i):
    x = np.array(x)
    d = float(ex.evaluate(ex.diff(e, i), x))
    h = 1e-5
    step = np.zeros(N)
    step[i - 1] = h
    fd = (float(ex.evaluate(e, x + step)) - float(ex.evaluate(e, x - step))) / (2 * h)
    assert d == pytest.approx(fd, rel=1e-5, abs=1e-5 * (1 + abs(float(ex.evaluate(e, x)))))
