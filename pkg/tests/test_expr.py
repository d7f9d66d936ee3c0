"""Expression parsing, evaluation, and exact differentiation.

The derivative oracle is a five-point central finite difference evaluated at
random points, independent of the symbolic rules it checks.
"""

import math

import numpy as np
import pytest

from sweepctl import expr
from sweepctl.expr import (
    ExprDomainError,
    ExprNameError,
    ExprSyntaxError,
    compile_exprs,
    differentiate,
    evaluate,
    parse,
)


def _fd_derivative(e, env, var, h=1e-5):
    """Five-point central difference of e at env with respect to var."""

    def at(delta):
        shifted = dict(env)
        shifted[var] = env[var] + delta
        return evaluate(e, shifted)

    return (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def test_parse_number_and_variable() -> None:
    assert evaluate(parse("2.5", []), {}) == 2.5
    assert evaluate(parse("x1", ["x1"]), {"x1": 7.0}) == 7.0


def test_parse_precedence_and_associativity() -> None:
    e = parse("1 + 2*3 - 4/2", [])
    assert evaluate(e, {}) == pytest.approx(5.0)
    # '-' and '/' are left-associative
    assert evaluate(parse("8 - 3 - 2", []), {}) == pytest.approx(3.0)
    assert evaluate(parse("8 / 4 / 2", []), {}) == pytest.approx(1.0)


def test_parse_power_binds_tighter_than_mul() -> None:
    e = parse("2*x1^3", ["x1"])
    assert evaluate(e, {"x1": 2.0}) == pytest.approx(16.0)


def test_parse_negative_exponent() -> None:
    e = parse("x1^-2", ["x1"])
    assert evaluate(e, {"x1": 2.0}) == pytest.approx(0.25)


def test_parse_functions_and_neg() -> None:
    env = {"x1": 0.3}
    assert evaluate(parse("exp(x1)", ["x1"]), env) == pytest.approx(math.exp(0.3))
    assert evaluate(parse("neg(x1)", ["x1"]), env) == pytest.approx(-0.3)
    got = evaluate(parse("sin(x1)^2 + cos(x1)^2", ["x1"]), env)
    assert got == pytest.approx(1.0)


def test_parse_two_sphere_constraint() -> None:
    e = parse("x1^2 + x2^2 + (x3 + 0.5)^2 - 1", ["x1", "x2", "x3"])
    env = {"x1": 0.0, "x2": 0.0, "x3": 0.5}
    assert evaluate(e, env) == pytest.approx(0.0)


def test_parse_syntax_error_position() -> None:
    with pytest.raises(ExprSyntaxError) as err:
        parse("x1 + ", ["x1"])
    assert err.value.position == 5


def test_parse_unknown_variable() -> None:
    with pytest.raises(ExprNameError):
        parse("x1 + y", ["x1"])


def test_parse_unknown_function() -> None:
    with pytest.raises(ExprNameError):
        parse("tan(x1)", ["x1"])


def test_parse_rejects_fractional_exponent() -> None:
    with pytest.raises(ExprSyntaxError):
        parse("x1^2.5", ["x1"])


def test_parse_rejects_bad_character() -> None:
    with pytest.raises(ExprSyntaxError):
        parse("x1 @ 2", ["x1"])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_eval_unbound_variable() -> None:
    e = parse("x1 + x2", ["x1", "x2"])
    with pytest.raises(ExprNameError):
        evaluate(e, {"x1": 1.0})


def test_eval_division_by_zero() -> None:
    e = parse("1/x1", ["x1"])
    with pytest.raises(ExprDomainError):
        evaluate(e, {"x1": 0.0})


def test_eval_log_and_sqrt_domains() -> None:
    with pytest.raises(ExprDomainError):
        evaluate(parse("log(x1)", ["x1"]), {"x1": 0.0})
    with pytest.raises(ExprDomainError):
        evaluate(parse("sqrt(x1)", ["x1"]), {"x1": -1.0})


def test_eval_array_broadcast() -> None:
    e = parse("x1^2 + x2", ["x1", "x2"])
    x1 = np.array([1.0, 2.0, 3.0])
    got = evaluate(e, {"x1": x1, "x2": 1.0})
    np.testing.assert_allclose(got, [2.0, 5.0, 10.0])


def test_eval_array_domain_error() -> None:
    e = parse("sqrt(x1)", ["x1"])
    with pytest.raises(ExprDomainError):
        evaluate(e, {"x1": np.array([1.0, -0.5])})


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def test_diff_constant_is_constant_zero() -> None:
    d = differentiate(parse("3.5", []), "x1")
    assert isinstance(d, expr.Const)
    assert d.value == 0.0


def test_diff_power_rule() -> None:
    e = parse("x1^3", ["x1"])
    d = differentiate(e, "x1")
    assert evaluate(d, {"x1": 2.0}) == pytest.approx(12.0)


def test_diff_quotient_rule_spec_form() -> None:
    # d/dx (x/(1+x)) = 1/(1+x)^2
    d = differentiate(parse("x1/(1 + x1)", ["x1"]), "x1")
    for v in (0.0, 0.5, 2.0):
        assert evaluate(d, {"x1": v}) == pytest.approx(1.0 / (1.0 + v) ** 2)


def test_diff_memoization_returns_same_object() -> None:
    e = parse("exp(x1^2) + sin(x1)", ["x1"])
    assert differentiate(e, "x1") is differentiate(e, "x1")


_CASES = [
    ("x1^2 + x2^2 + (x3 + 0.5)^2 - 1", ["x1", "x2", "x3"], None),
    ("exp(x1*x2) - log(3 + x1^2)", ["x1", "x2"], None),
    ("sqrt(1 + x1^2) * cos(x2)", ["x1", "x2"], None),
    ("sin(x1)/(2 + cos(x2))", ["x1", "x2"], None),
    ("neg(x1) * x2 + x1/(1 + x2^2)", ["x1", "x2"], None),
    ("(x1 - x2)^3 + 0.05*x1*x2", ["x1", "x2"], None),
    ("log(2 + exp(x1))", ["x1"], None),
    ("x1^-1 + x1^4", ["x1"], (0.5, 2.0)),
]


@pytest.mark.parametrize("source,names,box", _CASES)
def test_diff_matches_finite_differences(source, names, box) -> None:
    lo, hi = box if box is not None else (-2.0, 2.0)
    e = parse(source, names)
    rng = np.random.default_rng(42)
    grads = [differentiate(e, v) for v in names]
    for _ in range(100):
        env = {v: float(rng.uniform(lo, hi)) for v in names}
        for v, g in zip(names, grads):
            want = _fd_derivative(e, env, v)
            got = evaluate(g, env)
            assert got == pytest.approx(want, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("source,names,box", _CASES[:6])
def test_mixed_partials_commute(source, names, box) -> None:
    e = parse(source, names)
    rng = np.random.default_rng(7)
    for u in names:
        for v in names:
            duv = differentiate(differentiate(e, u), v)
            dvu = differentiate(differentiate(e, v), u)
            for _ in range(20):
                env = {w: float(rng.uniform(-2.0, 2.0)) for w in names}
                a = evaluate(duv, env)
                b = evaluate(dvu, env)
                assert abs(a - b) <= 1e-9 * (1.0 + abs(a) + abs(b))


# ---------------------------------------------------------------------------
# printing round-trip
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("source,names,box", _CASES)
def test_print_reparse_round_trip(source, names, box) -> None:
    lo, hi = box if box is not None else (-2.0, 2.0)
    e = parse(source, names)
    back = parse(str(e), names)
    rng = np.random.default_rng(3)
    for _ in range(50):
        env = {v: float(rng.uniform(lo, hi)) for v in names}
        assert evaluate(back, env) == pytest.approx(evaluate(e, env), rel=1e-12, abs=1e-12)


def test_print_round_trip_of_derivatives() -> None:
    rng = np.random.default_rng(11)
    for source, names, box in _CASES:
        lo, hi = box if box is not None else (-2.0, 2.0)
        e = parse(source, names)
        for v in names:
            d = differentiate(e, v)
            back = parse(str(d), names)
            for _ in range(20):
                env = {w: float(rng.uniform(lo, hi)) for w in names}
                assert evaluate(back, env) == pytest.approx(
                    evaluate(d, env), rel=1e-12, abs=1e-12
                )


def test_print_negative_constant_stays_in_grammar() -> None:
    d = differentiate(parse("cos(x1)", ["x1"]), "x1")
    text = str(d)
    back = parse(text, ["x1"])
    assert evaluate(back, {"x1": 0.7}) == pytest.approx(-math.sin(0.7))


# ---------------------------------------------------------------------------
# compiled evaluation
# ---------------------------------------------------------------------------


def test_compile_matches_eval_scalar_and_array() -> None:
    names = ["x1", "x2"]
    exprs = [parse(s, names) for s, n, _ in _CASES[:5] if set(n) <= set(names)]
    fn = compile_exprs(exprs, names)
    rng = np.random.default_rng(5)
    for _ in range(30):
        env = {v: float(rng.uniform(-2.0, 2.0)) for v in names}
        got = fn(expr.SCALAR_BACKEND, env["x1"], env["x2"])
        for g, e in zip(got, exprs):
            assert g == pytest.approx(evaluate(e, env), rel=1e-12)
    xs = rng.uniform(-2.0, 2.0, size=(2, 40))
    got = fn(expr.ARRAY_BACKEND, xs[0], xs[1])
    for g, e in zip(got, exprs):
        np.testing.assert_allclose(g, evaluate(e, {"x1": xs[0], "x2": xs[1]}), rtol=1e-12)
