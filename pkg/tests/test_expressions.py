import math

import numpy as np
import pytest

from hetgp.errors import ExpressionError
from hetgp.expressions import Expression


@pytest.mark.parametrize(
    "src, env, expected",
    [
        ("1 + 2 * 3", {}, 7.0),
        ("(1 + 2) * 3", {}, 9.0),
        ("2 / 4 - 1", {}, -0.5),
        ("-x + +2", {"x": 1.5}, 0.5),
        ("pow(x, 2)", {"x": 3.0}, 9.0),
        ("x ** 2", {"x": 3.0}, 9.0),
        ("exp(0)", {}, 1.0),
        ("log(exp(2))", {}, 2.0),
        ("sin(0)", {}, 0.0),
        ("cos(0)", {}, 1.0),
        ("min(3, u)", {"u": 7.0}, 3.0),
        ("max(u - 11, 0)", {"u": 9.0}, 0.0),
        ("min(max(x, 0), 1)", {"x": 7.0}, 1.0),
    ],
)
def test_grammar_evaluation(src, env, expected):
    assert float(Expression.parse(src).evaluate(env)) == pytest.approx(expected, abs=1e-12)


def test_names_collects_free_variables():
    e = Expression.parse("50 / (1 + exp(-0.9 * (u - 8.5))) + 2 * Hs")
    assert e.names == frozenset({"u", "Hs"})
    assert Expression.parse("1 + 2").names == frozenset()


def test_source_round_trips():
    src = "2 * log(0.1 + 0.25 * pow(x, 2))"
    e = Expression.parse(src)
    assert e.source == src
    again = Expression.parse(e.source)
    for x in (0.0, 0.3, 1.0):
        assert again.evaluate({"x": x}) == e.evaluate({"x": x})


def test_parse_rejects_bad_syntax():
    for bad in ("x +", "", "1 2", "x & y", "lambda: 3", "[1, 2]"):
        with pytest.raises(ExpressionError):
            Expression.parse(bad)


def test_parse_rejects_unknown_function():
    with pytest.raises(ExpressionError, match="foo"):
        Expression.parse("foo(3)")


def test_evaluate_reports_missing_names():
    with pytest.raises(ExpressionError, match="b"):
        Expression.parse("a + b").evaluate({"a": 1.0})


def test_evaluate_matches_math_module():
    rng = np.random.default_rng(19)
    e = Expression.parse("exp(-0.5 * x) * sin(3 * x) + max(x - 1, 0) / 2")
    for x in rng.uniform(-2, 2, size=25):
        want = math.exp(-0.5 * x) * math.sin(3 * x) + max(x - 1, 0) / 2
        assert float(e.evaluate({"x": float(x)})) == pytest.approx(want, rel=1e-12)


def test_out_of_domain_yields_non_finite_not_crash():
    # scenario validation is responsible for rejecting these downstream
    with np.errstate(all="ignore"):
        assert math.isnan(float(Expression.parse("log(x)").evaluate({"x": -1.0})))
        assert math.isinf(float(Expression.parse("1 / x").evaluate({"x": 0.0})))
