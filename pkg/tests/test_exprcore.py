import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import central_difference_check
from flatcheck import exprcore as ec
from flatcheck.errors import DivisionByZero, ExprSyntaxError, SingularSolve, UnknownSymbol
from flatcheck.parsing import parse_expr

x, y, z = ec.symbols(["x", "y", "z"])


def test_parse_product_structure():
    e = parse_expr("sin(q3)*v1", {"q3", "v1"})
    assert e == ec.sin(ec.symbol("q3")) * ec.symbol("v1")


def test_parse_keeps_repeated_terms():
    e = parse_expr("q1 + q1", {"q1"})
    assert ec.GRAPH.ops[e.id] == ec.ADD
    assert ec.evaluate(e, {"q1": 1.5}) == pytest.approx(3.0)


def test_parse_unbalanced_paren_position():
    with pytest.raises(ExprSyntaxError) as info:
        parse_expr("cos(q4", {"q4"})
    assert info.value.position == 7


def test_parse_unknown_symbol():
    with pytest.raises(UnknownSymbol) as info:
        parse_expr("a + b", {"a"})
    assert info.value.name == "b"


def test_parse_rational_literal_exact():
    e = parse_expr("1/3", set())
    assert ec.GRAPH.data[e.id][1] == ec.Fraction(1, 3)


def test_hash_consing_identity():
    a = ec.sin(x) * y + ec.const(2)
    b = ec.sin(x) * y + ec.const(2)
    assert a.id == b.id


def test_constant_folding():
    e = ec.const(2) * ec.const(3) + ec.const(1)
    assert ec.GRAPH.ops[e.id] == ec.CONST


def test_product_rule():
    assert ec.differentiate(x * y, "x") == y


def test_sin_derivative():
    assert ec.differentiate(ec.sin(x), "x") == ec.cos(x)


def test_independent_derivative_is_zero():
    assert ec.differentiate(ec.sin(y), "x").id == ec.ZERO


def test_evaluate_basic():
    assert ec.evaluate(ec.sin(ec.symbol("q3")), {"q3": 0.0}) == 0.0


def test_diagonal_solve():
    s = ec.solve([[2, 0], [0, 4]], [2, 8])
    assert [ec.evaluate(c, {}) for c in s] == pytest.approx([1.0, 2.0])


def test_division_by_zero_reports_point():
    with pytest.raises(DivisionByZero):
        ec.evaluate(ec.const(1) / ec.symbol("q3"), {"q3": 0.0})


def test_singular_solve():
    with pytest.raises(SingularSolve):
        ec.evaluate(ec.solve([[x, 1], [x, 1]], [1, 2])[0], {"x": 1.0})


def test_solve_derivative_matches_implicit_rule():
    # d/dq of s = M(q)^-1 b(q) equals M^-1 (b' - M' s)
    q = ec.symbol("q")
    M = [[2 + q * q, q], [ec.sin(q), 3]]
    b = [ec.cos(q), q]
    s = ec.solve(M, b)
    ds = [ec.differentiate(c, "q") for c in s]
    qv = 0.37
    Mn = np.array([[2 + qv ** 2, qv], [math.sin(qv), 3]])
    dM = np.array([[2 * qv, 1], [math.cos(qv), 0]])
    bn = np.array([math.cos(qv), qv])
    db = np.array([-math.sin(qv), 1])
    sn = np.linalg.solve(Mn, bn)
    want = np.linalg.solve(Mn, db - dM @ sn)
    got = [ec.evaluate(d, {"q": qv}) for d in ds]
    assert got == pytest.approx(want, rel=1e-12)


def test_evaluator_vectorised(rng):
    e = ec.sin(x) * y + x ** 2
    xs, ys = rng.normal(size=7), rng.normal(size=7)
    vals = ec.Evaluator({"x": xs, "y": ys})(e)
    np.testing.assert_allclose(vals, np.sin(xs) * ys + xs ** 2, rtol=1e-14)


def test_substitute():
    e = ec.substitute(x * y + z, {"x": y + 1})
    assert ec.evaluate(e, {"y": 2.0, "z": 0.5}) == pytest.approx(6.5)


def test_linearity_of_differentiation(rng):
    a = ec.sin(x * y) + ec.tan(z) * x
    b = ec.cos(y) / (2 + x * x)
    lhs = ec.differentiate(a + b, "x")
    rhs = ec.differentiate(a, "x") + ec.differentiate(b, "x")
    for _ in range(10):
        p = dict(zip("xyz", rng.uniform(-1, 1, 3)))
        assert ec.evaluate(lhs, p) == pytest.approx(ec.evaluate(rhs, p), abs=1e-12)


def test_lambdify_matches_evaluator(crane, rng):
    sub = {p: ec.const(v) for p, v in crane.params.items()}
    exprs = ec.substitute(list(crane.drift), sub)
    F = ec.lambdify(exprs, crane.states)
    pts = crane.sample(5, rng)
    ev = crane.evaluator(pts)
    ref = np.asarray(ev(list(crane.drift)))
    for i in range(5):
        got = F(*[pts[s][i] for s in crane.states])
        np.testing.assert_allclose(got, ref[:, i], rtol=1e-12, atol=1e-14)


def test_to_text_round_trip(rng):
    e = ec.sin(x) * (y - ec.const(ec.Fraction(1, 3))) / (2 + z ** 2)
    e2 = parse_expr(ec.to_text(e), {"x", "y", "z"})
    p = dict(zip("xyz", rng.uniform(-1, 1, 3)))
    assert ec.evaluate(e2, p) == pytest.approx(ec.evaluate(e, p), rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_derivative_matches_finite_difference(seed):
    d, fd = central_difference_check(np.random.default_rng(seed))
    assert abs(d - fd) <= 1e-6 * (1 + abs(d))


def test_scope_releases_nodes_and_keeps_hash_consing():
    before = ec.node_count()
    outer = ec.sin(x) * y
    with ec.scope():
        e = ec.cos(ec.symbol("scoped_w")) * outer + x ** 7
        ec.differentiate(e, x)
        assert ec.node_count() > before
    mark = ec.node_count()
    assert mark <= before + 20
    # rebuilding after release yields fresh, consistent nodes
    e = ec.cos(ec.symbol("scoped_w")) * outer + x ** 7
    d = ec.differentiate(e, x)
    p = {"x": 0.4, "y": -1.1, "scoped_w": 0.7}
    want = math.cos(0.7) * math.cos(0.4) * -1.1 + 7 * 0.4 ** 6
    assert ec.evaluate(d, p) == pytest.approx(want, rel=1e-13)
    assert ec.sin(x) * y == outer
