import numpy as np
import pytest

from builders import contact_form, random_distributions, random_field
from conftest import plane_ws
from flatcheck import exprcore as ec
from flatcheck.geomkit import (Distribution, OneForm, VectorField, annihilator_at, cauchy_characteristic,
                               cauchy_rank, contract_domega, derived_flag, involutive_closure,
                               lie_bracket)
from flatcheck.sfechk import c_base
from flatcheck.subdist import CFieldAnsatz

XYZ = ["x", "y", "z"]


def vf(*comps, states=XYZ):
    return VectorField([ec.as_expr(c) for c in comps], states)


x, y, z = ec.symbols(XYZ)


def test_bracket_coordinate_example():
    br = lie_bracket(vf(1, 0, 0), vf(0, x, 0))
    assert br == vf(0, 1, 0)


def test_self_bracket_zero(rng):
    v = random_field(XYZ, rng)
    ws = plane_ws(XYZ)
    assert np.abs(ws.field(lie_bracket(v, v))).max() <= 1e-12


def test_chained_form_bracket():
    st = ["z0", "z1", "z2"]
    b0 = VectorField([ec.const(1), ec.symbol("z2"), ec.const(0)], st)
    b1 = VectorField.coordinate("z2", st)
    ws = plane_ws(st)
    np.testing.assert_allclose(ws.field(lie_bracket(b1, b0)), ws.field(VectorField.coordinate("z1", st)))


def test_derived_flag_involutive_length_one():
    D = Distribution([vf(1, 0, 0), vf(0, 1, 0)], XYZ)
    assert len(derived_flag(D, plane_ws(XYZ))) == 1


def test_contact_flag_ranks():
    D = contact_form(2, 3)
    ws = plane_ws(D.states)
    assert [E.rank(ws) for E in derived_flag(D, ws)] == [3, 5, 7]


def test_closure_full_and_idempotent():
    D = Distribution([vf(1, 0, 0), vf(0, x, 1)], XYZ)
    ws = plane_ws(XYZ)
    cl = involutive_closure(D, ws)
    assert cl.rank(ws) == 3
    assert involutive_closure(cl, ws).rank(ws) == 3


def test_crane_E_closure(crane_report, crane_ws):
    flag = crane_report._state["flag"]
    assert [E.rank(crane_ws) for E in flag] == [5, 7]


def test_cauchy_of_involutive_is_itself():
    D = Distribution([vf(1, 0, 0), vf(0, 1, 0)], XYZ)
    ws = plane_ws(XYZ)
    assert cauchy_characteristic(D, ws).equals(ws, D)


def test_crane_cauchy_D2(crane_report, crane_ws):
    D2 = crane_report._state["seq"][1]
    assert cauchy_rank(D2, crane_ws) != 3


def test_crane_cauchy_E_is_c_span(crane, crane_report, crane_ws):
    E = crane_report._state["E"]
    C = cauchy_characteristic(E, crane_ws)
    assert C.rank(crane_ws) == 2
    cs = CFieldAnsatz(crane.ansatz, c_base(crane, 1)).fields()
    assert C.equals(crane_ws, Distribution(cs, crane.states))


def test_contract_examples():
    ws = plane_ws(XYZ)
    assert contract_domega(vf(x, y * y, 1), OneForm([1, 0, 0], XYZ)).is_zero()
    w = contract_domega(vf(1, 0, 0), OneForm([0, x, 0], XYZ))
    np.testing.assert_allclose(ws.form(w), np.tile([0.0, 1.0, 0.0], (ws.N, 1)))
    exact = OneForm([y, x, 0], XYZ)
    assert np.abs(ws.form(contract_domega(vf(0, 1, 0), exact))).max() == 0


def test_contract_matches_cartan_formula(rng):
    """d omega(v, w) = v(omega(w)) - w(omega(v)) - omega([v, w])."""
    ws = plane_ws(XYZ)
    from flatcheck.normalforms import random_polynomial
    for _ in range(5):
        v, w = random_field(XYZ, rng), random_field(XYZ, rng)
        om = OneForm([random_polynomial(XYZ, rng) for _ in XYZ], XYZ)
        lhs = contract_domega(v, om)(w)
        rhs = v.apply(om(w)) - w.apply(om(v)) - om(lie_bracket(v, w))
        a, b = ws.eval_exprs([lhs, rhs]).T
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_annihilator_examples():
    st = ["x", "y"]
    full = Distribution([VectorField.coordinate("x", st), VectorField.coordinate("y", st)], st)
    assert annihilator_at(full, {"x": 0.3, "y": 0.1}).shape[0] == 0
    ann = annihilator_at(Distribution([VectorField.coordinate("x", st)], st), {"x": 0.3, "y": 0.1})
    assert ann.shape == (1, 2)
    assert abs(ann[0, 1]) == pytest.approx(1.0)


def test_crane_F0_annihilator(crane, crane_report, crane_ws):
    F0 = crane_report._state["Ebar"]
    p = crane_ws.point(0)
    ann = annihilator_at(F0, p, crane.params)
    assert ann.shape[0] == 3
    M = F0.matrix(crane_ws)[0]
    assert np.abs(ann @ M).max() <= 1e-9 * max(1.0, np.abs(M).max())


# invariant suite ------------------------------------------------------------

def _rel(a, *terms):
    scale = max(1.0, *(np.abs(t).max() for t in terms))
    return np.abs(a).max() / scale


def test_jacobi_and_antisymmetry_100_triples(rng):
    ws = plane_ws(XYZ, n=10)
    worst_j, worst_a = 0.0, 0.0
    for _ in range(100):
        u, v, w = (random_field(XYZ, rng) for _ in range(3))
        t1 = ws.field(lie_bracket(u, lie_bracket(v, w)))
        t2 = ws.field(lie_bracket(v, lie_bracket(w, u)))
        t3 = ws.field(lie_bracket(w, lie_bracket(u, v)))
        worst_j = max(worst_j, _rel(t1 + t2 + t3, t1, t2, t3))
        uv, vu = ws.field(lie_bracket(u, v)), ws.field(lie_bracket(v, u))
        worst_a = max(worst_a, _rel(uv + vu, uv))
    assert worst_j <= 1e-9
    assert worst_a <= 1e-9


def test_flags_monotone_and_cauchy_properties(rng):
    nontrivial = 0
    for D in random_distributions(rng, 20):
        ws = plane_ws(D.states, seed=int(rng.integers(1000)))
        flag = derived_flag(D, ws)
        ranks = [E.rank(ws) for E in flag]
        assert all(a < b for a, b in zip(ranks, ranks[1:]))
        last = flag[-1]
        assert last.is_full(ws) or last.is_involutive(ws)
        assert len(derived_flag(last, ws)) == 1
        C = cauchy_characteristic(D, ws)
        if C.generators:
            nontrivial += 1
            assert D.contains(ws, C.generators)
            assert C.is_involutive(ws)
            assert len(derived_flag(C, ws)) == 1
    assert nontrivial >= 5
