import numpy as np
import pytest

from builders import recombine
from conftest import DEMOS
from flatcheck import exprcore as ec
from flatcheck.errors import DimensionMismatch, NeverNonInvolutive
from flatcheck.geomkit import Workspace
from flatcheck.modeldsl import SystemModel, loads_model, parse_expression_lines
from flatcheck.normalforms import crane_tf1_transformation, generate_tf, scramble, tf_template
from flatcheck.pointlinalg import CheckConfig
from flatcheck.sfechk import (StructureIndices, check, check_affine_reduction, check_tf0, check_tf1,
                              closure_for_flat_output, drift_sequence, extend_with_inputs,
                              verify_flat_output, verify_transformation)

CFG = CheckConfig(n_points=25, seed=42)


def test_crane_drift_sequence(crane, crane_ws):
    seq, kz = drift_sequence(crane, crane_ws)
    assert kz == 1
    assert [D.rank(crane_ws) for D in seq] == [3, 6]
    assert not seq[1].is_involutive(crane_ws)


def test_brunovsky_never_non_involutive():
    text = ("[states]\na1, a2, a3, b1, b2, b3, c1, c2, c3\n[drift]\na2\na3\n0\nb2\nb3\n0\nc2\nc3\n0\n"
            "[input 0]\n0\n0\n1\n0\n0\n0\n0\n0\n0\n"
            "[input 1]\n0\n0\n0\n0\n0\n1\n0\n0\n0\n"
            "[input 2]\n0\n0\n0\n0\n0\n0\n0\n0\n1\n")
    model = loads_model(text)
    with pytest.raises(NeverNonInvolutive):
        drift_sequence(model, Workspace.for_model(model, CFG))
    rep = check_tf0(model, CFG)
    assert rep.label == "Fail(1)"


def test_scrambled_tf0_keeps_k_zeta():
    idx = StructureIndices(2, 0, 2, 2, (0, 0, 0))
    model, _ = scramble(generate_tf(idx, seed=5), seed=6)
    _, kz = drift_sequence(model, Workspace.for_model(model, CFG))
    assert kz == 2


def test_crane_tf1(crane_report):
    r = crane_report
    assert r.verdict == "TF1"
    assert r.indices == StructureIndices(2, 1, 1, 2, (1, 1, 1))
    assert r.ranks == {"D": [3, 6], "E_flag": [5, 7], "L": 4, "F": [7, 10]}
    assert all(c.status == "pass" for c in r.conditions)


def test_crane_tf0_fails_condition_2(crane):
    r = check_tf0(crane, CFG)
    assert r.label == "Fail(2)"


def test_auto_routes_crane_to_tf1(crane):
    assert check(crane, "auto", CFG).verdict == "TF1"


def test_rank_condition_failure():
    # [f, g2] = 0 so D_2 has rank 5, not 6
    text = ("[states]\nx1, x2, x3, x4, x5\n[drift]\n0\n0\n0\nx1 + x3*x2\nx2\n"
            "[input 0]\n1\n0\n0\n0\n0\n[input 1]\n0\n1\n0\n0\n0\n[input 2]\n0\n0\n1\n0\n0\n")
    r = check_tf0(loads_model(text), CFG)
    assert r.label == "Fail(1)"


@pytest.mark.parametrize("seed", range(5))
def test_first_failure_stable_under_reseeding(crane, seed):
    r = check_tf0(crane, CheckConfig(seed=seed))
    assert (r.verdict, r.failed) == ("Fail", "2")


def test_generated_tf0_scrambled_round_trip():
    idx = StructureIndices(2, 0, 1, 2, (1, 1, 1))
    model, _ = scramble(generate_tf(idx, seed=11), seed=12)
    r = check_tf0(model, CFG)
    assert r.verdict == "TF0"
    assert r.indices == idx
    assert r.indices.n == model.n


def test_dichotomy_at_condition_2():
    tf0 = generate_tf(StructureIndices(2, 0, 1, 2, (0, 0, 0)), seed=1)
    tf1 = generate_tf(StructureIndices(2, 1, 1, 2, (0, 0, 0)), seed=1)
    assert check_tf1(tf0, CFG).label == "Fail(2)"
    assert check_tf0(tf1, CFG).label == "Fail(2)"
    assert check_tf1(tf1, CFG).verdict == "TF1"


def test_all_conditions_continues_after_failure(crane):
    r = check_tf0(crane, CFG, all_conditions=True)
    assert r.failed == "2"
    assert len(r.conditions) > 2


def test_report_json_and_table(crane_report):
    d = crane_report.as_dict()
    assert d["verdict"] == "TF1"
    assert d["indices"]["k_xi"] == [1, 1, 1]
    t = crane_report.table()
    assert "TF1" in t and "4a" in t


# affine reduction ----------------------------------------------------------

def test_affine_reduction_of_affine_model(crane):
    ext, names = extend_with_inputs(crane)
    assert check_affine_reduction(ext, names, CFG)


def test_affine_reduction_quadratic_toy():
    u = ec.symbol("u")
    model = SystemModel(("x1", "x2", "u"), (u, u * u, ec.const(0)),
                        ((ec.const(0), ec.const(0), ec.const(1)),))
    assert not check_affine_reduction(model, ["u"], CFG)


def test_affine_reduction_generated_tf0():
    ext, names = extend_with_inputs(generate_tf(StructureIndices(2, 0, 1, 2, (0, 1, 0)), seed=2))
    assert check_affine_reduction(ext, names, CFG)


# flat outputs -------------------------------------------------------------

def test_load_position_is_flat_output(crane, crane_report, crane_ws):
    F0 = closure_for_flat_output(crane, crane_report)
    res = verify_flat_output(crane, crane.outputs["load_position"], F0, crane_ws)
    assert res.ok and res.basis_residual <= 1e-8


def test_trolley_is_not_flat_output(crane, crane_report, crane_ws):
    F0 = closure_for_flat_output(crane, crane_report)
    phi = parse_expression_lines((DEMOS / "trolley.txt").read_text(), crane)
    assert not verify_flat_output(crane, phi, F0, crane_ws).ok


def test_wrong_number_of_functions(crane, crane_report, crane_ws):
    F0 = closure_for_flat_output(crane, crane_report)
    with pytest.raises(DimensionMismatch):
        verify_flat_output(crane, crane.outputs["load_position"][:2], F0, crane_ws)


def test_tf0_top_variables_are_flat():
    model = generate_tf(StructureIndices(2, 0, 1, 2, (1, 1, 1)), seed=9)
    r = check_tf0(model, CFG)
    F0 = closure_for_flat_output(model, r)
    assert verify_flat_output(model, model.outputs["top"], F0, r._ws).ok


def test_recombination_invariance(crane, crane_report, crane_ws, rng):
    F0 = closure_for_flat_output(crane, crane_report)
    phi = list(crane.outputs["load_position"])
    trolley = parse_expression_lines((DEMOS / "trolley.txt").read_text(), crane)
    for _ in range(5):
        assert verify_flat_output(crane, recombine(phi, rng), F0, crane_ws).ok
        assert not verify_flat_output(crane, recombine(trolley, rng), F0, crane_ws).ok


# transformations -----------------------------------------------------------

def test_crane_transformation_fixture(crane, crane_ws):
    phi, alpha, beta, idx, expected = crane_tf1_transformation(crane)
    rep = verify_transformation(crane, phi, alpha, beta, idx, crane_ws, expected=expected)
    assert rep.ok and rep.max_residual <= 1e-8


def test_crane_fixture_gravity_term_is_checked(crane, crane_ws):
    phi, alpha, beta, idx, expected = crane_tf1_transformation(crane)
    wrong = dict(expected, chi1_1=ec.symbol("g") * ec.symbol("chi2_1"))
    assert not verify_transformation(crane, phi, alpha, beta, idx, crane_ws, expected=wrong).ok


def test_identity_transformation_on_template():
    idx = StructureIndices(2, 1, 1, 2, (1, 0, 1))
    tpl = tf_template(idx, seed=4)
    model = tpl.to_model()
    phi = [ec.symbol(s) for s in model.states]
    k = len(model.inputs)
    beta = [[1 if i == j else 0 for j in range(k)] for i in range(k)]
    expected = {f"chi{i}_{j}": a for (i, j), a in tpl.a_funcs.items()}
    expected.update({f"chi{idx.k_chi}_{j}": b for j, b in tpl.b_funcs.items()})
    rep = verify_transformation(model, phi, [0] * k, beta, idx, cfg=CFG, expected=expected)
    assert rep.max_residual == 0.0


def test_wrong_index_guess(crane, crane_ws):
    phi, alpha, beta, _, _ = crane_tf1_transformation(crane)
    with pytest.raises(DimensionMismatch):
        verify_transformation(crane, phi, alpha, beta, StructureIndices(2, 1, 1, 3, (1, 1, 1)), crane_ws)
