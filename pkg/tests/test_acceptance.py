"""Acceptance criteria 1-7; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from builders import (central_difference_check, contact_form, recombine, random_field,
                      random_distributions)
from conftest import DEMOS, plane_ws
from flatcheck import exprcore
from flatcheck.cli import read_transformation
from flatcheck.geomkit import (Workspace, cauchy_characteristic, cauchy_rank, derived_flag,
                               lie_bracket)
from flatcheck.normalforms import crane_model, crane_tf1_transformation, generate_tf, scramble
from flatcheck.pointlinalg import CheckConfig
from flatcheck.sfechk import (StructureIndices, c_base, check_tf0, check_tf1,
                              closure_for_flat_output, drift_sequence, model_fields,
                              verify_flat_output, verify_transformation)
from flatcheck.subdist import CFieldAnsatz, construct_L_all, lemma2_residuals
from oracle_cases import TF0_CASES, TF1_CASES


@pytest.fixture
def say(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def test_criterion_1_crane_regression(say):
    cfg = CheckConfig(n_points=25, tol_rel=1e-8, seed=42)
    t0 = time.perf_counter()
    model = crane_model()
    rep = check_tf1(model, cfg)
    elapsed = time.perf_counter() - t0
    st, ws = rep._state, rep._ws
    got = {
        "rank D1": st["seq"][0].rank(ws), "rank D2": st["seq"][1].rank(ws),
        "k_zeta": st["k_zeta"], "rank C(D2)": cauchy_rank(st["seq"][1], ws),
        "rank E": st["E"].rank(ws), "rank L": st["L"].rank(ws),
        "rank Ebar": st["Ebar"].rank(ws), "k_chi": st["k_chi"],
        "F": rep.ranks["F"],
    }
    want = {"rank D1": 3, "rank D2": 6, "k_zeta": 1, "rank E": 5, "rank L": 4,
            "rank Ebar": 7, "k_chi": 2, "F": [7, 10]}
    ok = (all(got[k] == v for k, v in want.items()) and got["rank C(D2)"] != 3
          and rep.verdict == "TF1" and rep.indices == StructureIndices(2, 1, 1, 2, (1, 1, 1))
          and elapsed <= 60 and ws.valid.sum() >= 20)
    assert say(1, ok, f"{got} verdict {rep.label} indices {rep.indices} in {elapsed:.1f} s")


def test_criterion_2_lemma2_ansatz(say):
    model = crane_model()
    ws = Workspace.for_model(model, CheckConfig(n_points=25, seed=1))
    f, _ = model_fields(model)
    D2 = drift_sequence(model, ws)[0][1]
    ans = CFieldAnsatz(model.ansatz, c_base(model, 1))
    worst = float(lemma2_residuals(ans, f, D2, ws)[ws.valid].max())
    rng = np.random.default_rng(2)
    rand = []
    for _ in range(10):
        rows = rng.uniform(-1, 1, (2, 3)).tolist()
        rand.append(float(lemma2_residuals(CFieldAnsatz(rows, ans.base), f, D2, ws)[ws.valid].max()))
    ok = worst <= 1e-9 and min(rand) > 1e-3
    assert say(2, ok, f"ansatz max residual {worst:.2e}; random alpha min-of-max {min(rand):.2e}")


def test_criterion_3_flat_output(say):
    model = crane_model()
    rep = check_tf1(model, CheckConfig(n_points=25, seed=3))
    F0 = closure_for_flat_output(model, rep)
    phi = list(model.outputs["load_position"])
    res = verify_flat_output(model, phi, F0, rep._ws)
    rng = np.random.default_rng(3)
    recs = [verify_flat_output(model, recombine(phi, rng), F0, rep._ws) for _ in range(5)]
    ok = res.ok and res.basis_residual <= 1e-8 and all(r.ok for r in recs)
    assert say(3, ok, f"load position residual {res.basis_residual:.2e}; "
                      f"recombinations ok {sum(r.ok for r in recs)}/5 "
                      f"(worst {max(r.basis_residual for r in recs):.2e})")


def test_criterion_4_oracle_round_trip(say):
    t0 = time.perf_counter()
    bad = []
    for k, idx in enumerate(TF0_CASES + TF1_CASES):
        # instances are unrelated; release their nodes so memory stays flat
        with exprcore.scope():
            model, _ = scramble(generate_tf(idx, seed=100 + k), seed=200 + k)
            own, other = (check_tf0, check_tf1) if idx.s == 0 else (check_tf1, check_tf0)
            r = own(model)
            r2 = other(model)
            # chain order within k_xi is not an invariant; the report lists it sorted
            exact = r.indices is not None and r.indices.same_up_to_chain_order(idx)
            if r.verdict != f"TF{idx.s}" or not exact or r2.label != "Fail(2)":
                bad.append((idx, r.label, r.indices, r2.label))
    elapsed = time.perf_counter() - t0
    n = len(TF0_CASES) + len(TF1_CASES)
    nmax = max(i.n for i in TF0_CASES + TF1_CASES)
    ok = not bad and len(TF0_CASES) >= 20 and len(TF1_CASES) >= 20
    assert say(4, ok, f"{n - len(bad)}/{n} scrambled instances (n <= {nmax}) correct, "
                      f"cross-check Fail(2) in all, {elapsed:.0f} s; failures {bad}")


def test_criterion_5_geometry_invariants(say):
    rng = np.random.default_rng(5)
    xyz = ["x", "y", "z"]
    ws = plane_ws(xyz, n=10)
    worst_j = worst_a = 0.0
    for _ in range(100):
        u, v, w = (random_field(xyz, rng) for _ in range(3))
        terms = [ws.field(lie_bracket(u, lie_bracket(v, w))), ws.field(lie_bracket(v, lie_bracket(w, u))),
                 ws.field(lie_bracket(w, lie_bracket(u, v)))]
        scale = max(1.0, *(np.abs(t).max() for t in terms))
        worst_j = max(worst_j, np.abs(sum(terms)).max() / scale)
        uv, vu = ws.field(lie_bracket(u, v)), ws.field(lie_bracket(v, u))
        worst_a = max(worst_a, np.abs(uv + vu).max() / max(1.0, np.abs(uv).max()))
    flags_ok = cauchy_ok = True
    for D in random_distributions(rng, 20):
        wsd = plane_ws(D.states, seed=int(rng.integers(1000)))
        flag = derived_flag(D, wsd)
        ranks = [E.rank(wsd) for E in flag]
        flags_ok &= all(a < b for a, b in zip(ranks, ranks[1:])) and len(derived_flag(flag[-1], wsd)) == 1
        C = cauchy_characteristic(D, wsd)
        if C.generators:
            cauchy_ok &= D.contains(wsd, C.generators) and C.is_involutive(wsd)
    unique = True
    for m in (2, 3):
        for kk in (3, 4):
            D = contact_form(m, kk)
            wsc = plane_ws(D.states)
            res = construct_L_all(derived_flag(D, wsc)[kk - 2], wsc)
            unique &= all(r.L is not None for r in res) and \
                all(r.L.equals(wsc, res[0].L) for r in res[1:])
    ok = worst_j <= 1e-9 and worst_a <= 1e-9 and flags_ok and cauchy_ok and unique
    assert say(5, ok, f"Jacobi {worst_j:.1e}, antisymmetry {worst_a:.1e} over 100 triples; "
                      f"flags monotone/stable {flags_ok}; C(D) inside and involutive {cauchy_ok} "
                      f"on 20 distributions; Lemma-1 uniqueness {unique}")


def test_criterion_6_differentiation_oracle(say):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(500):
        d, fd = central_difference_check(rng)
        worst = max(worst, abs(d - fd) / (1 + abs(d)))
    ok = worst <= 1e-6
    assert say(6, ok, f"500 expression/point pairs (with solve nodes), worst |d - fd|/(1+|d|) {worst:.1e}")


def test_criterion_7_transformation(say):
    model = crane_model()
    ws = Workspace.for_model(model, CheckConfig(n_points=25, seed=7))
    phi, alpha, beta, idx, expected = crane_tf1_transformation(model)
    rep = verify_transformation(model, phi, alpha, beta, idx, ws, expected=expected)
    mphi, malpha, mbeta, midx, mexp = read_transformation((DEMOS / "crane_tf1.map").read_text(), model)
    rep2 = verify_transformation(model, mphi, malpha, mbeta, midx, ws, expected=mexp)
    ok = rep.ok and rep2.ok and max(rep.max_residual, rep2.max_residual) <= 1e-8
    assert say(7, ok, f"fixture max residual {rep.max_residual:.1e}; "
                      f"map file max residual {rep2.max_residual:.1e}")
