import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatcheck.errors import RankNotLocallyConstant
from flatcheck.geomkit import VectorField, lie_bracket
from flatcheck.pointlinalg import (CheckConfig, in_span_at, modal_rank, nullspace_at, rank_at,
                                   ranks_at, span_residual)
from flatcheck.sfechk import closure_for_flat_output, model_fields


def test_rank_identity():
    assert rank_at([(1, 0), (0, 1)]) == 2


def test_rank_parallel():
    assert rank_at([(1, 0), (2, 0)]) == 1


def test_rank_of_zero_columns():
    assert rank_at([(0, 0), (0, 0)]) == 0


def test_in_span_examples():
    assert in_span_at((1, 1), [(1, 0), (0, 1)])
    assert not in_span_at((0, 0, 1), [(1, 0, 0)])


def test_nullspace_examples():
    ns = nullspace_at([[1, 0]])
    assert ns.shape == (2, 1)
    assert abs(ns[1, 0]) == pytest.approx(1.0)
    assert nullspace_at(np.eye(3)).shape == (3, 0)


def test_nullspace_orthonormal(rng):
    A = rng.normal(size=(3, 4)) @ rng.normal(size=(4, 7))
    ns = nullspace_at(A)
    assert ns.shape[1] == 7 - rank_at(A.T)
    np.testing.assert_allclose(ns.T @ ns, np.eye(ns.shape[1]), atol=1e-12)
    np.testing.assert_allclose(A @ ns, 0, atol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        CheckConfig(n_points=2)
    with pytest.raises(ValueError):
        CheckConfig(tol_rel=0.5)


def test_modal_rank_threshold():
    assert modal_rank([3] * 9 + [2]) == 3
    with pytest.raises(RankNotLocallyConstant):
        modal_rank([3] * 6 + [2] * 4)


def test_ranks_at_stack(rng):
    stack = np.stack([rng.normal(size=(5, 2)) @ rng.normal(size=(2, 4)) for _ in range(6)])
    assert ranks_at(stack).tolist() == [2] * 6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_constructed_rank(r, seed):
    g = np.random.default_rng(seed)
    A = g.normal(size=(8, r)) @ g.normal(size=(r, 7))
    assert rank_at(A) == r


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_rank_invariant_under_permutation_and_scaling(seed):
    g = np.random.default_rng(seed)
    r = int(g.integers(1, 5))
    A = g.normal(size=(6, r)) @ g.normal(size=(r, 6))
    B = A[:, g.permutation(6)] * g.uniform(0.1, 10, size=6)
    assert rank_at(B) == rank_at(A) == r


def test_span_residual_scale():
    assert span_residual((1, 0), [(1, 0)]) < 1e-3
    assert span_residual((0, 1), [(1, 0)]) > 1e6


# crane examples -------------------------------------------------------------

def test_crane_D2_rank_at_point(crane_ws, crane_fields):
    f, gs = crane_fields
    cols = list(gs) + [lie_bracket(f, g) for g in gs]
    M = crane_ws.matrix(cols)
    p = int(np.flatnonzero(crane_ws.valid)[0])
    assert rank_at(M[p]) == 6


def _flow_bracket(F, G, x, h=1e-4):
    # commutator of flows: [F, G](x) ~ (phi^G_-h phi^F_-h phi^G_h phi^F_h x - x) / h^2
    # with one Euler-free second-order scheme using RK4 substeps
    def flow(V, y, t):
        k1 = V(y)
        k2 = V(y + t / 2 * k1)
        k3 = V(y + t / 2 * k2)
        k4 = V(y + t * k3)
        return y + t / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    y = flow(F, x, h)
    y = flow(G, y, h)
    y = flow(F, y, -h)
    y = flow(G, y, -h)
    return (y - x) / h ** 2


def test_crane_ffg0_leaves_D2_with_flow_oracle(crane, crane_ws, crane_fields):
    """Independent oracle: the bracket [f, [f, g0]] by composing numeric flows."""
    from flatcheck import exprcore as ec
    f, gs = crane_fields
    sub = {k: ec.const(v) for k, v in crane.params.items()}
    ff = ec.lambdify(ec.substitute(list(f.components), sub), crane.states)
    g0 = ec.lambdify(ec.substitute(list(gs[0].components), sub), crane.states)
    fg0 = ec.lambdify(ec.substitute(list(lie_bracket(f, gs[0]).components), sub), crane.states)
    F = lambda y: np.asarray(ff(*y))  # noqa: E731
    G = lambda y: np.asarray(fg0(*y))  # noqa: E731
    p = int(np.flatnonzero(crane_ws.valid)[0])
    x = np.array([crane_ws.point(p)[s] for s in crane.states])
    # flow commutator gives [G, F] with this composition order; sign is irrelevant for span tests
    br = _flow_bracket(F, G, x)
    cols = [np.asarray(g0(*x))] + [np.asarray(crane_ws.matrix(gs)[p][:, j]) for j in (1, 2)] \
        + list(crane_ws.matrix([lie_bracket(f, g) for g in gs])[p].T)
    Q, _ = np.linalg.qr(np.column_stack(cols))
    out = br - Q @ (Q.T @ br)
    assert np.linalg.norm(out) > 1e-2 * np.linalg.norm(br)
    symbolic = crane_ws.matrix([lie_bracket(f, lie_bracket(f, gs[0]))])[p][:, 0]
    assert not in_span_at(symbolic, cols)


def test_crane_annihilator_of_F0(crane, crane_report, crane_ws):
    F0 = closure_for_flat_output(crane, crane_report)
    M = F0.matrix(crane_ws)
    p = int(np.flatnonzero(crane_ws.valid)[0])
    assert nullspace_at(M[p].T).shape[1] == 3
