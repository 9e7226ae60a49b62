"""Corank-one involutive subdistributions and the quadratic c-field conditions."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import least_squares

from . import exprcore as ec
from .errors import HypothesisViolated
from .geomkit import (Distribution, VectorField, Workspace, annihilator_basis, cauchy_pointwise,
                      combine, lie_bracket, orthonormal_basis, pointwise_span_equal,
                      symbolic_annihilator, symbolic_kernel, span_residuals)
from .pointlinalg import ranks_at


# --------------------------------------------------------------------------
# corank-one involutive subdistribution

@dataclass
class LConstruction:
    """Outcome of the W-pair construction for one pair of one-forms."""

    L: Distribution | None
    pair: tuple
    r: int
    W_ranks: tuple
    reason: str = ""


def _omega_matrices(D: Distribution, ws: Workspace):
    """Pruned D, its new derived directions, annihilator forms and the bracket table."""
    D = D.pruned(ws)
    d = len(D.generators)
    k = d
    pairs = list(combinations(range(k), 2))
    brackets = {p: lie_bracket(D.generators[p[0]], D.generators[p[1]]) for p in pairs}
    D1 = Distribution(D.generators + tuple(brackets.values()), D.states, f"{D.name}^(1)")
    r = D1.rank(ws) - d
    return D, D1, r, brackets


def _w_rows(omega, D: Distribution, brackets):
    """Antisymmetric matrix ``omega([d_k, d_l])``; its kernel is W."""
    k = len(D.generators)
    rows = [[ec.const(0)] * k for _ in range(k)]
    for (a, b), br in brackets.items():
        val = omega(br)
        rows[a][b] = val
        rows[b][a] = -val
    return rows


def w_distributions(D: Distribution, ws: Workspace, seed: int = 0):
    """Symbolic W_1..W_r for randomly combined annihilator forms.

    Returns ``(D_pruned, r, [W_i])``. Raises :class:`HypothesisViolated`
    when the first derived step adds fewer than two directions.
    """
    D, D1, r, brackets = _omega_matrices(D, ws)
    if r < 2:
        raise HypothesisViolated(f"{D.name}^(1) adds {r} direction(s); at least 2 are needed")
    P = symbolic_annihilator(D, ws)
    new = D1.pruned(ws, keep=len(D.generators)).generators[len(D.generators):]
    Pv = np.stack([ws.form(w) for w in P], axis=1)                 # (N, n-d, n)
    Ev = ws.matrix(new)                                             # (N, n, r)
    base = Pv @ Ev                                                  # (N, n-d, r)
    rng = np.random.default_rng(seed + 101)
    for _ in range(ws.cfg.max_resample):
        C = np.round(rng.uniform(-1, 1, size=(r, len(P))) * 8) / 8
        M = np.einsum("ik,nkr->nir", C, base)
        sv = np.linalg.svd(M, compute_uv=False)
        ok = sv[:, -1] > 1e-6 * sv[:, 0]
        if ok[ws.valid].all():
            break
    else:
        raise HypothesisViolated("could not choose one-forms independent modulo the derived annihilator")
    omegas = []
    for i in range(r):
        comps = [ec.const(0)] * len(D.states)
        for k, w in enumerate(P):
            if C[i, k] != 0:
                ci = ec.const(float(C[i, k]))
                comps = [a + ci * b for a, b in zip(comps, w.components)]
        omegas.append(type(P[0])(comps, D.states))
    Ws = []
    for i, om in enumerate(omegas):
        lams = symbolic_kernel(_w_rows(om, D, brackets), ws, f"W_{i + 1}")
        fields = [combine(lam, D.generators, D.states) for lam in lams]
        Ws.append(Distribution(fields, D.states, f"W_{i + 1}"))
    return D, r, Ws


def construct_L_all(D: Distribution, ws: Workspace, seed: int = 0) -> list:
    """Run the construction for every admissible pair ``i < j``."""
    Dp, r, Ws = w_distributions(D, ws, seed)
    return [_finish_L(Dp, ws, Ws, (i, j), r) for i, j in combinations(range(r), 2)]


def _finish_L(D, ws, Ws, pair, r) -> LConstruction:
    i, j = pair
    Wi, Wj = Ws[i], Ws[j]
    wr = (Wi.rank(ws) if len(Wi) else 0, Wj.rank(ws) if len(Wj) else 0)
    L = Distribution(Wi.generators + Wj.generators, D.states, "L")
    d = len(D.generators)
    if not L.generators or L.rank(ws) != d - 1:
        got = L.rank(ws) if L.generators else 0
        return LConstruction(None, pair, r, wr, f"W_{i + 1} + W_{j + 1} has rank {got}, expected {d - 1}")
    L = L.pruned(ws)
    if not L.is_involutive(ws):
        return LConstruction(None, pair, r, wr, f"W_{i + 1} + W_{j + 1} is not involutive")
    return LConstruction(L, pair, r, wr)


def construct_L(D: Distribution, ws: Workspace, pair=(0, 1), seed: int = 0) -> Distribution | None:
    """The involutive corank-one subdistribution of ``D``, or ``None`` if none exists.

    One-forms ``omega^i`` are random constant combinations of an annihilator
    basis, chosen independent modulo the annihilator of ``D^(1)``. ``W_i`` is
    the kernel of ``(v, w) -> omega^i([v, w])`` on ``D`` and ``L = W_i + W_j``.
    """
    Dp, r, Ws = w_distributions(D, ws, seed)
    if max(pair) >= r:
        raise HypothesisViolated(f"pair {pair} out of range for r = {r}")
    return _finish_L(Dp, ws, Ws, pair, r).L


# --------------------------------------------------------------------------
# quadratic conditions on the c-field coefficients

@dataclass
class CFieldAnsatz:
    """Candidate ``c_i = sum_k alpha[i][k] v_k`` for ``i = 1..m``.

    ``alpha`` holds one row of m+1 coefficient expressions per c-field (the
    transpose of the usual ``alpha^k_i`` layout); ``base`` holds ``v_0..v_m``.
    """

    alpha: tuple
    base: tuple

    def __post_init__(self):
        self.alpha = tuple(tuple(ec.as_expr(a) for a in row) for row in self.alpha)
        self.base = tuple(self.base)
        for row in self.alpha:
            if len(row) != len(self.base):
                raise HypothesisViolated("each ansatz row needs one coefficient per base field")

    @property
    def m(self):
        return len(self.alpha)

    def fields(self) -> list:
        states = self.base[0].states
        return [combine(row, self.base, states) for row in self.alpha]

    def values(self, ws: Workspace) -> np.ndarray:
        """Numeric coefficients, shape (N, m, m+1)."""
        flat = [a for row in self.alpha for a in row]
        return ws.eval_exprs(flat).reshape(ws.N, self.m, len(self.base))


def second_brackets(f: VectorField, base) -> dict:
    """``{(l, p): [v_l, [v_p, f]]}`` for ``l <= p``."""
    out = {}
    k = len(base)
    for p in range(k):
        vf = lie_bracket(base[p], f)
        for l in range(p + 1):
            out[(l, p)] = lie_bracket(base[l], vf)
    return out


def _quadratic_values(alpha, B, scale):
    """Stacked ``R_ij`` at one point; ``alpha`` is (m, m+1), ``B[l, p]`` n-vectors."""
    m, k = alpha.shape
    out = {}
    for i in range(m):
        for j in range(i, m):
            acc = np.zeros(B.shape[-1])
            mag = 0.0
            for l in range(k):
                for p in range(l, k):
                    c = alpha[i, l] * alpha[j, l] if l == p else \
                        alpha[i, l] * alpha[j, p] + alpha[i, p] * alpha[j, l]
                    acc += c * B[l, p]
                    mag += abs(c) * scale[l, p]
            out[(i, j)] = (acc, mag)
    return out


def _bracket_values(ws, f, base):
    sb = second_brackets(f, base)
    k = len(base)
    B = np.zeros((ws.N, k, k, len(f.states)))
    for (l, p), v in sb.items():
        B[:, l, p] = ws.field(v)
    return B


def lemma2_residuals(ansatz: CFieldAnsatz, f: VectorField, D2: Distribution,
                     ws: Workspace) -> np.ndarray:
    """Relative distance of each quadratic combination from ``D2``.

    Returns an (N, m, m) symmetric array. Entry (i, j) is
    ``|R_ij - proj_D2 R_ij| / (1 + sum |coeff| |[v_l,[v_p,f]]|)``.
    """
    alpha = ansatz.values(ws)
    if np.any(ranks_at(alpha, ws.tol)[ws.valid] < ansatz.m):
        raise HypothesisViolated("ansatz c-fields are linearly dependent")
    B = _bracket_values(ws, f, ansatz.base)
    scale = np.linalg.norm(B, axis=-1)
    bases = orthonormal_basis(D2.matrix(ws), ws.tol)
    m = ansatz.m
    out = np.zeros((ws.N, m, m))
    for p in range(ws.N):
        Q = bases[p]
        for (i, j), (R, mag) in _quadratic_values(alpha[p], B[p], scale[p]).items():
            res = R - Q @ (Q.T @ R)
            out[p, i, j] = out[p, j, i] = np.linalg.norm(res) / (1.0 + mag)
    return out


@dataclass
class CSolutions:
    """Pointwise solutions of the quadratic conditions at one sample point.

    Each candidate is an (m, m+1) array whose rows span an m-dimensional
    subspace of coefficient space; ``normals`` holds the orthogonal
    complement directions used for de-duplication.
    """

    candidates: list = field(default_factory=list)
    normals: list = field(default_factory=list)
    degenerate: bool = False
    point_index: int = 0

    def __bool__(self):
        return self.degenerate or bool(self.candidates)


def _isotropy_residual(nvec, PB, scale):
    """Components of ``P B(s, t)`` for s, t spanning ``nvec``'s orthogonal complement."""
    k = nvec.size
    nn = nvec / np.linalg.norm(nvec)
    Pi = np.eye(k) - np.outer(nn, nn)
    # sym[a, b] = P B(Pi e_a, Pi e_b) for a <= b
    full = np.einsum("la,pb,lpr->abr", Pi, Pi, PB)
    iu = np.triu_indices(k)
    return full[iu].ravel() / scale


def solve_c_pointwise(f: VectorField, base, D2: Distribution, ws: Workspace,
                      point_index: int | None = None, n_starts: int = 40,
                      seed: int = 0, tol: float = 1e-10) -> CSolutions:
    """Solve the quadratic conditions numerically at one point.

    The unknown is the span S of the c-coefficient rows; S is parameterised
    by its normal ``n`` in coefficient space and must be isotropic for the
    vector-valued form ``(a, b) -> sum a_l b_p [v_l, [v_p, f]] mod D2``.
    Damped Gauss-Newton (Levenberg-Marquardt) runs from ``n_starts`` random
    normals; solutions are identified up to sign and scaling of ``n``.
    """
    base = tuple(base)
    k = len(base)
    if point_index is None:
        point_index = int(np.flatnonzero(ws.valid)[0])
    B = _bracket_values(ws, f, base)[point_index]
    # symmetric bilinear form: B(e_l, e_p) = [v_l,[v_p,f]] for l <= p
    Bs = np.zeros((k, k, B.shape[-1]))
    for l in range(k):
        for p in range(l, k):
            Bs[l, p] = Bs[p, l] = B[l, p]
    P = annihilator_basis(D2.matrix(ws)[point_index][None], ws.tol)[0]
    PB = np.einsum("rn,lpn->lpr", P, Bs)
    scale = max(1.0, float(np.abs(Bs).max()))
    out = CSolutions(point_index=point_index)
    if np.abs(PB).max() <= ws.tol * scale * 10:
        out.degenerate = True
        return out
    rng = np.random.default_rng(seed + 31 * point_index)
    for _ in range(n_starts):
        x0 = rng.normal(size=k)
        sol = least_squares(_isotropy_residual, x0, args=(PB, scale), method="lm",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        if np.linalg.norm(sol.fun) > tol:
            continue
        nvec = sol.x / np.linalg.norm(sol.x)
        if any(abs(abs(nvec @ u) - 1.0) < 1e-6 for u in out.normals):
            continue
        out.normals.append(nvec)
        # rows: orthonormal basis of the complement of nvec
        _, _, Vt = np.linalg.svd(nvec[None])
        out.candidates.append(Vt[1:].copy())
    return out


def matches_solution(alpha: np.ndarray, sols: CSolutions, tol: float = 1e-6) -> bool:
    """Whether the rows of ``alpha`` span one of the solution subspaces."""
    a = np.asarray(alpha, dtype=float)
    for nvec in sols.normals:
        rel = np.linalg.norm(a @ nvec) / max(np.linalg.norm(a), 1e-300)
        if rel < tol:
            return True
    return False


# --------------------------------------------------------------------------
# Cauchy condition for candidate c-fields

def e_distribution(c_fields, f: VectorField, D_kz: Distribution, name: str = "E") -> Distribution:
    return Distribution(tuple(D_kz.generators) + tuple(lie_bracket(f, c) for c in c_fields),
                        D_kz.states, name)


def verify_c_fields(c_fields, f: VectorField, D_kz: Distribution, D_kzm1: Distribution | None,
                    ws: Workspace) -> bool:
    """Whether ``C(D_kz + [f, c]) = D_kz-1 + span{c}`` at the samples.

    Also requires the c-fields to lie in ``D_kz`` and to be independent
    modulo ``D_kz-1``.
    """
    c_fields = list(c_fields)
    states = D_kz.states
    lower = tuple(D_kzm1.generators) if D_kzm1 is not None else ()
    if not D_kz.contains(ws, c_fields, "c-fields in D"):
        return False
    low_rank = Distribution(lower, states).rank(ws) if lower else 0
    target = Distribution(lower + tuple(c_fields), states, "target")
    if target.rank(ws) != low_rank + len(c_fields):
        return False
    E = e_distribution(c_fields, f, D_kz)
    bases, _ = cauchy_pointwise(E, ws)
    tm = target.matrix(ws)
    return pointwise_span_equal(ws, bases, [tm[p] for p in range(ws.N)], "C(E) = target")


def ansatz_residual(c_fields, f, D_kz, D_kzm1, ws) -> float:
    """Largest relative distance of the c-fields' brackets with E from E (diagnostic)."""
    E = e_distribution(c_fields, f, D_kz)
    br = [lie_bracket(c, g) for c in c_fields for g in E.generators]
    res = span_residuals(E.matrix(ws), ws.matrix(br), ws.tol)
    return float(res[ws.valid].max()) if br else 0.0
