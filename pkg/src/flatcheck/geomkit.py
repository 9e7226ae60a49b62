"""Vector fields, one-forms and distributions over a model's state space.

Symbolic objects (fields, forms, generator lists) are built from
:mod:`flatcheck.exprcore` nodes. Every geometric decision (rank, inclusion,
involutivity) is taken numerically at the sample points held by a
:class:`Workspace`.

Coefficient functions that would need symbolic elimination (Cauchy
characteristics, annihilators, the W-distributions of the corank-one
construction) are expressed through solve nodes whose pivot pattern is
fixed at a reference point; results are always re-verified pointwise.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import exprcore as ec
from .errors import FlatcheckError, PivotDegenerate, RankNotLocallyConstant, VerificationFailed
from .exprcore import ZERO, _diff_nodes, _masks, add_id, mul_id, neg_id, sub_id, sym_id
from .pointlinalg import MODAL_FRACTION, CheckConfig, modal_rank, ranks_at

_BRACKETS: dict = {}


def _release(mark):
    stale = [k for k, v in _BRACKETS.items()
             if any(i >= mark for i in v.ids + k[0][1] + k[1][1])]
    for k in stale:
        del _BRACKETS[k]


ec.on_release(_release)


class VectorField:
    """Components over an ordered tuple of state names."""

    __slots__ = ("states", "ids", "_key")

    def __init__(self, components, states):
        self.states = tuple(states)
        self.ids = tuple(ec.as_expr(c).id for c in components)
        if len(self.ids) != len(self.states):
            raise FlatcheckError(f"vector field has {len(self.ids)} components for "
                                 f"{len(self.states)} states")
        self._key = (self.states, self.ids)

    @classmethod
    def coordinate(cls, name, states):
        states = tuple(states)
        return cls([1 if s == name else 0 for s in states], states)

    @property
    def components(self):
        return tuple(ec.Expr(i) for i in self.ids)

    @property
    def n(self):
        return len(self.ids)

    def __getitem__(self, i):
        return ec.Expr(self.ids[i])

    def __add__(self, other):
        _same(self, other)
        return VectorField([ec.Expr(add_id(a, b)) for a, b in zip(self.ids, other.ids)], self.states)

    def __sub__(self, other):
        _same(self, other)
        return VectorField([ec.Expr(sub_id(a, b)) for a, b in zip(self.ids, other.ids)], self.states)

    def __neg__(self):
        return VectorField([ec.Expr(neg_id(a)) for a in self.ids], self.states)

    def scale(self, h):
        hid = ec.as_expr(h).id
        return VectorField([ec.Expr(mul_id(hid, a)) for a in self.ids], self.states)

    def is_zero(self):
        return all(i == ZERO for i in self.ids)

    def apply(self, h) -> ec.Expr:
        """Lie derivative of the scalar function ``h`` along the field."""
        hid = ec.as_expr(h).id
        acc = ZERO
        for s, vi in zip(self.states, self.ids):
            if vi != ZERO:
                x = sym_id(s)
                if _masks[hid] & _masks[x]:
                    acc = add_id(acc, mul_id(_diff_nodes(hid, x), vi))
        return ec.Expr(acc)

    def __eq__(self, other):
        return isinstance(other, VectorField) and other._key == self._key

    def __hash__(self):
        return hash(self._key)

    def __repr__(self):
        nz = [f"{s}: {ec.Expr(i)!r}" for s, i in zip(self.states, self.ids) if i != ZERO]
        return f"VectorField({', '.join(nz) or '0'})"


class OneForm:
    __slots__ = ("states", "ids")

    def __init__(self, components, states):
        self.states = tuple(states)
        self.ids = tuple(ec.as_expr(c).id for c in components)
        if len(self.ids) != len(self.states):
            raise FlatcheckError("one-form size does not match the state dimension")

    @classmethod
    def differential(cls, h, states):
        """``dh`` for a scalar function ``h``."""
        return cls([ec.differentiate(h, s) for s in states], states)

    @property
    def components(self):
        return tuple(ec.Expr(i) for i in self.ids)

    def __call__(self, v: VectorField) -> ec.Expr:
        acc = ZERO
        for a, b in zip(self.ids, v.ids):
            if a != ZERO and b != ZERO:
                acc = add_id(acc, mul_id(a, b))
        return ec.Expr(acc)

    def is_zero(self):
        return all(i == ZERO for i in self.ids)

    def __repr__(self):
        nz = [f"{ec.Expr(i)!r} d{s}" for s, i in zip(self.states, self.ids) if i != ZERO]
        return f"OneForm({' + '.join(nz) or '0'})"


def _same(v, w):
    if v.states != w.states:
        raise FlatcheckError("objects live on different state spaces")


def lie_bracket(v: VectorField, w: VectorField) -> VectorField:
    """``[v, w] = (dw) v - (dv) w`` by exact differentiation; memoised."""
    _same(v, w)
    key = (v._key, w._key)
    hit = _BRACKETS.get(key)
    if hit is not None:
        return hit
    rev = _BRACKETS.get((w._key, v._key))
    if rev is not None:
        out = -rev
        _BRACKETS[key] = out
        return out
    xs = [sym_id(s) for s in v.states]
    comps = []
    for i in range(len(xs)):
        wi, vi = w.ids[i], v.ids[i]
        acc = ZERO
        mw, mv = _masks[wi], _masks[vi]
        for j, x in enumerate(xs):
            mx = _masks[x]
            if v.ids[j] != ZERO and mw & mx:
                acc = add_id(acc, mul_id(_diff_nodes(wi, x), v.ids[j]))
            if w.ids[j] != ZERO and mv & mx:
                acc = sub_id(acc, mul_id(_diff_nodes(vi, x), w.ids[j]))
        comps.append(ec.Expr(acc))
    out = VectorField(comps, v.states)
    _BRACKETS[key] = out
    return out


def contract_domega(v: VectorField, omega: OneForm) -> OneForm:
    """``v _| d omega``, i.e. ``w -> d omega(v, w)``."""
    _same(v, omega)
    xs = [sym_id(s) for s in v.states]
    n = len(xs)
    comps = []
    for j in range(n):
        acc = ZERO
        for i in range(n):
            if v.ids[i] == ZERO or i == j:
                continue
            term = sub_id(_diff_nodes(omega.ids[j], xs[i]), _diff_nodes(omega.ids[i], xs[j]))
            if term != ZERO:
                acc = add_id(acc, mul_id(v.ids[i], term))
        comps.append(ec.Expr(acc))
    return OneForm(comps, v.states)


# --------------------------------------------------------------------------
# numeric context

class Workspace:
    """Sample points plus a shared evaluator for one analysis run.

    Points at which some evaluated object turns out non-finite are dropped
    from ``valid`` and ignored by all later decisions.
    """

    def __init__(self, states, points: dict, params: dict | None = None,
                 cfg: CheckConfig | None = None):
        self.states = tuple(states)
        self.cfg = cfg or CheckConfig()
        self.params = dict(params or {})
        self.points = {s: np.asarray(points[s], dtype=float) for s in self.states}
        self.ev = ec.Evaluator({**self.params, **self.points})
        self.N = self.ev.size
        self.valid = np.ones(self.N, dtype=bool)
        self.rng = np.random.default_rng(self.cfg.seed + 7919)
        self._field_cache: dict = {}
        self._rank_cache: dict = {}

    @classmethod
    def for_model(cls, model, cfg: CheckConfig | None = None):
        cfg = cfg or CheckConfig()
        rng = np.random.default_rng(cfg.seed)
        pts = model.sample(cfg.n_points, rng, max_rounds=cfg.max_resample)
        return cls(model.states, pts, model.params, cfg)

    @property
    def tol(self):
        return self.cfg.tol_rel

    def point(self, i: int) -> dict:
        return {s: float(self.points[s][i]) for s in self.states}

    def witness(self, mask=None) -> dict | None:
        """First valid point (optionally restricted to ``mask``)."""
        ok = self.valid if mask is None else (self.valid & mask)
        idx = np.flatnonzero(ok)
        return self.point(int(idx[0])) if idx.size else None

    def check_valid(self):
        if self.valid.sum() < MODAL_FRACTION * self.N:
            raise RankNotLocallyConstant(
                f"only {int(self.valid.sum())} of {self.N} sample points are regular")

    def eval_exprs(self, exprs) -> np.ndarray:
        """Values of a flat list of expressions, shape (N, len(exprs))."""
        if not exprs:
            return np.zeros((self.N, 0))
        vals = np.asarray(self.ev(list(exprs)), dtype=float).T
        bad = ~np.isfinite(vals).all(axis=1)
        if bad.any():
            self.valid &= ~bad
            vals = np.where(np.isfinite(vals), vals, 0.0)
        return vals

    def field(self, v: VectorField) -> np.ndarray:
        """Values of one field, shape (N, n)."""
        hit = self._field_cache.get(v._key)
        if hit is None:
            hit = self.eval_exprs(v.components)
            self._field_cache[v._key] = hit
        return hit

    def matrix(self, fields) -> np.ndarray:
        """Stacked field values, shape (N, n, d)."""
        fields = list(fields)
        if not fields:
            return np.zeros((self.N, len(self.states), 0))
        return np.stack([self.field(f) for f in fields], axis=2)

    def form(self, w: OneForm) -> np.ndarray:
        return self.eval_exprs(w.components)

    def ranks(self, fields) -> np.ndarray:
        return ranks_at(self.matrix(fields), self.tol)

    def rank(self, fields, what: str = "distribution") -> int:
        fields = list(fields)
        key = tuple(f._key for f in fields)
        hit = self._rank_cache.get(key)
        if hit is not None:
            return hit
        r = self.ranks(fields)
        self.check_valid()
        out = modal_rank(r[self.valid], what)
        self._rank_cache[key] = out
        return out

    def decide(self, flags, what: str) -> bool:
        """Modal truth value of a pointwise predicate over the valid points."""
        self.check_valid()
        f = np.asarray(flags, dtype=bool)[self.valid]
        share = f.mean()
        if share >= MODAL_FRACTION:
            return True
        if share <= 1 - MODAL_FRACTION:
            return False
        raise RankNotLocallyConstant(f"{what} holds at {share:.0%} of the sample points only")


# --------------------------------------------------------------------------
# pointwise helpers

def orthonormal_basis(A: np.ndarray, tol: float):
    """Per-point orthonormal column basis of (N, n, d) stacks; returns list of arrays."""
    out = []
    for M in A:
        if M.shape[1] == 0:
            out.append(np.zeros((M.shape[0], 0)))
            continue
        U, s, _ = np.linalg.svd(M, full_matrices=False)
        r = int(np.sum((s > tol * s[0]) & (s[0] > 1e-12))) if s.size else 0
        out.append(U[:, :r])
    return out


def span_residuals(D: np.ndarray, F: np.ndarray, tol: float) -> np.ndarray:
    """Per-point worst relative distance of the columns of ``F`` from span(D).

    The distance of a column ``f`` is ``|f - proj f| / (1 + |f|)``, so a value
    below ``tol`` means "inside" (within floating point noise).
    """
    N = D.shape[0]
    out = np.zeros(N)
    if F.shape[2] == 0:
        return out
    bases = orthonormal_basis(D, tol)
    for k in range(N):
        Q = bases[k]
        Fk = F[k]
        R = Fk - Q @ (Q.T @ Fk) if Q.shape[1] else Fk
        out[k] = np.max(np.linalg.norm(R, axis=0) / (1.0 + np.linalg.norm(Fk, axis=0)))
    return out


def annihilator_basis(A: np.ndarray, tol: float):
    """Per-point orthonormal basis (rows) of the covectors killing the columns of (N, n, d)."""
    out = []
    for M in A:
        n = M.shape[0]
        if M.shape[1] == 0:
            out.append(np.eye(n))
            continue
        U, s, _ = np.linalg.svd(M, full_matrices=True)
        r = int(np.sum((s > tol * s[0]) & (s[0] > 1e-12))) if s.size else 0
        out.append(U[:, r:].T.copy())
    return out


# --------------------------------------------------------------------------
# distributions

class Distribution:
    """Span of finitely many symbolic vector fields."""

    def __init__(self, generators, states=None, name: str = "D"):
        generators = tuple(generators)
        if states is None:
            if not generators:
                raise FlatcheckError("empty distribution needs explicit states")
            states = generators[0].states
        self.states = tuple(states)
        for g in generators:
            if g.states != self.states:
                raise FlatcheckError("generators live on different state spaces")
        self.generators = generators
        self.name = name

    def __len__(self):
        return len(self.generators)

    def __iter__(self):
        return iter(self.generators)

    def __repr__(self):
        return f"Distribution({self.name}, {len(self.generators)} generators)"

    @classmethod
    def tangent_space(cls, states, name="T(X)"):
        return cls([VectorField.coordinate(s, states) for s in states], states, name)

    def __add__(self, other):
        if isinstance(other, Distribution):
            other = other.generators
        return Distribution(self.generators + tuple(other), self.states, self.name)

    def renamed(self, name):
        return Distribution(self.generators, self.states, name)

    # numeric views ------------------------------------------------------
    def matrix(self, ws: Workspace) -> np.ndarray:
        return ws.matrix(self.generators)

    def rank(self, ws: Workspace) -> int:
        return ws.rank(self.generators, self.name)

    def ranks(self, ws: Workspace) -> np.ndarray:
        return ws.ranks(self.generators)

    def is_full(self, ws: Workspace) -> bool:
        return self.rank(ws) == len(self.states)

    def pruned(self, ws: Workspace, keep: int = 0) -> "Distribution":
        """Greedy minimal generator subset with the same modal rank.

        The first ``keep`` generators are kept as they are (they are known to
        be independent); later ones are added only if they raise the rank at
        the majority of the valid points.
        """
        target = self.rank(ws)
        basis = list(self.generators[:keep])
        cur = ws.ranks(basis) if basis else np.zeros(ws.N, dtype=int)
        for g in self.generators[keep:]:
            if len(basis) == target:
                break
            r = ws.ranks(basis + [g])
            gain = (r > cur)[ws.valid]
            if gain.size and gain.mean() >= 0.5:
                basis.append(g)
                cur = r
        out = Distribution(basis, self.states, self.name)
        if len(basis) != target or out.rank(ws) != target:
            raise RankNotLocallyConstant(f"could not select {target} independent generators "
                                         f"for {self.name}")
        return out

    def contains(self, ws: Workspace, fields, what: str = "inclusion") -> bool:
        if isinstance(fields, Distribution):
            fields = fields.generators
        res = self.residuals(ws, fields)
        return ws.decide(res <= ws.tol, what)

    def residuals(self, ws: Workspace, fields) -> np.ndarray:
        if isinstance(fields, Distribution):
            fields = fields.generators
        fields = list(fields)
        return span_residuals(self.matrix(ws), ws.matrix(fields), ws.tol)

    def equals(self, ws: Workspace, other: "Distribution") -> bool:
        return self.contains(ws, other) and other.contains(ws, self)

    def brackets(self, pairs=None) -> list:
        g = self.generators
        if pairs is None:
            pairs = [(i, j) for i in range(len(g)) for j in range(i + 1, len(g))]
        return [lie_bracket(g[i], g[j]) for i, j in pairs]

    def is_involutive(self, ws: Workspace, new_from: int = 0) -> bool:
        """Pairwise brackets of the (pruned) generators stay inside.

        Pairs among the first ``new_from`` generators are assumed known to be
        inside already.
        """
        D = self.pruned(ws)
        if D.is_full(ws):
            return True
        k = len(D.generators)
        pairs = [(i, j) for i in range(k) for j in range(i + 1, k) if j >= new_from]
        if not pairs:
            return True
        return D.contains(ws, D.brackets(pairs), f"involutivity of {self.name}")


def lie_bracket_with(f: VectorField, D: Distribution, name=None) -> list:
    return [lie_bracket(f, g) for g in D.generators]


def derived_flag(D: Distribution, ws: Workspace, max_steps: int = 20) -> list:
    """``[D^(0), D^(1), ...]`` up to stabilisation; each member has pruned generators."""
    cur = D.pruned(ws).renamed(f"{D.name}^(0)")
    flag = [cur]
    new_from = 0
    for step in range(1, max_steps + 1):
        k = len(cur.generators)
        if cur.rank(ws) == len(cur.states):
            break
        pairs = [(i, j) for i in range(k) for j in range(i + 1, k) if j >= new_from]
        nxt = Distribution(cur.generators + tuple(cur.brackets(pairs)), cur.states,
                           f"{D.name}^({step})")
        if nxt.rank(ws) == cur.rank(ws):
            break
        nxt = nxt.pruned(ws, keep=k)
        flag.append(nxt)
        new_from = k
        cur = nxt
    return flag


def involutive_closure(D: Distribution, ws: Workspace, max_steps: int = 20) -> Distribution:
    flag = derived_flag(D, ws, max_steps)
    return flag[-1].renamed(f"closure({D.name})")


def annihilator_at(D: Distribution, point: dict, params: dict | None = None,
                   tol: float = 1e-9) -> np.ndarray:
    """Orthonormal covector basis (rows) of the annihilator of ``D`` at one point."""
    ev = ec.Evaluator({**(params or {}), **point}, strict=True)
    if not D.generators:
        return np.eye(len(D.states))
    M = np.array([[float(ev(c)[0]) for c in g.components] for g in D.generators]).T
    return annihilator_basis(M[None], tol)[0]


# --------------------------------------------------------------------------
# symbolic elimination with numerically chosen pivots

def _pivot_pattern(A: np.ndarray, rho: int, tol: float):
    """Row and column index sets of a nonsingular rho x rho block of ``A``."""
    _, _, cols = scipy.linalg.qr(A, pivoting=True)
    P = np.sort(cols[:rho])
    _, _, rows = scipy.linalg.qr(A[:, P].T, pivoting=True)
    R = np.sort(rows[:rho])
    return R, P


def symbolic_kernel(rows, ws: Workspace, what: str = "kernel"):
    """Kernel basis of a symbolic matrix as lists of coefficient expressions.

    ``rows`` is a list of rows of expressions (r x c). The kernel dimension
    is the modal corank; each basis vector has a unit entry at one free
    column and solve-node entries at the pivot columns.
    """
    r = len(rows)
    c = len(rows[0]) if r else 0
    if c == 0:
        return []
    if r == 0:
        return [[1 if i == j else 0 for i in range(c)] for j in range(c)]
    A = ws.eval_exprs([e for row in rows for e in row]).reshape(ws.N, r, c)
    rk = ranks_at(A, ws.tol)
    ws.check_valid()
    rho = modal_rank(rk[ws.valid], what)
    if rho == 0:
        return [[1 if i == j else 0 for i in range(c)] for j in range(c)]
    if rho == c:
        return []
    candidates = [int(i) for i in np.flatnonzero(ws.valid & (rk == rho))]
    order = ws.rng.permutation(len(candidates))
    tried = 0
    for k in order:
        if tried >= ws.cfg.max_resample:
            break
        tried += 1
        ref = candidates[k]
        R, P = _pivot_pattern(A[ref], rho, ws.tol)
        block = A[:, R][:, :, P]
        sv = np.linalg.svd(block, compute_uv=False)
        good = sv[:, -1] > 1e-8 * sv[:, 0]
        if good[ws.valid].mean() < 1.0 and good[ws.valid & (rk == rho)].mean() < 1.0:
            continue
        free = [j for j in range(c) if j not in set(P.tolist())]
        Mrows = [[rows[i][j] for j in P] for i in R]
        basis = []
        for fcol in free:
            rhs = [-ec.as_expr(rows[i][fcol]) for i in R]
            sol = ec.solve(Mrows, rhs)
            vec = [ec.const(0)] * c
            for pos, j in enumerate(P):
                vec[j] = sol[pos]
            vec[fcol] = ec.const(1)
            basis.append(vec)
        return basis
    raise PivotDegenerate(f"no reference point gives a regular pivot block for {what}")


def symbolic_annihilator(D: Distribution, ws: Workspace) -> list:
    """Smooth one-forms spanning the annihilator of ``D`` near the samples."""
    G = D.pruned(ws)
    n = len(D.states)
    rows = [list(g.components) for g in G.generators]      # d x n, kernel = covectors
    if not rows:
        return [OneForm([1 if i == j else 0 for i in range(n)], D.states) for j in range(n)]
    return [OneForm(vec, D.states) for vec in symbolic_kernel(rows, ws, f"annihilator of {D.name}")]


def combine(coeffs, fields, states) -> VectorField:
    """``sum_k coeffs[k] * fields[k]``."""
    n = len(states)
    acc = [ZERO] * n
    for a, f in zip(coeffs, fields):
        aid = ec.as_expr(a).id
        if aid == ZERO:
            continue
        for i in range(n):
            if f.ids[i] != ZERO:
                acc[i] = add_id(acc[i], mul_id(aid, f.ids[i]))
    return VectorField([ec.Expr(i) for i in acc], states)


# --------------------------------------------------------------------------
# Cauchy characteristics

def _bracket_table(D: Distribution):
    g = D.generators
    k = len(g)
    table = {}
    for a in range(k):
        for b in range(a + 1, k):
            table[(a, b)] = lie_bracket(g[a], g[b])
    return table


def cauchy_pointwise(D: Distribution, ws: Workspace):
    """Numeric Cauchy characteristic: per-point basis arrays and modal rank.

    With independent generators ``d_1..d_k`` and annihilator rows ``P``,
    ``sum_a lam_a d_a`` is characteristic iff ``sum_a lam_a P[d_a, d_b] = 0``
    for every ``b``.
    """
    D = D.pruned(ws)
    k = len(D.generators)
    Dm = D.matrix(ws)
    if D.is_full(ws) or k == 0:
        return [Dm[i] for i in range(ws.N)], k
    table = _bracket_table(D)
    Bv = {key: ws.field(v) for key, v in table.items()}
    anns = annihilator_basis(Dm, ws.tol)
    bases, ranks = [], np.zeros(ws.N, dtype=int)
    for p in range(ws.N):
        Pp = anns[p]
        blocks = []
        for b in range(k):
            col = []
            for a in range(k):
                if a == b:
                    col.append(np.zeros(Pp.shape[0]))
                elif a < b:
                    col.append(Pp @ Bv[(a, b)][p])
                else:
                    col.append(-(Pp @ Bv[(b, a)][p]))
            blocks.append(np.column_stack(col))
        K = np.vstack(blocks)
        U, s, Vt = np.linalg.svd(K)
        rr = int(np.sum((s > ws.tol * s[0]) & (s[0] > 1e-12))) if s.size else 0
        lam = Vt[rr:].T
        bases.append(Dm[p] @ lam)
        ranks[p] = lam.shape[1]
    ws.check_valid()
    return bases, modal_rank(ranks[ws.valid], f"C({D.name})")


def cauchy_rank(D: Distribution, ws: Workspace) -> int:
    return cauchy_pointwise(D, ws)[1]


def pointwise_span_equal(ws: Workspace, bases_a, bases_b, what: str) -> bool:
    """Whether two per-point column bases span the same subspace (modal)."""
    flags = np.zeros(ws.N, dtype=bool)
    for p in range(ws.N):
        A, B = bases_a[p], bases_b[p]
        ra = ranks_at(A[None], ws.tol)[0] if A.shape[1] else 0
        rb = ranks_at(B[None], ws.tol)[0] if B.shape[1] else 0
        both = np.hstack([A, B])
        rab = ranks_at(both[None], ws.tol)[0] if both.shape[1] else 0
        flags[p] = ra == rb == rab
    return ws.decide(flags, what)


def cauchy_characteristic(D: Distribution, ws: Workspace, verify: bool = True) -> Distribution:
    """Symbolic generators of ``C(D) = {v in D : [v, D] in D}``.

    Raises :class:`VerificationFailed` if the constructed fields do not
    satisfy the defining inclusion at the sample points.
    """
    D = D.pruned(ws)
    k = len(D.generators)
    name = f"C({D.name})"
    if k == 0 or D.is_full(ws):
        return D.renamed(name)
    table = _bracket_table(D)
    omegas = symbolic_annihilator(D, ws)
    rows = []
    for om in omegas:
        for b in range(k):
            row = []
            for a in range(k):
                if a == b:
                    row.append(ec.const(0))
                elif a < b:
                    row.append(om(table[(a, b)]))
                else:
                    row.append(-om(table[(b, a)]))
            rows.append(row)
    lams = symbolic_kernel(rows, ws, name)
    fields = [combine(lam, D.generators, D.states) for lam in lams]
    C = Distribution(fields, D.states, name)
    if fields:
        C = C.pruned(ws)
    if verify and C.generators:
        br = [lie_bracket(c, g) for c in C.generators for g in D.generators]
        if not D.contains(ws, br, f"verification of {name}"):
            raise VerificationFailed(f"constructed generators of {name} leave {D.name} under brackets")
        if not D.contains(ws, C.generators, f"verification of {name}"):
            raise VerificationFailed(f"constructed generators of {name} are not in {D.name}")
    return C
