"""Triangular normal forms, random scrambling and the crane example.

Generated instances are the oracle for the decision procedures: a model
built here in TF_s coordinates and then hidden behind a random polynomial
diffeomorphism and static feedback must be recognised with exactly the
indices it was built from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

from . import exprcore as ec
from .errors import BadIndices, NonFiniteState, NonInvertibleScramble
from .modeldsl import SystemModel, loads_model
from .sfechk import StructureIndices, model_fields, tf_state_names


# --------------------------------------------------------------------------
# random polynomials

def _coef(rng, lo=-1.0, hi=1.0) -> Fraction:
    while True:
        c = Fraction(int(rng.integers(round(lo * 8), round(hi * 8) + 1)), 8)
        if c != 0:
            return c


def random_polynomial(names, rng, degree: int = 2, terms: int = 3, lo=-1.0, hi=1.0) -> ec.Expr:
    """Sparse polynomial with rational coefficients in ``[lo, hi]``."""
    names = list(names)
    out = ec.const(0)
    if degree <= 0 or terms <= 0 or not names:
        return out
    for _ in range(terms):
        d = int(rng.integers(1, degree + 1))
        mono = ec.const(_coef(rng, lo, hi))
        for v in rng.choice(len(names), size=d, replace=True):
            mono = mono * ec.symbol(names[int(v)])
        out = out + mono
    return out


# --------------------------------------------------------------------------
# triangular forms

@dataclass
class TFTemplate:
    """A TF_s system in its normal coordinates.

    ``a_funcs`` maps ``(i, j)`` to ``a^i_j`` and ``b_funcs`` maps ``j`` to
    ``b_{0,j}``; both only involve their admissible arguments.
    """

    indices: StructureIndices
    a_funcs: dict
    b_funcs: dict
    name: str = "tf"

    @property
    def states(self):
        return tf_state_names(self.indices)

    def to_model(self) -> SystemModel:
        idx = self.indices
        m = idx.m
        names = self.states
        pos = {s: i for i, s in enumerate(names)}
        n = len(names)
        Z = {s: ec.symbol(s) for s in names}
        zero = ec.const(0)
        f = [zero] * n
        g = [[zero] * n for _ in range(m + 1)]
        zeta_in = idx.k_zeta - idx.s == 0
        z0 = None if zeta_in else Z["zeta1_0"]

        def top_zeta(j):
            return None if idx.k_zeta == 0 else Z[f"zeta1_{j}"]

        for j, k in enumerate(idx.k_xi):
            for i in range(1, k + 1):
                nxt = f"xi{i + 1}_{j}" if i < k else ("chi0" if j == 0 else f"chi1_{j}")
                f[pos[f"xi{i}_{j}"]] = Z[nxt]
        if zeta_in:
            g[0][pos["chi0"]] = ec.const(1)
        else:
            f[pos["chi0"]] = z0
        for i in range(1, idx.k_chi):
            for j in range(1, m + 1):
                row = pos[f"chi{i}_{j}"]
                up = Z[f"chi{i + 1}_{j}"]
                a = self.a_funcs.get((i, j), zero)
                if zeta_in:
                    f[row] = a
                    g[0][row] = up
                else:
                    f[row] = up * z0 + a
        for j in range(1, m + 1):
            row = pos[f"chi{idx.k_chi}_{j}"]
            b = self.b_funcs.get(j, zero)
            zj = top_zeta(j)
            if zj is None:
                g[j][row] = ec.const(1)
            else:
                f[row] = zj
            if zeta_in:
                g[0][row] = b
            else:
                f[row] = f[row] + b * z0
        for j in range(m + 1):
            length = idx.k_zeta - (idx.s if j == 0 else 0)
            for i in range(1, length + 1):
                row = pos[f"zeta{i}_{j}"]
                if i < length:
                    f[row] = Z[f"zeta{i + 1}_{j}"]
                else:
                    g[j][row] = ec.const(1)
        ansatz = None
        if idx.s == 1:
            ansatz = tuple(tuple(ec.const(1 if k == j else 0) for k in range(m + 1))
                           for j in range(1, m + 1))
        top = {"top": tuple(Z[f"xi1_{j}"] if idx.k_xi[j] else
                            (Z["chi0"] if j == 0 else Z[f"chi1_{j}"]) for j in range(m + 1))}
        return SystemModel(names, f, g, {}, {}, name=self.name, ansatz=ansatz, outputs=top)


def check_indices(idx: StructureIndices):
    if idx.m < 2:
        raise BadIndices("at least three inputs (m >= 2) are required")
    if idx.s not in (0, 1):
        raise BadIndices("s must be 0 or 1")
    if idx.k_chi < 2:
        raise BadIndices("k_chi must be at least 2")
    if idx.k_zeta < idx.s or idx.k_zeta < 0:
        raise BadIndices("k_zeta must be at least s")
    if len(idx.k_xi) != idx.m + 1 or any(k < 0 for k in idx.k_xi):
        raise BadIndices("k_xi needs m + 1 non-negative entries")


def tf_template(indices: StructureIndices, seed: int = 0, drift_complexity: int = 2) -> TFTemplate:
    """Random admissible ``a^i_j`` and ``b_{0,j}`` (degree <= drift_complexity, capped at 2)."""
    check_indices(indices)
    rng = np.random.default_rng(seed)
    deg = min(max(drift_complexity, 0), 2)
    terms = 0 if drift_complexity <= 0 else 2 + drift_complexity
    names = tf_state_names(indices)
    xi = [s for s in names if s.startswith("xi")]
    a = {}
    for i in range(1, indices.k_chi):
        allowed = xi + ["chi0"] + [f"chi{l}_{j}" for l in range(1, i + 2)
                                   for j in range(1, indices.m + 1)]
        for j in range(1, indices.m + 1):
            a[(i, j)] = random_polynomial(allowed, rng, deg, terms)
    chi = ["chi0"] + [f"chi{l}_{j}" for l in range(1, indices.k_chi + 1) for j in range(1, indices.m + 1)]
    b = {j: random_polynomial(xi + chi, rng, deg, max(terms - 2, 0 if terms == 0 else 1))
         for j in range(1, indices.m + 1)}
    label = f"tf{indices.s}_m{indices.m}_kz{indices.k_zeta}_kc{indices.k_chi}_" \
            f"kx{''.join(map(str, indices.k_xi))}_seed{seed}"
    return TFTemplate(indices, a, b, label)


def generate_tf(indices: StructureIndices, seed: int = 0, drift_complexity: int = 2) -> SystemModel:
    """A TF_s model in normal coordinates with random admissible drift terms."""
    return tf_template(indices, seed, drift_complexity).to_model()


# --------------------------------------------------------------------------
# scrambling

@dataclass
class Scramble:
    """``y = diffeo(x)`` and ``w = alpha(x) + beta(x) u`` (TF inputs ``w``)."""

    diffeo: tuple
    inverse: tuple
    alpha: tuple
    beta: tuple
    beta_inverse: tuple
    seed: int
    order: tuple = field(default_factory=tuple)


def _unit_lower_inverse(L):
    """Inverse of a unit lower-triangular symbolic matrix by forward substitution."""
    k = len(L)
    inv = [[ec.const(1 if i == j else 0) for j in range(k)] for i in range(k)]
    for i in range(k):
        for j in range(i):
            acc = ec.const(0)
            for l in range(j, i):
                acc = acc + L[i][l] * inv[l][j]
            inv[i][j] = -acc
    return inv


def _matmul(A, B):
    return [[sum((A[i][l] * B[l][j] for l in range(len(B))), ec.const(0))
             for j in range(len(B[0]))] for i in range(len(A))]


def scramble(model: SystemModel, seed: int = 0, strength: float = 0.5,
             prefix: str = "y") -> tuple[SystemModel, Scramble]:
    """Hide ``model`` behind a triangular polynomial diffeomorphism and feedback.

    ``strength = 0`` gives the identity. New states are ``y1..yn``; the new
    inputs ``u`` relate to the old ones by ``w = alpha(x) + beta(x) u``.
    """
    rng = np.random.default_rng(seed)
    S = list(model.states)
    n, k = len(S), len(model.inputs)
    X = {s: ec.symbol(s) for s in S}
    ident = strength == 0
    order = list(range(n)) if ident else [int(i) for i in rng.permutation(n)]
    new = [f"{prefix}{i + 1}" for i in range(n)]
    if set(new) & set(S):
        raise NonInvertibleScramble(f"state prefix {prefix!r} clashes with the model's states")
    # y_k = x_{order[k]} + p_k(x_{order[0..k-1]})
    diffeo, inverse = [None] * n, {}
    for kk, i in enumerate(order):
        prev = [S[j] for j in order[:kk]]
        p = ec.const(0) if (ident or not prev) else \
            random_polynomial(prev, rng, 2, int(rng.integers(1, 3)), -strength, strength)
        diffeo[kk] = X[S[i]] + p
        inverse[S[i]] = ec.symbol(new[kk]) - ec.substitute(p, inverse)
    inv = tuple(inverse[s] for s in S)
    # feedback: beta = P D L (rows permuted), alpha random polynomial
    if ident:
        beta = [[ec.const(1 if i == j else 0) for j in range(k)] for i in range(k)]
        beta_inv = beta
        alpha = [ec.const(0)] * k
    else:
        Lm = [[ec.const(1) if i == j else
               (random_polynomial(S, rng, 1, 2, -strength, strength) if j < i else ec.const(0))
               for j in range(k)] for i in range(k)]
        Linv = _unit_lower_inverse(Lm)
        d = [_coef(rng, 0.5, 2.0) for _ in range(k)]
        perm = [int(i) for i in rng.permutation(k)]
        # beta_hat = L D P^T, so u = beta_hat (w - alpha) and beta = P D^-1 L^-1
        Dm = [[ec.const(d[i] if i == j else 0) for j in range(k)] for i in range(k)]
        PT = [[ec.const(1 if perm[j] == i else 0) for j in range(k)] for i in range(k)]
        beta_hat = _matmul(_matmul(Lm, Dm), PT)
        Dinv = [[ec.const(1 / d[i] if i == j else 0) for j in range(k)] for i in range(k)]
        P = [[ec.const(1 if perm[i] == j else 0) for j in range(k)] for i in range(k)]
        beta = _matmul(_matmul(P, Dinv), Linv)
        beta_inv = beta_hat
        alpha = [random_polynomial(S, rng, 1, 2, -strength, strength) for _ in range(k)]
    bh = beta_inv
    # feedback in x: f' = f - g beta_hat alpha, g'_j = sum_k g_k beta_hat[k][j]
    f = list(model.drift)
    g = [list(col) for col in model.inputs]
    bha = [sum((bh[r][c] * alpha[c] for c in range(k)), ec.const(0)) for r in range(k)]
    f2 = [f[i] - sum((g[r][i] * bha[r] for r in range(k)), ec.const(0)) for i in range(n)]
    g2 = [[sum((g[r][i] * bh[r][j] for r in range(k)), ec.const(0)) for i in range(n)]
          for j in range(k)]
    J = [[ec.differentiate(diffeo[r], s) for s in S] for r in range(n)]

    def push(v):
        out = [sum((J[r][i] * v[i] for i in range(n) if v[i].id != ec.ZERO), ec.const(0))
               for r in range(n)]
        return ec.substitute(out, inverse)

    drift = push(f2)
    inputs = [push(col) for col in g2]
    ansatz = None
    if model.ansatz is not None:
        # c = v alpha^T with v' = v beta_hat, so coefficients become beta alpha^T
        rows = []
        for row in model.ansatz:
            new_row = [sum((beta[r][c] * row[c] for c in range(k)), ec.const(0)) for r in range(k)]
            rows.append(tuple(ec.substitute(new_row, inverse)))
        ansatz = tuple(rows)
    outputs = {name: tuple(ec.substitute(list(v), inverse)) for name, v in model.outputs.items()}
    out = SystemModel(new, drift, inputs, model.params, {}, name=f"{model.name}_scr{seed}",
                      ansatz=ansatz, outputs=outputs)
    try:
        out.sample(10, np.random.default_rng(seed), max_rounds=5)
    except Exception as exc:
        raise NonInvertibleScramble(f"scrambled model is not finite on its domain: {exc}") from exc
    return out, Scramble(tuple(diffeo), inv, tuple(alpha), tuple(tuple(r) for r in beta),
                         tuple(tuple(r) for r in beta_inv), seed, tuple(order))


# --------------------------------------------------------------------------
# crane

def crane_model(params: dict | None = None) -> SystemModel:
    """The Lagrangian gantry crane with default parameters (overridable)."""
    text = resources.files("flatcheck").joinpath("data/crane.model").read_text(encoding="utf-8")
    model = loads_model(text, name="crane")
    if params:
        unknown = set(params) - set(model.params)
        if unknown:
            raise KeyError(f"unknown crane parameters {sorted(unknown)}")
        from dataclasses import replace
        model = replace(model, params={**model.params, **params})
    return model


def crane_tf1_transformation(model: SystemModel | None = None):
    """State and input maps taking the crane to TF1 with k_xi = (1, 1, 1).

    Returns ``(phi, alpha, beta, indices, expected)`` where ``phi`` follows
    the canonical TF state order and ``expected`` gives the free functions
    of the resulting form in TF coordinates.
    """
    model = model or crane_model()
    f, gs = model_fields(model)
    xL, yL, zL = model.outputs["load_position"]
    q4, q5 = ec.symbol("q4"), ec.symbol("q5")
    chi21 = ec.tan(q5) / ec.cos(q4)
    chi22 = ec.tan(q4)
    phi = [zL, xL, yL, f.apply(zL), f.apply(xL), f.apply(yL), chi21, chi22,
           f.apply(chi21), f.apply(chi22)]
    tops = [phi[3], phi[8], phi[9]]
    alpha = [f.apply(h) for h in tops]
    beta = [[g.apply(h) for g in gs] for h in tops]
    grav = ec.symbol("g")
    expected = {"chi1_1": -grav * ec.symbol("chi2_1"), "chi1_2": -grav * ec.symbol("chi2_2"),
                "chi2_1": ec.const(0), "chi2_2": ec.const(0)}
    return phi, alpha, beta, StructureIndices(2, 1, 1, 2, (1, 1, 1)), expected


# --------------------------------------------------------------------------
# simulation

@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    states: tuple

    def to_csv(self) -> str:
        head = ",".join(("t",) + tuple(self.states))
        rows = [",".join(repr(float(v)) for v in (ti, *xi)) for ti, xi in zip(self.t, self.x)]
        return "\n".join([head] + rows) + "\n"


def integrate(model: SystemModel, inputs, x0, horizon: float, step: float) -> Trajectory:
    """Fixed-step classical Runge-Kutta.

    ``inputs`` is ``None`` (zero input) or a callable ``t -> array(m+1)``;
    ``x0`` is an array or a dict keyed by state name.
    """
    if step <= 0 or horizon < 0:
        raise ValueError("step must be positive and horizon non-negative")
    S = model.states
    n, k = model.n, len(model.inputs)
    if isinstance(x0, dict):
        x0 = [x0[s] for s in S]
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError(f"initial state needs {n} entries")
    sub = {p: ec.const(v) for p, v in model.params.items()}
    exprs = ec.substitute(list(model.drift) + [e for g in model.inputs for e in g], sub)
    F = ec.lambdify(exprs, S)

    def rhs(t, xs):
        vals = F(*xs)
        dx = vals[:n].copy()
        if inputs is not None:
            u = np.asarray(inputs(t), dtype=float)
            dx += vals[n:].reshape(k, n).T @ u
        return dx

    steps = int(round(horizon / step))
    ts = np.arange(steps + 1) * step
    out = np.empty((steps + 1, n))
    out[0] = x
    for i in range(steps):
        t = ts[i]
        k1 = rhs(t, x)
        k2 = rhs(t + step / 2, x + step / 2 * k1)
        k3 = rhs(t + step / 2, x + step / 2 * k2)
        k4 = rhs(t + step, x + step * k3)
        x = x + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"state became non-finite at t={ts[i + 1]:.6g}")
        out[i + 1] = x
    return Trajectory(ts, out, tuple(S))
