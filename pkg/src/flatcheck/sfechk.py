"""Decision procedures for static feedback equivalence to TF0 and TF1.

Both procedures share the drift sequence ``D_1 = span{g}``,
``D_{i+1} = D_i + [f, D_i]`` and then test the contact block and the
upper integrator chains. Conditions are evaluated in order; the first
failure determines the verdict unless every condition is requested.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import exprcore as ec
from .errors import (DimensionMismatch, FlatcheckError, HypothesisViolated, NeverNonInvolutive,
                     PivotDegenerate, RankNotLocallyConstant, SingularBeta, SingularJacobian,
                     VerificationFailed)
from .geomkit import (Distribution, OneForm, VectorField, Workspace, annihilator_basis,
                      cauchy_characteristic, cauchy_pointwise, derived_flag, lie_bracket,
                      pointwise_span_equal, span_residuals)
from .modeldsl import SystemModel
from .pointlinalg import CheckConfig
from .subdist import (CFieldAnsatz, construct_L, e_distribution, lemma2_residuals,
                      solve_c_pointwise, verify_c_fields)

PASS, FAIL, INCONCLUSIVE, SKIPPED = "pass", "fail", "inconclusive", "skipped"

TF0_CONDITIONS = ("1", "2", "3a", "3b", "3c", "4")
TF1_CONDITIONS = ("1", "2", "3", "4a", "4b", "4c", "5")


@dataclass(frozen=True)
class StructureIndices:
    """Chain lengths of a triangular form with ``m + 1`` inputs."""

    m: int
    s: int
    k_zeta: int
    k_chi: int
    k_xi: tuple

    def __post_init__(self):
        object.__setattr__(self, "k_xi", tuple(int(k) for k in self.k_xi))

    @property
    def n(self) -> int:
        return (self.m + 1) * self.k_zeta - self.s + self.m * self.k_chi + 1 + sum(self.k_xi)

    def same_up_to_chain_order(self, other: "StructureIndices") -> bool:
        return (self.m, self.s, self.k_zeta, self.k_chi) == (other.m, other.s, other.k_zeta, other.k_chi) \
            and sorted(self.k_xi) == sorted(other.k_xi)

    def as_dict(self):
        return {"m": self.m, "s": self.s, "k_zeta": self.k_zeta, "k_chi": self.k_chi,
                "k_xi": list(self.k_xi)}


@dataclass
class ConditionResult:
    id: str
    status: str
    residual: float | None = None
    witness_point: dict | None = None
    detail: str = ""

    def as_dict(self):
        return {"id": self.id, "status": self.status,
                "residual": None if self.residual is None else float(self.residual),
                "witness_point": self.witness_point}


@dataclass
class CheckReport:
    form: str
    verdict: str = "Inconclusive"
    failed: str | None = None
    reason: str = ""
    indices: StructureIndices | None = None
    ranks: dict = field(default_factory=lambda: {"D": [], "E_flag": [], "L": None, "F": []})
    conditions: list = field(default_factory=list)
    flat_output: dict | None = None

    @property
    def label(self) -> str:
        if self.verdict == "Fail":
            return f"Fail({self.failed})"
        if self.verdict == "Inconclusive":
            return f"Inconclusive({self.reason})"
        return self.verdict

    @property
    def passed(self) -> bool:
        return self.verdict in ("TF0", "TF1")

    def condition(self, cid) -> ConditionResult:
        for c in self.conditions:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def as_dict(self):
        idx = self.indices.as_dict() if self.indices else None
        return {
            "verdict": self.label,
            "indices": idx,
            "ranks": {"D": list(self.ranks["D"]), "E_flag": list(self.ranks["E_flag"]),
                      "L": self.ranks["L"], "F": list(self.ranks["F"])},
            "conditions": [c.as_dict() for c in self.conditions],
            "flat_output": self.flat_output,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=False)

    def table(self) -> str:
        lines = [f"form      {self.form.upper()}", f"verdict   {self.label}"]
        if self.indices:
            i = self.indices
            lines.append(f"indices   m={i.m} s={i.s} k_zeta={i.k_zeta} k_chi={i.k_chi} "
                         f"k_xi={list(i.k_xi)}  (n={i.n})")
        r = self.ranks
        lines.append(f"ranks     D={r['D']} E_flag={r['E_flag']} L={r['L']} F={r['F']}")
        lines.append("condition status        residual   detail")
        for c in self.conditions:
            res = " " * 9 if c.residual is None else f"{c.residual:9.3e}"
            extra = f"  {c.detail}" if c.detail else ""
            lines.append(f"  {c.id:<7} {c.status:<13} {res}{extra}")
        if self.flat_output:
            lines.append(f"flat output {self.flat_output['status']} "
                         f"(residual {self.flat_output['basis_residual']})")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# shared pieces

def model_fields(model: SystemModel):
    S = model.states
    return VectorField(model.drift, S), [VectorField(g, S) for g in model.inputs]


def _fail_witness(ws, res, thr):
    bad = res > thr
    return ws.witness(bad) if bad.any() else ws.witness()


def drift_sequence(model: SystemModel, ws: Workspace, max_steps: int | None = None):
    """``[D_1, ..., D_{k+1}]`` with pruned generators and ``k`` = k_zeta.

    Stops at the first non-involutive member. Raises
    :class:`NeverNonInvolutive` if the sequence becomes involutive and
    stationary (full tangent space or a proper integrable distribution).
    """
    f, gs = model_fields(model)
    n = model.n
    D = Distribution(gs, model.states, "D_1").pruned(ws)
    seq = [D]
    new = list(D.generators)
    prev_len = 0
    for i in range(1, (max_steps or n) + 1):
        if not D.is_involutive(ws, new_from=prev_len):
            return seq, i - 1
        k = len(D.generators)
        nxt = Distribution(D.generators + tuple(lie_bracket(f, v) for v in new),
                           model.states, f"D_{i + 1}")
        if nxt.rank(ws) == D.rank(ws):
            full = D.rank(ws) == n
            raise NeverNonInvolutive(
                "the drift sequence reaches the full tangent space while involutive "
                "(static feedback linearizable)" if full else
                "the drift sequence stalls at an involutive proper distribution",
                ranks=[d.rank(ws) for d in seq], full=full)
        nxt = nxt.pruned(ws, keep=k)
        new = list(nxt.generators[k:])
        prev_len = k
        seq.append(nxt)
        D = nxt
    raise NeverNonInvolutive("drift sequence did not terminate", ranks=[d.rank(ws) for d in seq],
                             full=False)


def f_sequence(f: VectorField, F0: Distribution, ws: Workspace, f0_involutive: bool = False):
    """``F_{i+1} = F_i + [f, F_i]`` until the full tangent space.

    Returns ``(sequence, involutive_flags, complete)``. Pass
    ``f0_involutive`` when ``F0`` is already known to be involutive (e.g. the
    last member of a derived flag) to skip bracketing its own generators.
    """
    n = len(F0.states)
    F = F0.pruned(ws).renamed("F_0")
    seq, inv = [F], []
    new = list(F.generators)
    prev = len(F.generators) if f0_involutive else 0
    for i in range(1, n + 1):
        if F.rank(ws) == n:
            return seq, inv, True
        inv.append(F.is_involutive(ws, new_from=prev))
        k = len(F.generators)
        nxt = Distribution(F.generators + tuple(lie_bracket(f, v) for v in new), F.states, f"F_{i}")
        if nxt.rank(ws) == F.rank(ws):
            return seq, inv, False
        nxt = nxt.pruned(ws, keep=k)
        new, prev = list(nxt.generators[k:]), k
        seq.append(nxt)
        F = nxt
    return seq, inv, seq[-1].rank(ws) == n


def chain_lengths(rank_steps, m: int) -> tuple:
    """Upper chain lengths from the rank increments of the F-sequence (descending)."""
    return tuple(sum(1 for d in rank_steps if d > j) for j in range(m + 1))


class _Runner:
    """Evaluates conditions in order and assembles the report."""

    def __init__(self, report: CheckReport, ids, all_conditions: bool):
        self.report = report
        self.ids = list(ids)
        self.all = all_conditions
        self.stopped = False

    def record(self, cid, status, residual=None, witness=None, detail=""):
        self.report.conditions.append(ConditionResult(cid, status, residual, witness, detail))
        if status == FAIL and self.report.failed is None:
            self.report.verdict = "Fail"
            self.report.failed = cid
            self.report.reason = detail
            if not self.all:
                self.stopped = True
        if status == INCONCLUSIVE and self.report.failed is None and self.report.verdict != "Fail":
            if self.report.reason == "":
                self.report.reason = detail or "inconclusive"
            self.report.verdict = "Inconclusive"
            if not self.all:
                self.stopped = True

    def finish_skipped(self):
        done = {c.id for c in self.report.conditions}
        for cid in self.ids:
            if cid not in done:
                self.report.conditions.append(ConditionResult(cid, SKIPPED))

    @property
    def clean(self):
        return all(c.status == PASS for c in self.report.conditions)


# --------------------------------------------------------------------------
# contact block (shared by both theorems)

def _contact_block(runner, ids, E, f, ws, state, expected_rank):
    """Conditions on the derived flag of ``E``; fills ``state`` with E-bar, L, k_chi."""
    id_a, id_b, id_c = ids
    flag = derived_flag(E, ws)
    ranks = [d.rank(ws) for d in flag]
    runner.report.ranks["E_flag"] = ranks
    k_chi = len(flag)
    Ebar = flag[-1]
    state.update(flag=flag, k_chi=k_chi, Ebar=Ebar)
    want = expected_rank(k_chi)
    if k_chi < 2 or ranks[-1] != want:
        runner.record(id_a, FAIL, witness=ws.witness(),
                      detail=f"rank of the involutive closure is {ranks[-1]}, expected {want} "
                             f"(k_chi={k_chi})")
        return
    runner.record(id_a, PASS, detail=f"k_chi={k_chi}")
    if runner.stopped:
        return
    Em2 = flag[k_chi - 2]
    if ranks[k_chi - 2] != ranks[-1] - state["m"]:
        runner.record(id_b, FAIL, witness=ws.witness(),
                      detail=f"rank E^({k_chi - 2}) = {ranks[k_chi - 2]}, expected {ranks[-1] - state['m']}")
        return
    try:
        L = construct_L(Em2, ws, seed=ws.cfg.seed)
    except HypothesisViolated as exc:
        runner.record(id_b, FAIL, witness=ws.witness(), detail=str(exc))
        return
    if L is None:
        runner.record(id_b, FAIL, witness=ws.witness(),
                      detail="no involutive corank-one subdistribution")
        return
    state["L"] = L
    runner.report.ranks["L"] = L.rank(ws)
    runner.record(id_b, PASS)
    if runner.stopped:
        return
    worst = 0.0
    for i in range(1, k_chi - 1):
        Ei = flag[i]
        C = cauchy_characteristic(Ei, ws)
        if not C.generators:
            continue
        res = Ei.residuals(ws, [lie_bracket(f, c) for c in C.generators])
        worst = max(worst, float(res[ws.valid].max()))
        if not ws.decide(res <= ws.tol, f"[f, C(E^({i}))] in E^({i})"):
            runner.record(id_c, FAIL, float(res[ws.valid].max()), _fail_witness(ws, res, ws.tol),
                          detail=f"[f, C(E^({i}))] leaves E^({i})")
            return
    res = Ebar.residuals(ws, [lie_bracket(f, v) for v in L.generators])
    worst = max(worst, float(res[ws.valid].max()))
    if not ws.decide(res <= ws.tol, "[f, L] in closure"):
        runner.record(id_c, FAIL, worst, _fail_witness(ws, res, ws.tol),
                      detail="[f, L] leaves the involutive closure")
        return
    runner.record(id_c, PASS, worst)


def _upper_chains(runner, cid, f, ws, state):
    seq, inv, complete = f_sequence(f, state["Ebar"], ws, f0_involutive=True)
    ranks = [F.rank(ws) for F in seq]
    runner.report.ranks["F"] = ranks
    if not all(inv):
        i = inv.index(False)
        runner.record(cid, FAIL, witness=ws.witness(), detail=f"F_{i} is not involutive")
        return
    if not complete:
        runner.record(cid, FAIL, witness=ws.witness(),
                      detail=f"F-sequence stalls at rank {ranks[-1]} < {len(f.states)}")
        return
    steps = [b - a for a, b in zip(ranks, ranks[1:])]
    m = state["m"]
    if steps and (steps[0] > m + 1 or any(b > a for a, b in zip(steps, steps[1:]))):
        runner.record(cid, FAIL, witness=ws.witness(),
                      detail=f"F-sequence rank steps {steps} do not form m+1 chains")
        return
    state["k_xi"] = chain_lengths(steps, m)
    runner.record(cid, PASS, detail="F_0 is the full tangent space" if not steps else "")


def _conditions_1_2(runner, model, ws, state, tf1: bool):
    m = model.m
    state["m"] = m
    try:
        seq, kz = drift_sequence(model, ws)
    except NeverNonInvolutive as exc:
        runner.report.ranks["D"] = list(exc.ranks)
        runner.record("1", FAIL, witness=ws.witness(), detail=str(exc))
        return None
    runner.report.ranks["D"] = [d.rank(ws) for d in seq]
    state.update(seq=seq, k_zeta=kz)
    bad = [i + 1 for i, d in enumerate(seq) if d.rank(ws) != (m + 1) * (i + 1)]
    if bad:
        i = bad[0]
        runner.record("1", FAIL, witness=ws.witness(),
                      detail=f"rank D_{i} = {seq[i - 1].rank(ws)}, expected {(m + 1) * i}")
    else:
        runner.record("1", PASS, detail=f"k_zeta={kz}")
    if runner.stopped:
        return None
    top = seq[kz]
    bases, crank = cauchy_pointwise(top, ws)
    if kz == 0:
        tgt = [np.zeros((model.n, 0)) for _ in range(ws.N)]
    else:
        Dm = seq[kz - 1].matrix(ws)
        tgt = [Dm[p] for p in range(ws.N)]
    equal = crank == (seq[kz - 1].rank(ws) if kz else 0) and \
        pointwise_span_equal(ws, bases, tgt, "C(D_k+1) = D_k")
    state["cauchy_rank"] = crank
    ok = (not equal) if tf1 else equal
    detail = f"rank C(D_{kz + 1}) = {crank}" + ("" if ok else
                                               (" equals D_k" if tf1 else f", D_{kz} differs"))
    runner.record("2", PASS if ok else FAIL, witness=None if ok else ws.witness(), detail=detail)
    return seq


def _run(model, cfg, ws, form, all_conditions, body):
    cfg = cfg or CheckConfig()
    ws = ws or Workspace.for_model(model, cfg)
    report = CheckReport(form=form)
    runner = _Runner(report, TF0_CONDITIONS if form == "tf0" else TF1_CONDITIONS, all_conditions)
    state = {}
    try:
        body(runner, model, ws, state)
    except (RankNotLocallyConstant, PivotDegenerate, VerificationFailed) as exc:
        done = {c.id for c in report.conditions}
        nxt = next((c for c in runner.ids if c not in done), runner.ids[-1])
        runner.record(nxt, INCONCLUSIVE, detail=f"{type(exc).__name__}: {exc}")
        if report.verdict != "Fail":
            report.verdict = "Inconclusive"
            report.reason = type(exc).__name__
    runner.finish_skipped()
    if runner.clean and len(report.conditions) == len(runner.ids):
        s = 0 if form == "tf0" else 1
        report.indices = StructureIndices(state["m"], s, state["k_zeta"], state["k_chi"],
                                          state["k_xi"])
        if report.indices.n != model.n:
            report.verdict = "Fail"
            report.failed = runner.ids[-1]
            report.reason = f"state count {report.indices.n} from the indices differs from n={model.n}"
        else:
            report.verdict = form.upper()
    elif report.verdict not in ("Fail", "Inconclusive"):
        report.verdict = "Inconclusive"
    report._state = state
    report._ws = ws
    return report


def check_tf0(model: SystemModel, cfg: CheckConfig | None = None, ws: Workspace | None = None,
              all_conditions: bool = False) -> CheckReport:
    """Decide equivalence to TF0 (distinguished chain of full length)."""

    def body(runner, model, ws, state):
        f, _ = model_fields(model)
        seq = _conditions_1_2(runner, model, ws, state, tf1=False)
        if seq is None or runner.stopped:
            return
        kz, m = state["k_zeta"], state["m"]
        E = seq[kz].renamed("E")
        state["E"] = E
        _contact_block(runner, ("3a", "3b", "3c"), E, f, ws, state,
                       lambda kc: (m + 1) * kz + m * kc + 1)
        if runner.stopped or "Ebar" not in state:
            return
        _upper_chains(runner, "4", f, ws, state)

    return _run(model, cfg, ws, "tf0", all_conditions, body)


def c_base(model: SystemModel, k_zeta: int) -> list:
    """``v_k = ad_f^(k_zeta - 1) g_k``, the fields the ansatz coefficients refer to."""
    f, gs = model_fields(model)
    out = []
    for g in gs:
        v = g
        for _ in range(max(k_zeta - 1, 0)):
            v = lie_bracket(f, v)
        out.append(v)
    return out


def _condition_c(runner, model, ws, state, n_probe: int = 5):
    f, _ = model_fields(model)
    seq, kz = state["seq"], state["k_zeta"]
    if kz == 0:
        runner.record("3", FAIL, witness=ws.witness(), detail="k_zeta = 0 leaves no room for c-fields")
        return None
    D_kz = seq[kz - 1]
    D_low = seq[kz - 2] if kz >= 2 else None
    D_top = seq[kz]
    base = c_base(model, kz)
    if model.ansatz is not None:
        ans = CFieldAnsatz(model.ansatz, base)
        cs = ans.fields()
        try:
            res = lemma2_residuals(ans, f, D_top, ws)
            lres = float(res[ws.valid].max())
        except HypothesisViolated:
            lres = None
        if verify_c_fields(cs, f, D_kz, D_low, ws):
            runner.record("3", PASS, lres, detail="c-fields from the supplied ansatz")
            return e_distribution(cs, f, D_kz)
        rejected = True
    else:
        rejected = False
    idx = np.flatnonzero(ws.valid)[:n_probe]
    found = []
    for p in idx:
        sols = solve_c_pointwise(f, base, D_top, ws, int(p), seed=ws.cfg.seed)
        found.append(bool(sols))
    if not any(found) or np.mean(found) <= 0.2:
        runner.record("3", FAIL, witness=ws.point(int(idx[0])),
                      detail="the quadratic c-field conditions have no solution at the samples")
        return None
    why = "ansatz rejected" if rejected else "NoSymbolicAnsatz"
    runner.record("3", INCONCLUSIVE, detail=f"{why}: pointwise c-field solutions exist")
    runner.report.reason = why
    return None


def check_tf1(model: SystemModel, cfg: CheckConfig | None = None, ws: Workspace | None = None,
              all_conditions: bool = False) -> CheckReport:
    """Decide equivalence to TF1 (distinguished chain one step shorter)."""

    def body(runner, model, ws, state):
        f, _ = model_fields(model)
        seq = _conditions_1_2(runner, model, ws, state, tf1=True)
        if seq is None or runner.stopped:
            return
        E = _condition_c(runner, model, ws, state)
        if E is None or runner.stopped:
            return
        state["E"] = E
        kz, m = state["k_zeta"], state["m"]
        _contact_block(runner, ("4a", "4b", "4c"), E, f, ws, state,
                       lambda kc: (m + 1) * kz + m * kc)
        if runner.stopped or "Ebar" not in state:
            return
        _upper_chains(runner, "5", f, ws, state)

    return _run(model, cfg, ws, "tf1", all_conditions, body)


def check(model: SystemModel, form: str = "auto", cfg: CheckConfig | None = None,
          all_conditions: bool = False) -> CheckReport:
    """``auto`` runs the TF0 test and falls through to TF1 when condition 2 separates them."""
    cfg = cfg or CheckConfig()
    ws = Workspace.for_model(model, cfg)
    if form == "tf0":
        return check_tf0(model, cfg, ws, all_conditions)
    if form == "tf1":
        return check_tf1(model, cfg, ws, all_conditions)
    if form != "auto":
        raise ValueError(f"unknown form {form!r}")
    r0 = check_tf0(model, cfg, ws, all_conditions)
    if r0.verdict == "Fail" and r0.failed == "2":
        return check_tf1(model, cfg, ws, all_conditions)
    return r0


# --------------------------------------------------------------------------
# control-affine reducibility

def check_affine_reduction(model: SystemModel, selected_inputs, cfg: CheckConfig | None = None) -> bool:
    """Whether ``x' = F(x, u)`` (``u`` = selected states) admits a control-affine form.

    The rows of the selected states are ignored (they are free inputs).
    Tests ``D_0 subset C(D_0 + [F, D_0])`` with ``D_0 = span{d/du}``.
    """
    selected = list(selected_inputs)
    for s in selected:
        if s not in model.states:
            raise FlatcheckError(f"unknown state {s!r}")
    S = model.states
    F = VectorField([ec.const(0) if s in selected else e for s, e in zip(S, model.drift)], S)
    D0 = [VectorField.coordinate(s, S) for s in selected]
    D1 = Distribution(D0 + [lie_bracket(F, v) for v in D0], S, "D_1")
    ws = Workspace.for_model(model, cfg or CheckConfig())
    br = [lie_bracket(v, w) for v in D0 for w in D1.generators]
    return D1.contains(ws, br, "affine reduction")


def extend_with_inputs(model: SystemModel, prefix: str = "u") -> tuple:
    """The system on (x, u) with ``F = f + sum g_j u_j``; returns ``(model, input names)``."""
    names = [f"{prefix}{j}" for j in range(len(model.inputs))]
    us = [ec.symbol(u) for u in names]
    drift = list(model.drift)
    for j, g in enumerate(model.inputs):
        drift = [a + us[j] * b for a, b in zip(drift, g)]
    drift += [ec.const(0)] * len(names)
    n = model.n + len(names)
    zero = [ec.const(0)] * n
    dom = dict(model.domain)
    dom.update({u: (-1.0, 1.0) for u in names})
    ext = SystemModel(model.states + tuple(names), drift, [zero], model.params, dom,
                      name=f"{model.name}+inputs")
    return ext, names


# --------------------------------------------------------------------------
# flat outputs

@dataclass
class FlatOutputResult:
    ok: bool
    basis_residual: float
    rank_ok: bool
    detail: str = ""

    def as_dict(self):
        return {"status": "pass" if self.ok else "fail", "basis_residual": float(self.basis_residual)}


def verify_flat_output(model: SystemModel, phi, F0: Distribution, ws: Workspace | None = None,
                       cfg: CheckConfig | None = None, tol: float = 1e-8) -> FlatOutputResult:
    """Whether ``span{d phi}`` equals the annihilator of ``F0`` at the samples.

    The residual is the largest relative distance of a normalised
    differential from the annihilator, or of an annihilator basis covector
    from ``span{d phi}``.
    """
    ws = ws or Workspace.for_model(model, cfg or CheckConfig())
    phi = [ec.as_expr(p) for p in phi]
    n = model.n
    r = F0.rank(ws)
    if len(phi) != n - r:
        raise DimensionMismatch(f"{len(phi)} candidate functions for a codistribution of rank {n - r}")
    dphi = np.stack([ws.form(OneForm.differential(p, model.states)) for p in phi], axis=1)  # (N,k,n)
    anns = annihilator_basis(F0.matrix(ws), ws.tol)
    worst = np.zeros(ws.N)
    rank_ok = np.ones(ws.N, dtype=bool)
    for p in range(ws.N):
        Wp = dphi[p]
        Ap = anns[p]
        norms = np.linalg.norm(Wp, axis=1)
        if np.any(norms == 0):
            rank_ok[p] = False
            worst[p] = 1.0
            continue
        U = Wp / norms[:, None]
        sv = np.linalg.svd(U, compute_uv=False)
        rank_ok[p] = sv[-1] > 1e-8 * sv[0] and Ap.shape[0] == len(phi)
        d1 = np.linalg.norm(U - (U @ Ap.T) @ Ap, axis=1).max() if Ap.size else 1.0
        Q, _ = np.linalg.qr(U.T)
        d2 = np.linalg.norm(Ap - (Ap @ Q) @ Q.T, axis=1).max() if Ap.size else 0.0
        worst[p] = max(d1, d2)
    v = ws.valid
    resid = float(worst[v].max())
    ok = bool(rank_ok[v].all() and resid <= tol)
    detail = "" if ok else ("differentials dependent" if not rank_ok[v].all() else
                            "differentials do not span the annihilator")
    return FlatOutputResult(ok, resid, bool(rank_ok[v].all()), detail)


def closure_for_flat_output(model: SystemModel, report: CheckReport) -> Distribution:
    """The distribution ``F_0`` determined by a passed check."""
    state = getattr(report, "_state", {})
    if "Ebar" not in state:
        raise FlatcheckError("the report carries no involutive closure (check did not pass condition 3/4)")
    return state["Ebar"]


# --------------------------------------------------------------------------
# transformation to the triangular form

def tf_state_names(idx: StructureIndices) -> list:
    """Canonical ordering: xi chains, then chi (level by level), then zeta chains."""
    names = []
    for j, k in enumerate(idx.k_xi):
        names += [f"xi{i}_{j}" for i in range(1, k + 1)]
    names.append("chi0")
    for i in range(1, idx.k_chi + 1):
        names += [f"chi{i}_{j}" for j in range(1, idx.m + 1)]
    for j in range(idx.m + 1):
        length = idx.k_zeta - (idx.s if j == 0 else 0)
        names += [f"zeta{i}_{j}" for i in range(1, length + 1)]
    return names


def allowed_arguments(idx: StructureIndices, level: int) -> set:
    """States a free function of chi level ``level`` may depend on."""
    names = tf_state_names(idx)
    ok = {s for s in names if s.startswith("xi")} | {"chi0"}
    top = idx.k_chi if level >= idx.k_chi else level + 1
    for i in range(1, top + 1):
        ok |= {f"chi{i}_{j}" for j in range(1, idx.m + 1)}
    return ok


@dataclass
class TransformationReport:
    max_residual: float
    residuals: dict
    ok: bool


def _zeta0_is_input(idx):
    return idx.k_zeta - idx.s == 0


def chain_tops(idx: StructureIndices) -> list:
    """Template coordinates whose derivative is the new input ``w^j``."""
    tops = ["chi0" if _zeta0_is_input(idx) else f"zeta{idx.k_zeta - idx.s}_0"]
    for j in range(1, idx.m + 1):
        tops.append(f"chi{idx.k_chi}_{j}" if idx.k_zeta == 0 else f"zeta{idx.k_zeta}_{j}")
    return tops


def input_map_from_tops(model: SystemModel, phi, indices: StructureIndices):
    """``(alpha, beta)`` with ``w^j`` the time derivative of the chain-top coordinate."""
    names = tf_state_names(indices)
    if len(phi) != len(names):
        raise DimensionMismatch(f"phi has {len(phi)} entries, the template {len(names)}")
    f, gs = model_fields(model)
    tops = [ec.as_expr(phi[names.index(t)]) for t in chain_tops(indices)]
    return [f.apply(h) for h in tops], [[g.apply(h) for g in gs] for h in tops]


def verify_transformation(model: SystemModel, phi, alpha, beta, indices: StructureIndices,
                          ws: Workspace | None = None, cfg: CheckConfig | None = None,
                          tol: float = 1e-8, expected: dict | None = None) -> TransformationReport:
    """Residuals of the transformed system against the triangular template.

    ``phi`` lists the new coordinates in the order of :func:`tf_state_names`;
    the new inputs are ``w = alpha + beta u``. Fixed template slots must match;
    the free functions ``a^i_j`` and ``b_{0,j}`` are only checked for their
    argument restrictions, unless ``expected`` maps a row name to an
    expression in the template coordinates (and parameters) that the free
    function must equal.
    """
    n, m1 = model.n, len(model.inputs)
    if indices.n != n:
        raise DimensionMismatch(f"indices give {indices.n} states, the model has {n}")
    if len(phi) != n or len(alpha) != m1 or len(beta) != m1 or any(len(r) != m1 for r in beta):
        raise DimensionMismatch("transformation sizes do not match the model")
    ws = ws or Workspace.for_model(model, cfg or CheckConfig())
    S = model.states
    phi = [ec.as_expr(p) for p in phi]
    alpha = [ec.as_expr(a) for a in alpha]
    beta = [[ec.as_expr(b) for b in row] for row in beta]
    Jrows = [[ec.differentiate(p, s) for s in S] for p in phi]
    J = ws.eval_exprs([e for row in Jrows for e in row]).reshape(ws.N, n, n)
    sv = np.linalg.svd(J, compute_uv=False)
    if np.any(sv[ws.valid, -1] <= 1e-12 * sv[ws.valid, 0]):
        raise SingularJacobian("the state map has a singular Jacobian at a sample point")
    B = ws.eval_exprs([e for row in beta for e in row]).reshape(ws.N, m1, m1)
    svb = np.linalg.svd(B, compute_uv=False)
    if np.any(svb[ws.valid, -1] <= 1e-12 * svb[ws.valid, 0]):
        raise SingularBeta("the input map is singular at a sample point")
    # u = beta^-1 (w - alpha): drift a = dPhi (f - g beta^-1 alpha), b = dPhi g beta^-1
    Bhat_cols = [ec.solve(beta, [1 if k == j else 0 for k in range(m1)]) for j in range(m1)]
    balpha = ec.solve(beta, alpha)
    f = model.drift
    g = model.inputs
    fc = [f[i] - sum((g[k][i] * balpha[k] for k in range(m1)), ec.const(0)) for i in range(n)]
    gc = [[sum((g[k][i] * Bhat_cols[j][k] for k in range(m1)), ec.const(0)) for i in range(n)]
          for j in range(m1)]

    def push(v):
        return [sum((Jrows[r][i] * v[i] for i in range(n) if v[i].id != ec.ZERO), ec.const(0))
                for r in range(n)]

    a = push(fc)
    b = [push(col) for col in gc]
    names = tf_state_names(indices)
    pos = {s: i for i, s in enumerate(names)}
    zval = ws.eval_exprs(phi)                                   # (N, n) new coordinates
    Av = ws.eval_exprs(a)
    Bv = np.stack([ws.eval_exprs(col) for col in b], axis=2)    # (N, n, m+1)
    Jinv = np.linalg.inv(np.where(ws.valid[:, None, None], J, np.eye(n)))
    residuals = {}

    def fixed(row, a_target, b_target):
        at = np.zeros(ws.N) if a_target is None else a_target
        ra = np.abs(Av[:, row] - at) / (1 + np.abs(at))
        bt = np.asarray(b_target, dtype=float)
        rb = np.abs(Bv[:, row, :] - bt).max(axis=1) / (1 + np.abs(bt).max())
        residuals[names[row]] = float(np.maximum(ra, rb)[ws.valid].max())

    frees = {}

    def restricted(key, expr, allowed):
        frees[key] = expr
        grad = ws.eval_exprs([ec.differentiate(expr, s) for s in S])       # (N, n)
        dz = np.einsum("ni,nij->nj", grad, Jinv)
        bad = [pos[s] for s in names if s not in allowed]
        scale = 1 + np.abs(dz).max(axis=1)
        val = np.abs(dz[:, bad]).max(axis=1) / scale if bad else np.zeros(ws.N)
        residuals[key] = max(residuals.get(key, 0.0), float(val[ws.valid].max()))

    m = indices.m
    e = np.eye(m1)
    zin = _zeta0_is_input(indices)
    z0 = None if zin else zval[:, pos["zeta1_0"]]
    # xi chains
    for j, k in enumerate(indices.k_xi):
        for i in range(1, k + 1):
            nxt = f"xi{i + 1}_{j}" if i < k else ("chi0" if j == 0 else f"chi1_{j}")
            fixed(pos[f"xi{i}_{j}"], zval[:, pos[nxt]], np.zeros(m1))
    # chi block
    if zin:
        fixed(pos["chi0"], None, e[0])
    else:
        fixed(pos["chi0"], z0, np.zeros(m1))
    kc = indices.k_chi
    for i in range(1, kc):
        for j in range(1, m + 1):
            row = pos[f"chi{i}_{j}"]
            up = zval[:, pos[f"chi{i + 1}_{j}"]]
            if zin:
                fixed_b = up[:, None] * e[0][None, :]
                rb = np.abs(Bv[:, row, :] - fixed_b).max(axis=1) / (1 + np.abs(fixed_b).max(axis=1))
                residuals[f"chi{i}_{j}"] = float(rb[ws.valid].max())
                free = a[row]
            else:
                rb = np.abs(Bv[:, row, :]).max(axis=1)
                residuals[f"chi{i}_{j}"] = float(rb[ws.valid].max())
                free = a[row] - phi[pos[f"chi{i + 1}_{j}"]] * phi[pos["zeta1_0"]]
            restricted(f"chi{i}_{j}", free, allowed_arguments(indices, i))
    for j in range(1, m + 1):
        row = pos[f"chi{kc}_{j}"]
        zj = phi[pos[f"zeta1_{j}"]]
        allowed = allowed_arguments(indices, kc)
        if zin:
            ra = np.abs(Av[:, row] - zval[:, pos[f"zeta1_{j}"]]) / (1 + np.abs(zval[:, pos[f"zeta1_{j}"]]))
            rb = np.abs(Bv[:, row, 1:] - 0).max(axis=1)
            residuals[f"chi{kc}_{j}"] = float(np.maximum(ra, rb)[ws.valid].max())
            restricted(f"chi{kc}_{j}", b[0][row], allowed)
        else:
            rb = np.abs(Bv[:, row, :]).max(axis=1)
            residuals[f"chi{kc}_{j}"] = float(rb[ws.valid].max())
            restricted(f"chi{kc}_{j}", (a[row] - zj) / phi[pos["zeta1_0"]], allowed)
    # zeta chains
    for j in range(m1):
        length = indices.k_zeta - (indices.s if j == 0 else 0)
        for i in range(1, length + 1):
            row = pos[f"zeta{i}_{j}"]
            if i < length:
                fixed(row, zval[:, pos[f"zeta{i + 1}_{j}"]], np.zeros(m1))
            else:
                fixed(row, None, e[j])
    if expected:
        zev = ec.Evaluator({**model.params, **{s: zval[:, i] for i, s in enumerate(names)}})
        for key, target in expected.items():
            if key not in frees:
                raise FlatcheckError(f"{key!r} has no free function in this template")
            want = np.asarray(zev(ec.as_expr(target)), dtype=float) * np.ones(ws.N)
            got = ws.eval_exprs([frees[key]])[:, 0]
            dev = np.abs(got - want) / (1 + np.abs(want))
            residuals[key] = max(residuals[key], float(dev[ws.valid].max()))
    worst = max(residuals.values()) if residuals else 0.0
    return TransformationReport(worst, residuals, worst <= tol)
