"""Control-affine system models and their text format.

A model is either given directly (drift and input columns) or derived from
a Lagrangian block. See ``docs/dsl.md`` for the file grammar.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import exprcore as ec
from .errors import (DependentInputs, DimensionMismatch, ExprSyntaxError, FlatcheckError,
                     SingularMass, UnknownSymbol)
from .parsing import parse_expr
from .pointlinalg import ranks_at

DEFAULT_INTERVAL = (-1.0, 1.0)


@dataclass(frozen=True)
class LagrangianSpec:
    q: tuple
    v: tuple
    T: ec.Expr
    V: ec.Expr
    force_map: tuple          # m+1 columns, each with len(q) entries
    params: dict = field(default_factory=dict)
    domain: dict = field(default_factory=dict)

    def total_derivative(self, e: ec.Expr) -> ec.Expr:
        """d/dt of a configuration function along qdot = v."""
        out = ec.const(0)
        for qi, vi in zip(self.q, self.v):
            out = out + ec.differentiate(e, qi) * ec.symbol(vi)
        return out


@dataclass(frozen=True)
class SystemModel:
    """``xdot = f(x) + sum_j g_j(x) u^j`` with named states and parameters."""

    states: tuple
    drift: tuple
    inputs: tuple
    params: dict = field(default_factory=dict)
    domain: dict = field(default_factory=dict)
    name: str = "model"
    ansatz: tuple | None = None       # m rows of m+1 coefficient expressions
    outputs: dict = field(default_factory=dict)
    lagrangian: LagrangianSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "drift", tuple(ec.as_expr(e) for e in self.drift))
        object.__setattr__(self, "inputs", tuple(tuple(ec.as_expr(e) for e in g) for g in self.inputs))
        n = len(self.states)
        if len(set(self.states)) != n:
            raise FlatcheckError("duplicate state names")
        if len(self.drift) != n:
            raise DimensionMismatch(f"drift has {len(self.drift)} rows, expected {n}")
        for j, g in enumerate(self.inputs):
            if len(g) != n:
                raise DimensionMismatch(f"input {j} has {len(g)} rows, expected {n}")
        dom = {s: DEFAULT_INTERVAL for s in self.states}
        for k, (lo, hi) in self.domain.items():
            if k not in dom:
                raise FlatcheckError(f"domain entry for unknown state {k!r}")
            if not lo < hi:
                raise FlatcheckError(f"empty domain interval for {k!r}")
            dom[k] = (float(lo), float(hi))
        object.__setattr__(self, "domain", dom)
        if self.ansatz is not None:
            rows = tuple(tuple(ec.as_expr(a) for a in row) for row in self.ansatz)
            for row in rows:
                if len(row) != len(self.inputs):
                    raise DimensionMismatch("ansatz rows need one coefficient per input")
            object.__setattr__(self, "ansatz", rows)

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def m(self) -> int:
        """Number of inputs minus one (inputs are numbered 0..m)."""
        return len(self.inputs) - 1

    def state_symbols(self):
        return [ec.symbol(s) for s in self.states]

    def with_ansatz(self, ansatz):
        return replace(self, ansatz=ansatz)

    def sample(self, n: int, rng: np.random.Generator, max_rounds: int = 50) -> dict:
        """``n`` random domain points at which drift and inputs evaluate finitely.

        Returns a dict of arrays keyed by state name, with parameters as scalars.
        """
        keep = {s: [] for s in self.states}
        got = 0
        exprs = list(self.drift) + [e for g in self.inputs for e in g]
        for _ in range(max_rounds):
            want = max(n - got, 1) * 2
            cand = {s: rng.uniform(lo, hi, size=want) for s, (lo, hi) in self.domain.items()}
            ev = ec.Evaluator({**cand, **self.params})
            vals = np.asarray(ev(exprs), dtype=float).reshape(len(exprs), -1)
            ok = np.isfinite(vals).all(axis=0)
            for i in np.flatnonzero(ok):
                if got == n:
                    break
                for s in self.states:
                    keep[s].append(cand[s][i])
                got += 1
            if got == n:
                return {**{s: np.array(v) for s, v in keep.items()}, **self.params}
        raise FlatcheckError(f"could not find {n} points where model {self.name!r} is finite")

    def evaluator(self, points: dict) -> ec.Evaluator:
        return ec.Evaluator({**self.params, **points})


# --------------------------------------------------------------------------
# validation

def check_independent_inputs(model: SystemModel, n_points: int = 25, seed: int = 0,
                             fraction: float = 0.9, tol_rel: float = 1e-9):
    """Raise :class:`DependentInputs` unless ``[g_0..g_m]`` has full rank at most points."""
    rng = np.random.default_rng(seed)
    pts = model.sample(n_points, rng)
    ev = model.evaluator(pts)
    G = np.moveaxis(np.asarray(ev([list(g) for g in model.inputs]), dtype=float), -1, 0)
    G = np.swapaxes(G, 1, 2)      # (N, n, m+1)
    r = ranks_at(G, tol_rel)
    full = np.mean(r == len(model.inputs))
    if full < fraction:
        raise DependentInputs(
            f"input vector fields are dependent: full rank at only {full:.0%} of sample points")


# --------------------------------------------------------------------------
# Euler-Lagrange

def euler_lagrange(spec: LagrangianSpec, name: str = "lagrangian", ansatz=None, outputs=None,
                   check_points: int = 25, seed: int = 0) -> SystemModel:
    """State-space model ``qdot = v, M(q) vdot = rhs(q, v) + F u``.

    The mass matrix is the Hessian of ``T`` in the velocities; Coriolis and
    gravity terms come from exact differentiation of ``T`` and ``V``. The
    acceleration is kept implicit through solve nodes.
    """
    q = [ec.symbol(s) for s in spec.q]
    v = [ec.symbol(s) for s in spec.v]
    k = len(q)
    if len(v) != k:
        raise DimensionMismatch("q and v must have the same length")
    for j, col in enumerate(spec.force_map):
        if len(col) != k:
            raise DimensionMismatch(f"force {j} has {len(col)} entries, expected {k}")
    dT_dv = [ec.differentiate(spec.T, vi) for vi in v]
    M = [[ec.differentiate(dT_dv[i], v[j]) for j in range(k)] for i in range(k)]
    rhs = []
    for i in range(k):
        r = ec.differentiate(spec.T, q[i]) - ec.differentiate(spec.V, q[i])
        for j in range(k):
            r = r - ec.differentiate(dT_dv[i], q[j]) * v[j]
        rhs.append(r)

    states = tuple(spec.q) + tuple(spec.v)
    domain = {s: DEFAULT_INTERVAL for s in states}
    domain.update(spec.domain)
    rng = np.random.default_rng(seed)
    pts = {s: rng.uniform(*domain[s], size=check_points) for s in states}
    ev = ec.Evaluator({**spec.params, **pts})
    # quadratic in v: third velocity derivatives vanish
    third = [ec.differentiate(M[i][j], v[l]) for i in range(k) for j in range(i, k) for l in range(k)]
    vals = np.asarray(ev(third), dtype=float) if third else np.zeros(1)
    if np.any(np.abs(vals) > 1e-9):
        raise FlatcheckError("kinetic energy is not quadratic in the velocities")
    Mnum = np.moveaxis(np.asarray(ev(M), dtype=float), -1, 0)
    if not np.all(np.isfinite(Mnum)):
        raise SingularMass("mass matrix is not finite on the domain")
    sv = np.linalg.svd(Mnum, compute_uv=False)
    if np.any(sv[:, -1] <= 1e-12 * np.maximum(sv[:, 0], 1e-300)):
        raise SingularMass("mass matrix is singular at a sampled point")

    acc = ec.solve(M, rhs)
    drift = tuple(v) + tuple(acc)
    inputs = []
    for col in spec.force_map:
        gv = ec.solve(M, [ec.as_expr(c) for c in col])
        inputs.append(tuple([ec.const(0)] * k) + tuple(gv))
    return SystemModel(states=states, drift=drift, inputs=tuple(inputs), params=dict(spec.params),
                       domain=dict(spec.domain), name=name, ansatz=ansatz,
                       outputs=dict(outputs or {}), lagrangian=spec)


# --------------------------------------------------------------------------
# text format

_SECTION = re.compile(r"^\[\s*([A-Za-z_]+)((?:\s+[A-Za-z0-9_]+)*)\s*\]$")


def _split_names(text):
    return [t for t in re.split(r"[\s,]+", text.strip()) if t]


def _sections(text: str):
    out = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            current = (m.group(1).lower(), m.group(2).split(), lineno, [])
            out.append(current)
            continue
        if line.startswith("["):
            raise ExprSyntaxError("malformed section header", line=lineno, position=1, expected="]")
        if current is None:
            raise ExprSyntaxError("content before the first section", line=lineno, position=1,
                                  expected="[section]")
        current[3].append((lineno, line))
    return out


def _kv(lineno, line):
    if "=" not in line:
        raise ExprSyntaxError("expected 'key = value'", line=lineno, position=len(line) + 1,
                              expected="=")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


class _Scope:
    """Symbol table used while parsing one model file."""

    def __init__(self):
        self.states: list[str] = []
        self.params: dict = {}
        self.defines: dict = {}
        self.functions: dict = {}

    def allowed(self):
        return set(self.states) | set(self.params) | set(self.defines)

    def parse(self, text, lineno):
        try:
            e = parse_expr(text, set(self.states) | set(self.params), self.functions, self.defines)
        except ExprSyntaxError as exc:
            raise ExprSyntaxError(str(exc).split(" (position")[0], position=exc.position,
                                  expected=exc.expected, line=lineno) from None
        except UnknownSymbol as exc:
            raise UnknownSymbol(exc.name, position=exc.position) from None
        return e


def loads_model(text: str, name: str | None = None, validate: bool = True) -> SystemModel:
    """Parse a model from its text form (see ``docs/dsl.md``)."""
    secs = _sections(text)
    by_kind: dict[str, list] = {}
    for kind, args, lineno, lines in secs:
        by_kind.setdefault(kind, []).append((args, lineno, lines))
    known = {"meta", "states", "params", "domain", "define", "drift", "input", "lagrangian",
             "ansatz", "output"}
    for kind, _, lineno, _ in secs:
        if kind not in known:
            raise ExprSyntaxError(f"unknown section [{kind}]", line=lineno, position=2,
                                  expected="known section")
    scope = _Scope()
    meta = {}
    for _, _, lines in by_kind.get("meta", []):
        for lineno, line in lines:
            k, v = _kv(lineno, line)
            meta[k] = v

    lag_keys = {}
    if "lagrangian" in by_kind:
        if "states" in by_kind or "drift" in by_kind or "input" in by_kind:
            raise ExprSyntaxError("[lagrangian] excludes [states], [drift] and [input]",
                                  line=by_kind["lagrangian"][0][1], position=1, expected="one form")
        for _, _, lines in by_kind["lagrangian"]:
            for lineno, line in lines:
                k, v = _kv(lineno, line)
                lag_keys[re.sub(r"\s+", " ", k)] = (lineno, v)
        if "q" not in lag_keys:
            raise ExprSyntaxError("[lagrangian] needs q = ...", line=by_kind["lagrangian"][0][1],
                                  position=1, expected="q")
        qs = _split_names(lag_keys["q"][1])
        if "v" in lag_keys:
            vs = _split_names(lag_keys["v"][1])
        else:
            vs = [("v" + s[1:]) if re.fullmatch(r"q\d+", s) else s + "_dot" for s in qs]
        if len(vs) != len(qs):
            raise DimensionMismatch("q and v lists differ in length")
        scope.states = qs + vs
    else:
        for _, _, lines in by_kind.get("states", []):
            for _, line in lines:
                scope.states.extend(_split_names(line))
        if not scope.states:
            raise ExprSyntaxError("model declares no states", line=1, position=1, expected="[states]")

    for _, _, lines in by_kind.get("params", []):
        for lineno, line in lines:
            k, v = _kv(lineno, line)
            scope.params[k] = float(ec.evaluate(scope.parse(v, lineno), {}))

    domain = {}
    for _, _, lines in by_kind.get("domain", []):
        for lineno, line in lines:
            k, v = _kv(lineno, line)
            parts = [p for p in v.split(",") if p.strip()]
            if len(parts) != 2:
                raise ExprSyntaxError("domain needs 'lo, hi'", line=lineno, position=1, expected=",")
            lo, hi = (float(ec.evaluate(scope.parse(p, lineno), scope.params)) for p in parts)
            if k not in scope.states:
                raise UnknownSymbol(k)
            domain[k] = (lo, hi)

    if lag_keys:
        spec_q = tuple(qs)
        spec_v = tuple(vs)

        def dot(e):
            out = ec.const(0)
            for qi, vi in zip(spec_q, spec_v):
                out = out + ec.differentiate(e, qi) * ec.symbol(vi)
            return out

        scope.functions = {"dot": dot}

    for _, _, lines in by_kind.get("define", []):
        for lineno, line in lines:
            k, v = _kv(lineno, line)
            if k in scope.allowed():
                raise ExprSyntaxError(f"define {k!r} shadows an existing name", line=lineno,
                                      position=1, expected="fresh name")
            scope.defines[k] = scope.parse(v, lineno)

    outputs = {}
    for args, lineno, lines in by_kind.get("output", []):
        key = args[0] if args else "output"
        outputs[key] = tuple(scope.parse(line, ln) for ln, line in lines)

    ansatz_rows = {}
    for args, lineno, lines in by_kind.get("ansatz", []):
        if len(args) != 2 or args[0] != "c" or not args[1].isdigit():
            raise ExprSyntaxError("ansatz header must be [ansatz c i]", line=lineno, position=1,
                                  expected="[ansatz c i]")
        ansatz_rows[int(args[1])] = tuple(scope.parse(line, ln) for ln, line in lines)

    model_name = name or meta.get("name", "model")
    if lag_keys:
        for key in ("T", "V"):
            if key not in lag_keys:
                raise ExprSyntaxError(f"[lagrangian] needs {key} = ...", line=by_kind["lagrangian"][0][1],
                                      position=1, expected=key)
        T = scope.parse(lag_keys["T"][1], lag_keys["T"][0])
        V = scope.parse(lag_keys["V"][1], lag_keys["V"][0])
        forces = {}
        for k, (lineno, v) in lag_keys.items():
            m = re.fullmatch(r"force (\d+)", k)
            if m:
                forces[int(m.group(1))] = tuple(scope.parse(p, lineno) for p in v.split(","))
            elif k not in ("q", "v", "T", "V"):
                raise ExprSyntaxError(f"unknown [lagrangian] key {k!r}", line=lineno, position=1,
                                      expected="q, v, T, V or force j")
        if sorted(forces) != list(range(len(forces))) or not forces:
            raise DimensionMismatch("forces must be numbered 0..m")
        spec = LagrangianSpec(q=tuple(qs), v=tuple(vs), T=T, V=V,
                              force_map=tuple(forces[j] for j in range(len(forces))),
                              params=dict(scope.params), domain=domain)
        model = euler_lagrange(spec, name=model_name, outputs=outputs)
    else:
        n = len(scope.states)
        drift_secs = by_kind.get("drift", [])
        if len(drift_secs) != 1:
            raise ExprSyntaxError("model needs exactly one [drift] section", line=1, position=1,
                                  expected="[drift]")
        drift = tuple(scope.parse(line, ln) for ln, line in drift_secs[0][2])
        if len(drift) != n:
            raise DimensionMismatch(f"[drift] has {len(drift)} rows, expected {n}")
        cols = {}
        for args, lineno, lines in by_kind.get("input", []):
            if len(args) != 1 or not args[0].isdigit():
                raise ExprSyntaxError("input header must be [input j]", line=lineno, position=1,
                                      expected="[input j]")
            col = tuple(scope.parse(line, ln) for ln, line in lines)
            if len(col) != n:
                raise DimensionMismatch(f"[input {args[0]}] has {len(col)} rows, expected {n}")
            cols[int(args[0])] = col
        if sorted(cols) != list(range(len(cols))) or not cols:
            raise DimensionMismatch("inputs must be numbered 0..m")
        model = SystemModel(states=tuple(scope.states), drift=drift,
                            inputs=tuple(cols[j] for j in range(len(cols))),
                            params=dict(scope.params), domain=domain, name=model_name,
                            outputs=outputs)
    if ansatz_rows:
        m = model.m
        if sorted(ansatz_rows) != list(range(1, len(ansatz_rows) + 1)):
            raise DimensionMismatch("ansatz sections must be numbered 1..m")
        rows = tuple(ansatz_rows[i] for i in range(1, len(ansatz_rows) + 1))
        if len(rows) != m or any(len(r) != m + 1 for r in rows):
            raise DimensionMismatch(f"ansatz needs {m} sections of {m + 1} coefficients")
        model = model.with_ansatz(rows)
    if validate:
        check_independent_inputs(model)
    return model


def load_model(path, validate: bool = True) -> SystemModel:
    """Read and validate a model file."""
    path = Path(path)
    return loads_model(path.read_text(encoding="utf-8"), name=None, validate=validate)


def parse_expression_lines(text: str, model: SystemModel) -> list:
    """Expressions one per line (``#`` comments allowed) over the model's symbols.

    Used for flat-output candidate files; names of model outputs and defines
    are not available here, only states and parameters.
    """
    scope = _Scope()
    scope.states = list(model.states)
    scope.params = dict(model.params)
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append(scope.parse(line, lineno))
    return out


def dumps_model(model: SystemModel) -> str:
    """Explicit-form text of a model (drift and input sections)."""
    lines = [f"# {model.name}: {model.n} states, {model.m + 1} inputs", "[meta]",
             f"name = {model.name}", "", "[states]", " ".join(model.states), ""]
    if model.params:
        lines.append("[params]")
        lines += [f"{k} = {v!r}" for k, v in model.params.items()]
        lines.append("")
    lines.append("[domain]")
    lines += [f"{k} = {lo!r}, {hi!r}" for k, (lo, hi) in model.domain.items()]
    lines += ["", "[drift]"]
    lines += [ec.to_text(e) for e in model.drift]
    for j, g in enumerate(model.inputs):
        lines += ["", f"[input {j}]"]
        lines += [ec.to_text(e) for e in g]
    if model.ansatz is not None:
        for i, row in enumerate(model.ansatz, start=1):
            lines += ["", f"[ansatz c {i}]"]
            lines += [ec.to_text(e) for e in row]
    for key, exprs in model.outputs.items():
        lines += ["", f"[output {key}]"]
        lines += [ec.to_text(e) for e in exprs]
    return "\n".join(lines) + "\n"
