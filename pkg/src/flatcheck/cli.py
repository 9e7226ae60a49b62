"""``flatcheck`` command line.

Exit codes: 0 verdict TF0/TF1 or verification passed, 1 Fail, 2 Inconclusive,
3 bad input (unreadable model, malformed flags or files).
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

from .errors import FlatcheckError
from .geomkit import Workspace
from .modeldsl import dumps_model, load_model, parse_expression_lines
from .normalforms import crane_model, generate_tf, integrate, scramble
from .parsing import parse_expr
from .pointlinalg import CheckConfig
from .sfechk import (StructureIndices, check, closure_for_flat_output, input_map_from_tops,
                     tf_state_names, verify_flat_output, verify_transformation)

EXIT_OK, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_INPUT = 0, 1, 2, 3
BUILTIN = {"crane": crane_model}


class InputError(Exception):
    pass


def _seed_default():
    env = os.environ.get("FLATCHECK_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"FLATCHECK_SEED must be an integer, got {env!r}") from None


def _load(path: str):
    """A model file, or ``builtin:crane``."""
    if path.startswith("builtin:"):
        key = path.split(":", 1)[1]
        if key not in BUILTIN:
            raise InputError(f"unknown built-in model {key!r} (known: {', '.join(BUILTIN)})")
        return BUILTIN[key]()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"model file {path!r} not found")
    return load_model(p)


def _cfg(args) -> CheckConfig:
    try:
        return CheckConfig(n_points=args.points, tol_rel=args.tol, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _indices(text: str) -> StructureIndices:
    """``m,s,k_zeta,k_chi,xi0:xi1:...``"""
    m = re.fullmatch(r"\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*([\d:]+)\s*", text)
    if not m:
        raise InputError(f"indices must look like 'm,s,k_zeta,k_chi,x0:x1:...', got {text!r}")
    xi = tuple(int(v) for v in m.group(5).split(":"))
    return StructureIndices(int(m.group(1)), int(m.group(2)), int(m.group(3)), int(m.group(4)), xi)


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _verdict_code(report) -> int:
    if report.verdict in ("TF0", "TF1"):
        return EXIT_OK
    return EXIT_FAIL if report.verdict == "Fail" else EXIT_INCONCLUSIVE


# --------------------------------------------------------------------------
# subcommands

def cmd_check(args) -> int:
    model = _load(args.model)
    cfg = _cfg(args)
    report = check(model, args.form, cfg, all_conditions=args.all_conditions)
    if args.phi_file and report.passed:
        phi = parse_expression_lines(Path(args.phi_file).read_text(encoding="utf-8"), model)
        F0 = closure_for_flat_output(model, report)
        report.flat_output = verify_flat_output(model, phi, F0, report._ws, cfg).as_dict()
    print(report.table())
    if args.json:
        _write_json(args.json, report.as_dict())
    return _verdict_code(report)


def cmd_verify_output(args) -> int:
    model = _load(args.model)
    cfg = _cfg(args)
    if args.phi_file:
        phi = parse_expression_lines(Path(args.phi_file).read_text(encoding="utf-8"), model)
    elif args.output:
        if args.output not in model.outputs:
            raise InputError(f"model has no output {args.output!r}")
        phi = list(model.outputs[args.output])
    else:
        raise InputError("give --phi-file or --output")
    report = check(model, args.form, cfg)
    if not report.passed:
        print(report.table())
        print("no involutive closure available: the structure check did not pass")
        return _verdict_code(report)
    F0 = closure_for_flat_output(model, report)
    res = verify_flat_output(model, phi, F0, report._ws, cfg)
    print(f"flat output: {'ok' if res.ok else 'rejected'}  basis residual {res.basis_residual:.3e}"
          f"  independent {res.rank_ok}")
    if res.detail:
        print(res.detail)
    if args.json:
        _write_json(args.json, res.as_dict())
    return EXIT_OK if res.ok else EXIT_FAIL


def _sections(text):
    out, cur = {}, None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[\s*(\w+)\s*\]", line)
        if m:
            cur = m.group(1)
            out.setdefault(cur, [])
        elif cur is None:
            raise InputError(f"line outside a section: {raw!r}")
        else:
            out[cur].append(line)
    return out


def read_transformation(text: str, model):
    """Sections ``[indices]``, ``[phi]``, optional ``[alpha]``/``[beta]`` and ``[expected]``.

    ``[beta]`` holds one comma-separated row per line; ``[expected]`` holds
    ``row = expression`` lines in template coordinates. Without ``[alpha]``
    and ``[beta]`` the input map makes each new input the derivative of its
    chain-top coordinate.
    """
    sec = _sections(text)
    if ("alpha" in sec) != ("beta" in sec):
        raise InputError("give both [alpha] and [beta] or neither")
    for key in ("indices", "phi"):
        if key not in sec:
            raise InputError(f"transformation file lacks a [{key}] section")
    kv = {}
    for line in sec["indices"]:
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    try:
        idx = StructureIndices(int(kv["m"]), int(kv["s"]), int(kv["k_zeta"]), int(kv["k_chi"]),
                               tuple(int(x) for x in kv["k_xi"].split(",")))
    except (KeyError, ValueError) as exc:
        raise InputError(f"bad [indices] section: {exc}") from None
    syms = set(model.states) | set(model.params)
    phi = [parse_expr(line, syms) for line in sec["phi"]]
    if "alpha" in sec:
        alpha = [parse_expr(line, syms) for line in sec["alpha"]]
        beta = [[parse_expr(e, syms) for e in line.split(",")] for line in sec["beta"]]
    else:
        alpha, beta = input_map_from_tops(model, phi, idx)
    expected = None
    if "expected" in sec:
        tf_syms = set(tf_state_names(idx)) | set(model.params)
        expected = {}
        for line in sec["expected"]:
            k, _, v = line.partition("=")
            expected[k.strip()] = parse_expr(v.strip(), tf_syms)
    return phi, alpha, beta, idx, expected


def cmd_verify_transformation(args) -> int:
    model = _load(args.model)
    cfg = _cfg(args)
    phi, alpha, beta, idx, expected = read_transformation(
        Path(args.map_file).read_text(encoding="utf-8"), model)
    ws = Workspace.for_model(model, cfg)
    rep = verify_transformation(model, phi, alpha, beta, idx, ws, cfg, tol=args.residual_tol,
                                expected=expected)
    for name, r in sorted(rep.residuals.items(), key=lambda kv: -kv[1])[:args.show]:
        print(f"{name:>12}  {r:.3e}")
    print(f"max residual {rep.max_residual:.3e}: {'ok' if rep.ok else 'mismatch'}")
    if args.json:
        _write_json(args.json, {"max_residual": rep.max_residual, "ok": rep.ok,
                                "residuals": rep.residuals})
    return EXIT_OK if rep.ok else EXIT_FAIL


def cmd_generate(args) -> int:
    idx = _indices(args.indices)
    model = generate_tf(idx, seed=args.seed, drift_complexity=args.complexity)
    if args.scramble:
        model, _ = scramble(model, seed=args.seed, strength=args.strength)
    text = dumps_model(model)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _load(args.model)
    x0 = [float(v) for v in args.x0.split(",")] if args.x0 else [0.0] * model.n
    inputs = None
    if args.inputs:
        vals = [float(v) for v in args.inputs.split(",")]
        if len(vals) != len(model.inputs):
            raise InputError(f"need {len(model.inputs)} constant inputs")
        inputs = lambda t: vals  # noqa: E731
    try:
        traj = integrate(model, inputs, x0, args.horizon, args.step)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    text = traj.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------

def _common(p, seed_default):
    p.add_argument("--points", type=int, default=25, help="generic sample points")
    p.add_argument("--tol", type=float, default=1e-9, help="relative rank tolerance")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--json", help="write the report as JSON to this path ('-' for stdout)")


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flatcheck",
                                 description="Static feedback equivalence to triangular forms.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("check", help="decide TF0/TF1 equivalence")
    p.add_argument("model", help="model file or builtin:crane")
    p.add_argument("--form", choices=("auto", "tf0", "tf1"), default="auto")
    p.add_argument("--all-conditions", action="store_true")
    p.add_argument("--phi-file", help="also verify this flat-output candidate")
    _common(p, seed_default)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("verify-output", help="verify a flat-output candidate")
    p.add_argument("model")
    p.add_argument("--phi-file")
    p.add_argument("--output", help="use a named [output] block of the model")
    p.add_argument("--form", choices=("auto", "tf0", "tf1"), default="auto")
    _common(p, seed_default)
    p.set_defaults(func=cmd_verify_output)

    p = sub.add_parser("verify-transformation", help="check a map onto the triangular form")
    p.add_argument("model")
    p.add_argument("map_file")
    p.add_argument("--residual-tol", type=float, default=1e-8)
    p.add_argument("--show", type=int, default=10, help="largest residual rows to print")
    _common(p, seed_default)
    p.set_defaults(func=cmd_verify_transformation)

    p = sub.add_parser("generate", help="emit a random normal-form model")
    p.add_argument("indices", help="m,s,k_zeta,k_chi,xi0:xi1:...")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--complexity", type=int, default=2)
    p.add_argument("--scramble", action="store_true")
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="RK4 trajectory as CSV")
    p.add_argument("model")
    p.add_argument("--x0", help="comma-separated initial state")
    p.add_argument("--inputs", help="comma-separated constant inputs")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    return ap


def run(argv=None) -> int:
    try:
        parser = build_parser(_seed_default())
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, OSError, FlatcheckError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
