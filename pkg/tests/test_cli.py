import json

import pytest

from conftest import DEMOS
from flatcheck.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, run

CRANE = str(DEMOS / "crane.model")


def test_check_tf1_exit_zero(capsys):
    assert run(["check", CRANE, "--form", "tf1", "--seed", "42"]) == EXIT_OK
    assert "TF1" in capsys.readouterr().out


def test_check_tf0_fails_condition_2(capsys):
    assert run(["check", CRANE, "--form", "tf0"]) == EXIT_FAIL
    assert "Fail(2)" in capsys.readouterr().out


def test_builtin_model():
    assert run(["check", "builtin:crane", "--form", "tf1"]) == EXIT_OK


def test_verify_output_load_position():
    assert run(["verify-output", CRANE, "--phi-file", str(DEMOS / "load_pos.txt")]) == EXIT_OK
    assert run(["verify-output", CRANE, "--output", "load_position"]) == EXIT_OK


def test_verify_output_trolley_rejected():
    assert run(["verify-output", CRANE, "--phi-file", str(DEMOS / "trolley.txt")]) == EXIT_FAIL


def test_check_with_phi_file(tmp_path):
    out = tmp_path / "r.json"
    code = run(["check", CRANE, "--form", "tf1", "--phi-file", str(DEMOS / "load_pos.txt"),
                "--json", str(out)])
    assert code == EXIT_OK
    assert json.loads(out.read_text())["flat_output"]["status"] == "pass"


def test_verify_transformation_demo(capsys):
    assert run(["verify-transformation", CRANE, str(DEMOS / "crane_tf1.map")]) == EXIT_OK
    assert "max residual" in capsys.readouterr().out


def test_json_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert run(["check", CRANE, "--seed", "7", "--json", str(p)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["verdict"] == "TF1"


def test_seed_from_environment(tmp_path, monkeypatch):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    monkeypatch.setenv("FLATCHECK_SEED", "5")
    run(["check", CRANE, "--json", str(a)])
    run(["check", CRANE, "--seed", "5", "--json", str(b)])
    assert a.read_bytes() == b.read_bytes()
    monkeypatch.setenv("FLATCHECK_SEED", "abc")
    assert run(["check", CRANE]) == EXIT_INPUT


@pytest.mark.parametrize("argv", [
    ["check", "no/such/file.model"],
    ["check", "builtin:nope"],
    ["check", CRANE, "--form", "tf9"],
    ["check", CRANE, "--points", "2"],
    ["generate", "2,0,1"],
    ["generate", "1,0,1,2,0:0"],
    ["verify-output", CRANE],
    ["simulate", CRANE, "--inputs", "1,2"],
    ["simulate", CRANE, "--step", "0"],
    [],
])
def test_input_errors(argv, capsys):
    assert run(argv) == EXIT_INPUT


def test_malformed_model_file(tmp_path):
    p = tmp_path / "bad.model"
    p.write_text("[states]\nx\n[drift]\nsin(x\n[input 0]\n1\n")
    assert run(["check", str(p)]) == EXIT_INPUT


def test_malformed_map_file(tmp_path):
    p = tmp_path / "bad.map"
    p.write_text("[phi]\nq1\n")
    assert run(["verify-transformation", CRANE, str(p)]) == EXIT_INPUT


def test_generate_then_check(tmp_path):
    out = tmp_path / "g.model"
    assert run(["generate", "2,1,1,2,0:1:0", "--seed", "3", "--scramble", "--out", str(out)]) == EXIT_OK
    assert run(["check", str(out), "--form", "tf1"]) == EXIT_OK


def test_simulate_csv(capsys):
    assert run(["simulate", CRANE, "--x0", "0,0,1,0,0,0,0,0,0,0", "--horizon", "0.02",
                "--step", "0.01"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("t,q1") and len(lines) == 4
