import json
import subprocess
import sys

import pytest
import yaml

import voltage_incentives.verify as verify_mod
from voltage_incentives.cli import main
from voltage_incentives.oracles import OracleReport
from voltage_incentives.scenario import OUT_DIR_ENV, bundled_scenario, read_trace_table

BASE = str(bundled_scenario("five_bus.scenario"))


def _variant(tmp_path, **solver):
    doc = yaml.safe_load(bundled_scenario("five_bus.scenario").read_text())
    doc["solver"].update(solver)
    path = tmp_path / "variant.scenario"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_check(capsys):
    assert main(["check", BASE]) == 0
    out = capsys.readouterr().out
    vals = dict(line.split("=")[0:2] for line in out.splitlines() if "=" in line)
    assert float(vals["mu        "]) > 0
    assert float(vals["theta     "].split()[0]) < 1
    assert "conditioning ok" in out


def test_check_flags_oversized_step(tmp_path, capsys):
    assert main(["check", _variant(tmp_path, eta=1.0)]) == 2
    assert "contraction range" in capsys.readouterr().err


def test_verify(capsys):
    assert main(["verify", BASE]) == 0
    lines = capsys.readouterr().out.splitlines()
    records = [json.loads(line) for line in lines if line.startswith("{")]
    assert len(records) == 5 and all(r["passed"] for r in records)


def test_verify_failure_exit_code(monkeypatch, capsys):
    bad = [OracleReport.compare("hypergradient", 1.0, 2.0, 1e-4)]
    monkeypatch.setattr(verify_mod, "oracle_suite", lambda cfg, n_jobs=1: bad)
    assert main(["verify", BASE]) == 3
    assert "hypergradient" in capsys.readouterr().err


def test_missing_scenario(capsys):
    assert main(["run", "missing.scenario"]) == 1
    assert "missing.scenario" in capsys.readouterr().err


def test_invalid_scenario(tmp_path, capsys):
    assert main(["check", _variant(tmp_path, eta=-1.0)]) == 1
    assert "solver.eta" in capsys.readouterr().err


def test_bad_jobs(capsys):
    assert main(["inner", BASE, "--jobs", "0"]) == 1


def test_inner(capsys):
    assert main(["inner", BASE, "--sigma", "1e-4"]) == 0
    out = capsys.readouterr().out
    assert "converged" in out and "sensitivity" in out


def test_inner_stall(capsys):
    assert main(["inner", BASE, "--sigma", "1e-9"]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_run_writes_trace(tmp_path, capsys):
    assert main(["run", BASE, "--out", str(tmp_path), "--max-outer", "5"]) == 0
    cols = read_trace_table(tmp_path / "trace.csv")
    assert len(cols["k"]) == 5
    assert json.loads((tmp_path / "trace_summary.json").read_text())["outer_iterations"] == 5


def test_run_honours_env_out_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "from_env"))
    assert main(["run", BASE, "--max-outer", "2"]) == 0
    assert (tmp_path / "from_env" / "trace.csv").exists()


def test_stall_exit_code_and_partial_trace(tmp_path, capsys):
    # tolerance shrinks faster than a capped inner loop can follow
    path = _variant(tmp_path, max_inner=4000,
                    sigma={"kind": "geometric", "initial": 1e-3, "ratio": 0.5, "floor": 1e-13})
    assert main(["run", path, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "did not reach tolerance" in err
    assert "partial trace" in err
    cols = read_trace_table(tmp_path / "o" / "trace_partial.csv")
    assert 0 < len(cols["k"]) < 50


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "voltage_incentives", "check", BASE],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "mu" in res.stdout


@pytest.mark.slow
def test_disturb_demo(tmp_path, capsys):
    assert main(["disturb-demo", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "disturbance at k=200" in out
    assert (tmp_path / "trace.csv").exists()
