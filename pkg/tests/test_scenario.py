import json
import os
from dataclasses import replace

import numpy as np
import pytest
import yaml

from voltage_incentives.codesign import run_codesign
from voltage_incentives.dso import incentive_payment
from voltage_incentives.exceptions import ParseError, ValidationError
from voltage_incentives.scenario import (
    OUT_DIR_ENV,
    bundled_scenario,
    dump_scenario,
    load_scenario,
    output_dir,
    read_trace_table,
    scenario_from_dict,
    trace_columns,
    write_trace,
)
from voltage_incentives.tso import Schedule


@pytest.fixture
def raw():
    return yaml.safe_load(bundled_scenario("five_bus.scenario").read_text())


def _write(tmp_path, doc, name="case.scenario"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def test_bundled_values(base_cfg):
    assert base_cfg.eta == 1e-3
    assert base_cfg.epsilon == Schedule("constant", 1e-4)
    assert (base_cfg.v_lo, base_cfg.v_hi) == (0.96, 1.04)
    assert base_cfg.dso_buses == (1, 2, 3, 5)
    assert base_cfg.mode == "feedback"
    assert base_cfg.sigma(0) == 1e-3 and base_cfg.sigma(10_000) == 1e-8
    costs = [pr.cost_coeff for pr in base_cfg.profiles]
    assert all(0.2 <= c <= 0.8 for c in costs)


def test_costs_follow_the_seed(tmp_path, raw):
    a = load_scenario(_write(tmp_path, raw, "a.scenario"))
    b = load_scenario(_write(tmp_path, raw, "b.scenario"))
    assert [p.cost_coeff for p in a.profiles] == [p.cost_coeff for p in b.profiles]
    expected = np.random.default_rng(0).uniform(0.2, 0.8, 4)
    np.testing.assert_array_equal([p.cost_coeff for p in a.profiles], expected)
    raw["seed"] = 1
    c = load_scenario(_write(tmp_path, raw, "c.scenario"))
    assert [p.cost_coeff for p in a.profiles] != [p.cost_coeff for p in c.profiles]


def test_seed_required_for_drawn_costs(tmp_path, raw):
    del raw["seed"]
    with pytest.raises(ValidationError) as err:
        load_scenario(_write(tmp_path, raw))
    assert err.value.field == "seed"


def test_explicit_costs_need_no_seed(tmp_path, raw):
    del raw["seed"]
    for i, m in enumerate(raw["dsos"]["members"]):
        m["cost"] = 0.3 + 0.1 * i
    cfg = load_scenario(_write(tmp_path, raw))
    assert [p.cost_coeff for p in cfg.profiles] == pytest.approx([0.3, 0.4, 0.5, 0.6])


def test_slack_bus_dso_rejected(tmp_path, raw):
    raw["dsos"]["members"][0]["bus"] = 4
    with pytest.raises(ValidationError) as err:
        load_scenario(_write(tmp_path, raw))
    assert "slack" in str(err.value)
    assert err.value.field.startswith("dsos.members")


@pytest.mark.parametrize("edit, field", [
    (lambda d: d["dsos"]["members"][0].update(bus=9), "dsos.members"),
    (lambda d: d["dsos"]["members"][1].update(bus=1), "dsos.members"),
    (lambda d: d["limits"].update(v_lo=1.05), "limits.v_lo"),
    (lambda d: d["incentive"].update(gamma=-1.0), "incentive.gamma"),
    (lambda d: d["solver"].update(eta=0.0), "solver.eta"),
    (lambda d: d["solver"].update(sigma={"kind": "geometric", "initial": 1e-3,
                                         "ratio": 0.9, "floor": 0.0}), "solver.sigma"),
    (lambda d: d.update(mode="open-loop"), "mode"),
    (lambda d: d.update(disturbances=[{"at": 3, "dso": 7, "q_min": 0, "q_max": 1}]),
     "disturbances"),
])
def test_validation_names_the_field(tmp_path, raw, edit, field):
    edit(raw)
    with pytest.raises(ValidationError) as err:
        load_scenario(_write(tmp_path, raw))
    assert err.value.field.startswith(field)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.scenario"
    path.write_text("network: five_bus.network\nseed: 0\nloads: [\n  {bus: 1, p: 1.0\n")
    with pytest.raises(ParseError, match=r"bad\.scenario: line \d+, column \d+"):
        load_scenario(path)


def test_missing_field_is_parse_error(tmp_path, raw):
    del raw["incentive"]["gamma"]
    with pytest.raises(ParseError, match="incentive.gamma"):
        load_scenario(_write(tmp_path, raw))


def test_unknown_section(tmp_path, raw):
    raw["plotting"] = {"dpi": 300}
    with pytest.raises(ParseError, match="plotting"):
        load_scenario(_write(tmp_path, raw))


def test_missing_file():
    with pytest.raises(ParseError):
        load_scenario("does/not/exist.scenario")


def test_disturbances_use_one_based_numbers(disturbance_cfg):
    (d,) = disturbance_cfg.disturbances
    assert d.dso_index == 0 and d.at_outer_iter == 200
    assert (d.new_q_min, d.new_q_max) == (-0.40, 3.0)


@pytest.mark.parametrize("name", ["five_bus.scenario", "five_bus_disturbance.scenario"])
def test_round_trip(tmp_path, name):
    cfg = load_scenario(bundled_scenario(name))
    path = dump_scenario(cfg, tmp_path / "canon.scenario")
    again = load_scenario(path)
    assert again == cfg
    # second pass is a fixed point of the text form too
    assert dump_scenario(again, tmp_path / "canon2.scenario").read_text() == path.read_text()


def test_dict_form_matches_file_form(raw, base_cfg):
    cfg = scenario_from_dict(raw, base_dir=bundled_scenario().parent)
    assert cfg == base_cfg


@pytest.fixture(scope="module")
def short_trace(base_cfg):
    return run_codesign(replace(base_cfg, mode="linear"), max_outer=100)


def test_write_trace_rows_and_payments(tmp_path, short_trace, base_cfg):
    paths = write_trace(short_trace, tmp_path)
    lines = paths["table"].read_text().splitlines()
    assert len(lines) == 101
    assert lines[0].split(",") == trace_columns((1, 2, 3, 5))
    cols = read_trace_table(paths["table"])
    for b in (1, 2, 3, 5):
        again = incentive_payment(cols[f"xi_{b}"], cols[f"v_{b}"], cols[f"v_ref_{b}"],
                                  base_cfg.gamma)
        np.testing.assert_array_equal(again, cols[f"payment_{b}"])
    np.testing.assert_array_equal(cols["k"], np.arange(100))


def test_summary_document(tmp_path, base_run):
    paths = write_trace(base_run.trace, tmp_path)
    doc = json.loads(paths["summary"].read_text())
    v = np.array(doc["final_voltage"])
    assert v.shape == (4,) and np.all((v >= 0.96) & (v <= 1.04))
    assert doc["converged"] is True
    assert doc["oracle_reports"] == []


def test_unwritable_output_dir(tmp_path, short_trace):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write trace"):
        write_trace(short_trace, blocker / "sub")


def test_output_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)
    assert output_dir() == output_dir(None) == type(tmp_path)("out")
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "env"))
    assert output_dir() == tmp_path / "env"
    assert output_dir(tmp_path / "flag") == tmp_path / "flag"
    assert os.environ[OUT_DIR_ENV].endswith("env")
