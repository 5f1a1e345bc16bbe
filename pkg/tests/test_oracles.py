import json

import numpy as np
import pytest

import voltage_incentives.dso as dso_mod
import voltage_incentives.oracles as oracles
import voltage_incentives.tso as tso_mod
from voltage_incentives.dso import (
    DsoProfile,
    GameIterate,
    check_conditioning,
    linear_measure,
    run_inner_loop,
)
from voltage_incentives.exceptions import OracleNoConvergence
from voltage_incentives.grid import LinearSensitivities
from voltage_incentives.oracles import (
    LinearProblem,
    OracleReport,
    closed_form_ne,
    equilibrium_sensitivity,
    fd_hypergradient,
    kkt_multipliers,
    kkt_residual,
    random_instance,
    reports_pass,
    verify_ne,
)
from voltage_incentives.verify import oracle_suite, solve_to_accuracy

SINGLE = (DsoProfile(1, 0.5, -10.0, 10.0),)
SINGLE_SENS = LinearSensitivities([[0.0]], [[-0.1]], [1.0])


def test_unconstrained_equals_dense_solve():
    rng = np.random.default_rng(1)
    profiles, sens, p = random_instance(rng, 4, gamma=2.0)
    v_ref = np.full(4, 1.01)
    C = np.diag([pr.cost_coeff for pr in profiles])
    expected = 2.0 * np.linalg.solve(C - 2.0 * sens.X_tilde, sens.v0 + sens.R @ p - v_ref)
    np.testing.assert_allclose(closed_form_ne(profiles, sens, 2.0, v_ref, p), expected, rtol=1e-12)


def test_single_dso_value():
    q = closed_form_ne(SINGLE, SINGLE_SENS, 0.1, [1.05], [0.0])
    assert q[0] == pytest.approx(-9.6154e-3, abs=1e-7)


def test_bound_active_at_q_max():
    profiles = (DsoProfile(1, 0.5, -10.0, 1e-3),)
    q = closed_form_ne(profiles, SINGLE_SENS, 0.1, [0.95], [0.0])
    assert q[0] == 1e-3
    assert kkt_multipliers(q, profiles, SINGLE_SENS, 0.1, [0.95], [0.0])[0] >= 0
    assert kkt_residual(q, profiles, SINGLE_SENS, 0.1, [0.95], [0.0]) <= 1e-10


def test_mixed_saturation_satisfies_kkt():
    rng = np.random.default_rng(12)
    profiles, sens, p = random_instance(rng, 4, gamma=5.0, limits=0.01)
    v_ref = np.array([0.9, 1.1, 1.0, 1.0])
    q = closed_form_ne(profiles, sens, 5.0, v_ref, p)
    assert kkt_residual(q, profiles, sens, 5.0, v_ref, p) <= 1e-10
    assert np.all(kkt_multipliers(q, profiles, sens, 5.0, v_ref, p) >= -1e-12)
    assert np.any(np.abs(q) == 0.01)


def test_sweep_failure_is_reported():
    rng = np.random.default_rng(12)
    profiles, sens, p = random_instance(rng, 4, gamma=5.0, limits=0.01)
    with pytest.raises(OracleNoConvergence):
        closed_form_ne(profiles, sens, 5.0, [0.9, 1.1, 1.0, 1.0], p, max_sweeps=1)


def test_verify_ne_examples():
    rng = np.random.default_rng(3)
    profiles, sens, p = random_instance(rng, 4, gamma=2.0, limits=0.05)
    v_ref = np.array([0.93, 1.0, 1.02, 1.0])
    q = closed_form_ne(profiles, sens, 2.0, v_ref, p)
    assert verify_ne(q, profiles, sens, 2.0, v_ref, p).passed
    bad = verify_ne(np.clip(q + 0.01, -0.05, 0.05), profiles, sens, 2.0, v_ref, p)
    assert not bad.passed and bad.abs_error > 0


def test_verify_ne_saturated_member():
    profiles = (DsoProfile(1, 0.5, -1e-3, 10.0),)
    q = closed_form_ne(profiles, SINGLE_SENS, 0.1, [1.05], [0.0])
    assert q[0] == -1e-3
    assert verify_ne(q, profiles, SINGLE_SENS, 0.1, [1.05], [0.0]).passed


def test_inner_loop_passes_verify_ne(base_cfg, base_model):
    sens, p, gamma = base_model.sens, base_model.p, base_cfg.gamma
    cond = check_conditioning(base_cfg.profiles, sens, gamma)
    it = run_inner_loop(base_cfg.profiles, GameIterate.cold(4), np.ones(4), gamma,
                        cond.mu / cond.L_F**2, 1e-8, linear_measure(sens, p), sens)
    rep = verify_ne(it.xi, base_cfg.profiles, sens, gamma, np.ones(4), p, tol=1e-6)
    assert rep.passed, rep.to_line()


def test_report_pass_flag_and_json():
    r = OracleReport.compare("x", [1.0, 2.0], [1.0, 2.0 + 1e-7], 1e-6)
    assert r.passed and r.abs_error == pytest.approx(1e-7)
    assert not OracleReport.compare("x", 1.0, 1.1, 1e-3).passed
    rel = OracleReport.compare("y", [0.0, 101.0], [0.0, 100.0], 0.02, relative=True)
    assert rel.passed and rel.rel_error == pytest.approx(0.01)
    doc = json.loads(OracleReport("z", np.nan, 1.0, np.inf, np.inf, 1e-6, False).to_line())
    assert doc["algorithm_value"] is None and doc["passed"] is False
    assert reports_pass([r]) and not reports_pass([r, OracleReport.compare("x", 0, 1, 0.5)])


def test_oracles_do_not_use_the_algorithms(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("oracle called the algorithm under test")

    for name in ("inner_step", "sensitivity_step", "run_inner_loop", "pseudo_gradient_i"):
        monkeypatch.setattr(dso_mod, name, boom)
    monkeypatch.setattr(tso_mod, "hypergradient", boom)
    rng = np.random.default_rng(0)
    profiles, sens, p = random_instance(rng, 3, gamma=2.0, limits=0.05)
    v_ref = np.array([0.95, 1.0, 1.05])
    q = closed_form_ne(profiles, sens, 2.0, v_ref, p)
    verify_ne(q, profiles, sens, 2.0, v_ref, p)
    equilibrium_sensitivity(profiles, sens, 2.0, q)
    fd_hypergradient(LinearProblem(profiles, sens, p, 2.0, 1e3, 0.96, 1.04), v_ref)
    for name in ("inner_step", "run_inner_loop", "hypergradient"):
        assert not hasattr(oracles, name)


def _agreement_instance(rng):
    n = int(rng.choice([1, 2, 4]))
    limits = None if rng.random() < 0.5 else 0.05
    profiles, sens, p = random_instance(rng, n, gamma=3.0, limits=limits)
    v_ref = 1 + 0.03 * rng.normal(size=n)
    return profiles, sens, p, v_ref


def test_agreement_suite():
    rng = np.random.default_rng(77)
    saturated_seen = 0
    for _ in range(60):
        profiles, sens, p, v_ref = _agreement_instance(rng)
        cond = check_conditioning(profiles, sens, 3.0)
        eta = cond.mu / cond.L_F**2
        it = solve_to_accuracy(profiles, sens, p, 3.0, eta, v_ref, 1e-8)
        q = closed_form_ne(profiles, sens, 3.0, v_ref, p)
        assert np.max(np.abs(it.xi - q)) <= 1e-6
        s_ref = equilibrium_sensitivity(profiles, sens, 3.0, q)
        free = s_ref.any(axis=1)
        assert np.linalg.norm(it.s[free] - s_ref[free]) <= 1e-6
        np.testing.assert_array_equal(it.s[~free], 0.0)
        saturated_seen += int((~free).any())
    assert saturated_seen > 0


def test_oracle_suite_on_bundled_scenario(base_cfg, base_model):
    reports = oracle_suite(base_cfg, base_model)
    assert [r.quantity for r in reports] == [
        "ne_kkt_residual", "inner_loop_equilibrium", "best_response_deviation",
        "sensitivity_frobenius", "hypergradient"]
    for r in reports:
        assert r.passed, r.to_line()
