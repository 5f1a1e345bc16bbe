"""Cross-checks of the iterative algorithms against the reference solutions,
run on a scenario's linear model."""
from __future__ import annotations

import logging

import numpy as np

from .codesign import GameModel, build_game_model, linear_problem
from .dso import GameIterate, check_conditioning, linear_measure, run_inner_loop
from .exceptions import InnerLoopStall
from .oracles import (
    OracleReport,
    closed_form_ne,
    equilibrium_sensitivity,
    fd_hypergradient,
    kkt_residual,
    verify_ne,
)
from .scenario import ScenarioConfig
from .tso import hypergradient

log = logging.getLogger(__name__)


def solve_to_accuracy(profiles, sens, p, gamma, eta, v_ref, accuracy, *, max_iter=10_000,
                      start=None, n_jobs=1) -> GameIterate:
    """Inner loop in analysis mode, stopped once the iterate is within ``accuracy``.

    A step-size test at ``sigma`` only bounds the error by about
    ``sigma / (eta * mu)``, so ``sigma`` is derived from the target. Runs
    warm-started passes with tightening tolerances, each under ``max_iter``.
    """
    cond = check_conditioning(profiles, sens, gamma, eta)
    target = accuracy * eta * cond.mu
    measure = linear_measure(sens, p)
    it = start if start is not None else GameIterate.cold(len(profiles))
    sigma = max(target, 1e-3)
    while True:
        it = run_inner_loop(profiles, it, v_ref, gamma, eta, sigma, measure, sens,
                            max_iter=max_iter, n_jobs=n_jobs)
        if sigma <= target:
            return it
        sigma = max(sigma * 1e-2, target)


def oracle_suite(cfg: ScenarioConfig, model: GameModel | None = None, v_ref=None,
                 *, n_jobs: int = 1) -> list[OracleReport]:
    """Equilibrium, sensitivity and hypergradient checks at ``v_ref`` (default: initial)."""
    model = model or build_game_model(cfg)
    prob = linear_problem(cfg, model)
    v_ref = np.array(cfg.v_ref_init if v_ref is None else v_ref, dtype=float)
    profiles, sens, p, gamma = cfg.profiles, model.sens, model.p, cfg.gamma

    q_star = closed_form_ne(profiles, sens, gamma, v_ref, p)
    reports = [OracleReport.compare("ne_kkt_residual",
                                    kkt_residual(q_star, profiles, sens, gamma, v_ref, p),
                                    0.0, 1e-10)]
    try:
        it = solve_to_accuracy(profiles, sens, p, gamma, cfg.eta, v_ref, 1e-7,
                               max_iter=cfg.max_inner, n_jobs=n_jobs)
    except InnerLoopStall as exc:
        reports.append(OracleReport("inner_loop_equilibrium", np.nan, np.nan, np.inf,
                                    np.inf, 1e-6, False))
        log.error("inner loop stalled during verification: %s", exc)
        return reports

    reports.append(OracleReport.compare("inner_loop_equilibrium", it.xi, q_star, 1e-6))
    reports.append(verify_ne(it.xi, profiles, sens, gamma, v_ref, p, tol=1e-6))
    s_ref = equilibrium_sensitivity(profiles, sens, gamma, q_star)
    frob = float(np.linalg.norm(it.s - s_ref))
    reports.append(OracleReport("sensitivity_frobenius", frob, 0.0, frob, np.inf, 1e-6,
                                frob <= 1e-6))

    v = linear_measure(sens, p)(it.xi)
    rep = hypergradient(v_ref, v, it.xi, it.s, sens.X, gamma, cfg.rho, prob.v_lo, prob.v_hi)
    fd = fd_hypergradient(prob, v_ref, h=1e-5)
    reports.append(OracleReport.compare("hypergradient", rep.grad, fd, 1e-4, relative=True,
                                        floor=1e-6 * max(1.0, float(np.max(np.abs(fd))))))
    for r in reports:
        log.info("%s", r.to_line())
    return reports
