"""Co-design loop: DSO equilibrium learning alternating with TSO incentive steps,
closed around the AC plant (or the linear model in analysis mode)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_vector
from .dso import (
    DsoProfile,
    GameIterate,
    check_conditioning,
    incentive_payment,
    linear_measure,
    run_inner_loop,
)
from .exceptions import InnerLoopStall, PlantInfeasible, PowerFlowError, ValidationError
from .grid import LinearSensitivities, linearize, solve_ac_power_flow
from .oracles import LinearProblem
from .scenario import ScenarioConfig, load_scenario
from .tso import IncentiveState, hypergradient, update_incentive

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Disturbance:
    at_outer_iter: int
    dso_index: int      # 0-based position in the DSO list
    new_q_min: float
    new_q_max: float

    def __post_init__(self):
        if not self.new_q_min <= self.new_q_max:
            raise ValueError("disturbance q_min exceeds q_max")

    def describe(self) -> str:
        return f"dso{self.dso_index + 1} q in [{self.new_q_min:g}, {self.new_q_max:g}]"


def apply_disturbance(profiles, d: Disturbance) -> tuple[DsoProfile, ...]:
    """Replace the box of one DSO. Pair with :func:`clamp_to_profiles` for the live demand."""
    profiles = tuple(profiles)
    if not 0 <= d.dso_index < len(profiles):
        raise IndexError(f"disturbance targets DSO {d.dso_index + 1} of {len(profiles)}")
    out = list(profiles)
    out[d.dso_index] = replace(out[d.dso_index], q_min=d.new_q_min, q_max=d.new_q_max)
    return tuple(out)


def clamp_to_profiles(xi, profiles) -> np.ndarray:
    lo = np.array([pr.q_min for pr in profiles])
    hi = np.array([pr.q_max for pr in profiles])
    return np.clip(np.asarray(xi, dtype=float), lo, hi)


@dataclass
class TraceRow:
    k: int
    v_ref: np.ndarray
    v: np.ndarray
    xi: np.ndarray
    payments: np.ndarray
    phi_e: float
    grad_norm: float
    inner_iters: int
    events: tuple = ()


@dataclass
class ScenarioTrace:
    labels: tuple               # bus numbers of the DSOs
    gamma: float
    v_lo: float
    v_hi: float
    mode: str = "feedback"
    rows: list = field(default_factory=list)
    v_open_loop: np.ndarray | None = None   # voltages with all DSOs at zero
    converged: bool = False
    stop_reason: str = ""
    final_state: "CodesignState | None" = None

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def summary(self) -> dict:
        last = self.rows[-1] if self.rows else None
        doc = {
            "dso_buses": list(self.labels), "gamma": self.gamma, "mode": self.mode,
            "bounds": [self.v_lo, self.v_hi], "outer_iterations": len(self.rows),
            "converged": self.converged, "stop_reason": self.stop_reason,
            "v_open_loop": None if self.v_open_loop is None else self.v_open_loop.tolist(),
            "events": [{"k": r.k, "events": list(r.events)} for r in self.rows if r.events],
        }
        if last is not None:
            v0 = self.rows[0].v
            doc.update({
                "initial_voltage": v0.tolist(),
                "initial_buses_below_bound": int(np.sum(v0 < self.v_lo)),
                "final_v_ref": last.v_ref.tolist(), "final_voltage": last.v.tolist(),
                "final_xi": last.xi.tolist(), "final_payments": last.payments.tolist(),
                "final_phi_e": last.phi_e, "final_grad_norm": last.grad_norm,
                "final_in_bounds": bool(np.all((last.v >= self.v_lo) & (last.v <= self.v_hi))),
            })
        return doc


@dataclass(frozen=True)
class CodesignState:
    """Everything needed to resume the loop: incentive, DSO state and boxes."""
    v_ref: np.ndarray
    iterate: GameIterate
    profiles: tuple
    outer_iter: int = 0


@dataclass(frozen=True)
class GameModel:
    """Linear model restricted to the DSO buses, with the fixed loads folded in."""
    sens: LinearSensitivities     # over DSO buses; q means controllable demand only
    p: np.ndarray                 # active demand at DSO buses
    positions: np.ndarray         # DSO positions inside the non-slack vectors
    full: LinearSensitivities     # all non-slack buses, at the base point


def build_game_model(cfg: ScenarioConfig) -> GameModel:
    p = np.array(cfg.p)
    q = np.array(cfg.q_fixed)
    try:
        full = linearize(cfg.grid, p, q)
    except PowerFlowError as exc:
        raise ValidationError("loads", f"grid not solvable at the base load: {exc}") from exc
    pos = np.array([cfg.grid.pq_position(b) for b in cfg.dso_buses])
    sens = full.restrict(pos, p, q).shift(q[pos])
    return GameModel(sens=sens, p=p[pos], positions=pos, full=full)


def linear_problem(cfg: ScenarioConfig, model: GameModel | None = None) -> LinearProblem:
    model = model or build_game_model(cfg)
    lo, hi = cfg.penalty_band
    return LinearProblem(cfg.profiles, model.sens, model.p, cfg.gamma, cfg.rho, lo, hi)


class _Plant:
    """AC power flow measured at the DSO buses; warm-starts from the last solution."""

    def __init__(self, cfg: ScenarioConfig, positions):
        self.grid = cfg.grid
        self.p = np.array(cfg.p)
        self.q = np.array(cfg.q_fixed)
        self.pos = positions
        self.last = None

    def __call__(self, xi):
        q = self.q.copy()
        q[self.pos] += xi
        try:
            sol = solve_ac_power_flow(self.grid, self.p, q, init=self.last)
        except PowerFlowError as exc:
            raise PlantInfeasible(f"AC power flow failed at xi={np.round(xi, 4)}: {exc}") from exc
        self.last = sol
        return sol.v[self.pos]


def make_measure(cfg: ScenarioConfig, model: GameModel) -> Callable[[np.ndarray], np.ndarray]:
    if cfg.mode == "feedback":
        return _Plant(cfg, model.positions)
    return linear_measure(model.sens, model.p)


def run_codesign(cfg: ScenarioConfig, *, n_jobs: int = 1, max_outer: int | None = None,
                 start: CodesignState | None = None, allow_ill_conditioned: bool = False,
                 model: GameModel | None = None,
                 callback: Callable[[TraceRow], None] | None = None) -> ScenarioTrace:
    """Run the incentive co-design loop and return the per-iteration trace.

    Each outer iteration applies due disturbances, runs the warm-started inner
    loop, takes the voltages measured at its final demands as ``v^k``, forms
    the hypergradient and moves ``v_ref``. Stops after ``max_outer``
    iterations (default: from the scenario) or when the hypergradient norm
    drops to ``cfg.grad_tol`` with no disturbance still scheduled.
    """
    model = model or build_game_model(cfg)
    profiles = tuple(cfg.profiles)
    n = len(profiles)
    cond = check_conditioning(profiles, model.sens, cfg.gamma, cfg.eta)
    if cond.violated and not allow_ill_conditioned:
        raise ValidationError(
            "incentive.gamma",
            f"monotonicity not guaranteed (mu = {cond.mu:.3g}); lower gamma below "
            f"{cond.gamma_max:.3g} or pass allow_ill_conditioned")
    measure = make_measure(cfg, model)
    pen_lo, pen_hi = cfg.penalty_band

    if start is None:
        state = IncentiveState(np.array(cfg.v_ref_init), cfg.gamma, cfg.rho, pen_lo, pen_hi,
                               cfg.epsilon, cfg.sigma)
        iterate = GameIterate.cold(n)
    else:
        profiles = tuple(start.profiles)
        state = IncentiveState(check_vector(start.v_ref, n, "v_ref"), cfg.gamma, cfg.rho,
                               pen_lo, pen_hi, cfg.epsilon, cfg.sigma, start.outer_iter)
        iterate = start.iterate

    trace = ScenarioTrace(labels=cfg.dso_buses, gamma=cfg.gamma, v_lo=cfg.v_lo,
                          v_hi=cfg.v_hi, mode=cfg.mode)
    try:
        trace.v_open_loop = measure(np.zeros(n))
    except PlantInfeasible as exc:
        exc.trace = trace
        raise

    budget = cfg.max_outer if max_outer is None else max_outer
    first = state.outer_iter
    trace.stop_reason = "iteration budget"
    for k in range(first, first + budget):
        events = []
        for d in cfg.disturbances:
            if d.at_outer_iter == k:
                profiles = apply_disturbance(profiles, d)
                iterate = replace(iterate, xi=clamp_to_profiles(iterate.xi, profiles))
                events.append(d.describe())
                log.info("outer %d: disturbance %s", k, d.describe())

        try:
            iterate = run_inner_loop(profiles, iterate, state.v_ref, cfg.gamma, cfg.eta,
                                     state.sigma, measure, model.sens,
                                     max_iter=cfg.max_inner, n_jobs=n_jobs)
        except InnerLoopStall as exc:
            raise InnerLoopStall(f"outer iteration {k}: {exc}", exc.residual,
                                 exc.iterations, trace) from exc
        except PlantInfeasible as exc:
            raise PlantInfeasible(f"outer iteration {k}: {exc}", trace) from exc

        # the inner loop's last measurement is the plant voltage at xi^k
        v = iterate.v_meas
        report = hypergradient(state.v_ref, v, iterate.xi, iterate.s, model.sens.X,
                               cfg.gamma, cfg.rho, pen_lo, pen_hi)
        row = TraceRow(k=k, v_ref=state.v_ref.copy(), v=v.copy(), xi=iterate.xi.copy(),
                       payments=incentive_payment(iterate.xi, v, state.v_ref, cfg.gamma),
                       phi_e=report.objective, grad_norm=report.norm,
                       inner_iters=iterate.inner_iter, events=tuple(events))
        trace.rows.append(row)
        if callback is not None:
            callback(row)
        pending = any(d.at_outer_iter > k for d in cfg.disturbances)
        if report.norm <= cfg.grad_tol and not pending:
            trace.converged = True
            trace.stop_reason = "gradient tolerance"
            break
        state = update_incentive(state, report)

    trace.final_state = CodesignState(state.v_ref.copy(), iterate, profiles, state.outer_iter)
    return trace


class IncentiveCodesign(BaseEstimator):
    """Estimator facade over :func:`run_codesign`.

    ``fit`` takes a scenario (path or :class:`ScenarioConfig`) and runs the
    loop; the learned incentive is ``v_ref_`` and the full record ``trace_``.
    """

    def __init__(self, n_jobs=1, max_outer=None, mode=None):
        self.n_jobs = n_jobs
        self.max_outer = max_outer
        self.mode = mode

    def fit(self, scenario, y=None):
        cfg = scenario if isinstance(scenario, ScenarioConfig) else load_scenario(Path(scenario))
        if self.mode is not None:
            cfg = replace(cfg, mode=self.mode)
        self.config_ = cfg
        self.trace_ = run_codesign(cfg, n_jobs=self.n_jobs, max_outer=self.max_outer)
        last = self.trace_.rows[-1]
        self.v_ref_ = self.trace_.final_state.v_ref
        self.xi_ = last.xi
        self.voltage_ = last.v
        self.sensitivity_ = self.trace_.final_state.iterate.s
        self.n_iter_ = len(self.trace_)
        self.converged_ = self.trace_.converged
        return self

    def payments(self):
        check_is_fitted(self, "trace_")
        return self.trace_.rows[-1].payments
