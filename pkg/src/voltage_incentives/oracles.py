"""Reference solutions under the linear grid model.

Nothing here calls the iterative solvers in :mod:`dso` or the hypergradient
in :mod:`tso`; equilibria come from dense linear algebra and exact
coordinate-wise best responses, derivatives from central differences.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ._validation import check_vector
from .exceptions import OracleNoConvergence
from .grid import LinearSensitivities

KKT_TOL = 1e-10


@dataclass(frozen=True)
class LinearProblem:
    """Everything the oracles need to evaluate the leader objective in analysis mode."""
    profiles: tuple
    sens: LinearSensitivities
    p: np.ndarray
    gamma: float
    rho: float
    v_lo: float
    v_hi: float


@dataclass(frozen=True)
class OracleReport:
    quantity: str
    algorithm_value: float
    oracle_value: float
    abs_error: float
    rel_error: float
    tol: float
    passed: bool

    @classmethod
    def compare(cls, quantity, algorithm, oracle, tol, *, relative=False,
                floor=np.finfo(float).eps) -> "OracleReport":
        """Worst-case componentwise comparison; ``tol`` applies to the abs or rel error.

        Relative errors divide by ``max(|oracle_i|, floor)``.
        """
        a = np.atleast_1d(np.asarray(algorithm, dtype=float)).ravel()
        o = np.atleast_1d(np.asarray(oracle, dtype=float)).ravel()
        diff = np.abs(a - o)
        rel = diff / np.maximum(np.abs(o), floor)
        worst = rel if relative else diff
        k = int(np.argmax(worst)) if diff.size else 0
        abs_err = float(diff.max()) if diff.size else 0.0
        rel_err = float(rel.max()) if diff.size else 0.0
        err = rel_err if relative else abs_err
        return cls(quantity, float(a[k]) if a.size else 0.0, float(o[k]) if o.size else 0.0,
                   abs_err, rel_err, float(tol), bool(err <= tol))

    def to_line(self) -> str:
        """One JSON record; non-finite numbers become null."""
        doc = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
               for k, v in asdict(self).items()}
        return json.dumps(doc, sort_keys=True)


def _arrays(profiles):
    C = np.array([pr.cost_coeff for pr in profiles], dtype=float)
    lo = np.array([pr.q_min for pr in profiles], dtype=float)
    hi = np.array([pr.q_max for pr in profiles], dtype=float)
    return C, lo, hi


def _system(profiles, sens, gamma, v_ref, p):
    """``M q = b`` stationarity system of the unconstrained game."""
    C, _, _ = _arrays(profiles)
    X = np.asarray(sens.X)
    M = np.diag(C) - gamma * (X + np.diag(np.diag(X)))
    b = gamma * (sens.v0 + np.asarray(sens.R) @ p - v_ref)
    return M, b


def _best_response(i, q, C, lo, hi, X, gamma, base):
    K = base[i] + X[i] @ q - X[i, i] * q[i]
    return min(max(gamma * K / (C[i] - 2 * gamma * X[i, i]), lo[i]), hi[i])


def closed_form_ne(profiles, sens: LinearSensitivities, gamma, v_ref, p, *,
                   max_sweeps: int = 200_000, tol: float = 1e-15) -> np.ndarray:
    """Nash equilibrium of the linear-model game.

    Solves the unconstrained stationarity system directly; if that point leaves
    a box, runs cyclic exact best-response sweeps from its clipped version.
    Raises :class:`OracleNoConvergence` if the sweep or the KKT check fails.
    """
    n = len(profiles)
    v_ref = check_vector(v_ref, n, "v_ref")
    p = check_vector(p, n, "p")
    C, lo, hi = _arrays(profiles)
    M, b = _system(profiles, sens, gamma, v_ref, p)
    q = np.linalg.solve(M, b)
    if np.all((q >= lo) & (q <= hi)):
        return q

    X = np.asarray(sens.X)
    base = sens.v0 + np.asarray(sens.R) @ p - v_ref
    q = np.clip(q, lo, hi)
    scale = max(1.0, float(np.max(np.abs(q))))
    for _ in range(max_sweeps):
        moved = 0.0
        for i in range(n):
            new = _best_response(i, q, C, lo, hi, X, gamma, base)
            moved = max(moved, abs(new - q[i]))
            q[i] = new
        if moved <= tol * scale:
            break
    else:
        raise OracleNoConvergence(
            f"best-response sweep did not settle in {max_sweeps} sweeps; "
            "check that C - gamma*X_tilde is positive definite")
    res = kkt_residual(q, profiles, sens, gamma, v_ref, p)
    if res > KKT_TOL:
        raise OracleNoConvergence(f"KKT residual {res:.2e} exceeds {KKT_TOL:.0e}")
    return q


def game_residual(q, profiles, sens, gamma, v_ref, p) -> np.ndarray:
    """Pseudo-gradient ``M q - b`` under the linear model."""
    M, b = _system(profiles, sens, gamma, np.asarray(v_ref, float), np.asarray(p, float))
    return M @ np.asarray(q, float) - b


def kkt_multipliers(q, profiles, sens, gamma, v_ref, p) -> np.ndarray:
    """Bound multipliers of each DSO's scalar problem (0 for free coordinates).

    Non-negative entries at active bounds certify optimality there.
    """
    _, lo, hi = _arrays(profiles)
    F = game_residual(q, profiles, sens, gamma, v_ref, p)
    lam = np.zeros_like(F)
    at_hi = np.asarray(q) >= hi
    at_lo = np.asarray(q) <= lo
    lam[at_hi] = -F[at_hi]
    lam[at_lo & ~at_hi] = F[at_lo & ~at_hi]
    return lam


def kkt_residual(q, profiles, sens, gamma, v_ref, p) -> float:
    """Natural residual ``||q - clip(q - F(q))||_inf``."""
    _, lo, hi = _arrays(profiles)
    q = np.asarray(q, float)
    F = game_residual(q, profiles, sens, gamma, v_ref, p)
    return float(np.max(np.abs(q - np.clip(q - F, lo, hi))))


def equilibrium_sensitivity(profiles, sens, gamma, q_star, *, atol=1e-12) -> np.ndarray:
    """Jacobian of the equilibrium w.r.t. ``v_ref`` for a fixed active set.

    Coordinates at a bound get a zero row; the free block is
    ``-gamma * inv(M_FF)``.
    """
    C, lo, hi = _arrays(profiles)
    q_star = np.asarray(q_star, float)
    free = (q_star > lo + atol) & (q_star < hi - atol)
    X = np.asarray(sens.X)
    M = np.diag(C) - gamma * (X + np.diag(np.diag(X)))
    n = len(profiles)
    S = np.zeros((n, n))
    if free.any():
        f = np.flatnonzero(free)
        S[np.ix_(f, f)] = -gamma * np.linalg.inv(M[np.ix_(f, f)])
    return S


def _phi_e(problem: LinearProblem, v_ref) -> float:
    q = closed_form_ne(problem.profiles, problem.sens, problem.gamma, v_ref, problem.p)
    v = problem.sens.R @ problem.p + problem.sens.X @ q + problem.sens.v0
    pay = problem.gamma * (v - v_ref) * q
    over = np.maximum(0.0, v - problem.v_hi)
    under = np.maximum(0.0, problem.v_lo - v)
    return float(pay.sum() + problem.rho * (over @ over + under @ under))


def leader_objective(problem: LinearProblem, v_ref) -> float:
    """Leader objective evaluated at the exact follower equilibrium."""
    return _phi_e(problem, check_vector(v_ref, len(problem.profiles), "v_ref"))


def fd_hypergradient(problem: LinearProblem, v_ref, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the leader objective at the exact equilibrium."""
    if not h > 0:
        raise ValueError("h must be positive")
    v_ref = check_vector(v_ref, len(problem.profiles), "v_ref")
    g = np.empty_like(v_ref)
    for i in range(v_ref.size):
        e = np.zeros_like(v_ref)
        e[i] = h
        g[i] = (_phi_e(problem, v_ref + e) - _phi_e(problem, v_ref - e)) / (2 * h)
    return g


def verify_ne(q_candidate, profiles, sens: LinearSensitivities, gamma, v_ref, p,
              tol: float = 1e-6) -> OracleReport:
    """Compare each coordinate with its exact best response to the others."""
    n = len(profiles)
    q = check_vector(q_candidate, n, "q_candidate")
    v_ref = check_vector(v_ref, n, "v_ref")
    p = check_vector(p, n, "p")
    C, lo, hi = _arrays(profiles)
    X = np.asarray(sens.X)
    base = sens.v0 + np.asarray(sens.R) @ p - v_ref
    br = np.array([_best_response(i, q, C, lo, hi, X, gamma, base) for i in range(n)])
    return OracleReport.compare("best_response_deviation", q, br, tol)


def random_instance(rng: np.random.Generator, n: int, *, gamma: float = 1.0,
                    limits: float | None = None, cost_range=(0.2, 0.8)):
    """Random small game with a negative-diagonal symmetric ``X`` and ``mu > 0``.

    Returns ``(profiles, sens, p)``; used by the agreement suite.
    """
    from .dso import DsoProfile

    C = rng.uniform(*cost_range, n)
    A = rng.normal(scale=0.03, size=(n, n))
    X = 0.5 * (A + A.T)
    np.fill_diagonal(X, -rng.uniform(0.05, 0.15, n))
    # keep C - gamma*X_tilde comfortably positive definite
    Xt = X + np.diag(np.diag(X))
    lam = float(np.linalg.eigvalsh(Xt)[-1])
    if lam > 0 and gamma * lam >= 0.5 * C.min():
        X *= 0.5 * C.min() / (gamma * lam)
    R = 0.3 * X + 0.01 * rng.normal(size=(n, n))
    v0 = 1.0 + 0.02 * rng.normal(size=n)
    p = rng.normal(scale=0.5, size=n)
    lim = math.inf if limits is None else limits
    profiles = tuple(DsoProfile(bus=i + 1, cost_coeff=float(C[i]), q_min=-lim, q_max=lim)
                     for i in range(n))
    return profiles, LinearSensitivities(R, X, v0), p


def reports_pass(reports: Sequence[OracleReport]) -> bool:
    return all(r.passed for r in reports)
