"""Lower-level game between DSOs: payoffs, projected pseudo-gradient play and
equilibrium-sensitivity learning.

Each DSO ``i`` minimizes ``0.5 * C_i * xi_i**2 - gamma * (v_i - v_ref_i) * xi_i``
over its reactive-power box. The voltage ``v_i`` is either measured on the
plant (feedback mode) or taken from the linear model (analysis mode); the
self-sensitivity ``dv_i/dxi_i`` is always the linearized ``X_ii``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_vector
from .exceptions import InnerLoopStall
from .grid import LinearSensitivities, linearized_voltage

MAX_INNER_ITER = 10_000


@dataclass(frozen=True)
class DsoProfile:
    bus: int            # 1-based bus number in the network file
    cost_coeff: float   # C_i, currency per p.u.^2
    q_min: float
    q_max: float

    def __post_init__(self):
        if not self.cost_coeff > 0:
            raise ValueError(f"DSO at bus {self.bus}: cost coefficient must be positive")
        if not self.q_min <= self.q_max:
            raise ValueError(f"DSO at bus {self.bus}: q_min > q_max")

    def clip(self, x: float) -> float:
        return min(max(x, self.q_min), self.q_max)


@dataclass(frozen=True)
class GameIterate:
    xi: np.ndarray       # reactive demands, p.u.
    s: np.ndarray        # row i = d xi_i / d v_ref
    v_meas: np.ndarray   # voltages measured at ``xi``
    inner_iter: int = 0

    @classmethod
    def cold(cls, n: int, xi=None) -> "GameIterate":
        xi = np.zeros(n) if xi is None else np.array(xi, dtype=float)
        return cls(xi, np.zeros((n, n)), np.full(n, np.nan), 0)


@dataclass(frozen=True)
class GameConditioning:
    mu: float
    L_F: float
    theta: float
    gamma_max: float
    eta: float | None = None
    gamma: float = 0.0

    @property
    def violated(self) -> bool:
        # gamma_max is only sufficient for mixed costs; the gate stays conservative
        return not self.mu > 0 or self.gamma > self.gamma_max

    @property
    def eta_max(self) -> float:
        """Largest step for which the projected iteration is a contraction."""
        return 2 * self.mu / self.L_F**2 if self.mu > 0 else 0.0


def profile_arrays(profiles: Sequence[DsoProfile]):
    C = np.array([pr.cost_coeff for pr in profiles], dtype=float)
    lo = np.array([pr.q_min for pr in profiles], dtype=float)
    hi = np.array([pr.q_max for pr in profiles], dtype=float)
    return C, lo, hi


def game_jacobian(profiles, sens: LinearSensitivities, gamma: float) -> np.ndarray:
    """``C - gamma * X_tilde``, the (constant) Jacobian of the pseudo-gradient."""
    C, _, _ = profile_arrays(profiles)
    return np.diag(C) - gamma * sens.X_tilde


def incentive_payment(q_i, v_i, v_ref_i, gamma):
    """TSO payment to a DSO; works elementwise on arrays."""
    return gamma * (v_i - v_ref_i) * q_i


def pseudo_gradient_i(profile: DsoProfile, xi_i, v_i_measured, v_ref_i, gamma, dv_dxi) -> float:
    return (profile.cost_coeff * xi_i - gamma * (v_i_measured - v_ref_i)
            - gamma * xi_i * dv_dxi)


def projection_derivative(x, q_min, q_max) -> int:
    """Derivative of the box projection; the closed box counts as inside."""
    return 1 if q_min <= x <= q_max else 0


# --------------------------------------------------------------------------- #
# Per-DSO kernels. Serial and threaded runs both go through these, so results
# do not depend on the degree of parallelism.
# --------------------------------------------------------------------------- #

class _Kernel:
    def __init__(self, profiles, sens, v_ref, gamma, eta):
        C, lo, hi = profile_arrays(profiles)
        # plain floats: scalar arithmetic on numpy scalars dominates otherwise
        self.C, self.lo, self.hi = C.tolist(), lo.tolist(), hi.tolist()
        self.Xd = np.diag(sens.X).tolist()
        self.J = game_jacobian(profiles, sens, gamma)
        self.v_ref = check_vector(v_ref, len(profiles), "v_ref").tolist()
        self.gamma = float(gamma)
        self.eta = float(eta)
        self.n = len(profiles)

    def pre_projection(self, i, xi_i, v_i):
        F = (self.C[i] * xi_i - self.gamma * (v_i - self.v_ref[i])
             - self.gamma * xi_i * self.Xd[i])
        return xi_i - self.eta * F

    def xi_update(self, i, xi, v):
        z = self.pre_projection(i, xi[i], v[i])
        return min(max(z, self.lo[i]), self.hi[i])

    def s_row(self, i, xi, v, s):
        z = self.pre_projection(i, xi[i], v[i])
        if not self.lo[i] <= z <= self.hi[i]:
            return np.zeros(self.n)
        row = s[i] - self.eta * (self.J[i] @ s)
        row[i] -= self.eta * self.gamma
        return row


def _map(fn, n, pool):
    if pool is None:
        return [fn(i) for i in range(n)]
    return list(pool.map(fn, range(n)))


def _inner_step(kernel, it: GameIterate) -> GameIterate:
    xi, v = it.xi.tolist(), it.v_meas.tolist()
    xi_new = np.array([kernel.xi_update(i, xi, v) for i in range(kernel.n)])
    return replace(it, xi=xi_new, inner_iter=it.inner_iter + 1)


def _sensitivity_step(kernel, it: GameIterate) -> GameIterate:
    xi, v = it.xi.tolist(), it.v_meas.tolist()
    rows = [kernel.s_row(i, xi, v, it.s) for i in range(kernel.n)]
    return replace(it, s=np.array(rows))


def inner_step(profiles, iterate: GameIterate, v_ref, gamma, eta, sens) -> GameIterate:
    """One synchronous projected pseudo-gradient step for all DSOs.

    Uses ``iterate.v_meas`` as the voltages at ``iterate.xi``; ``s`` is left alone.
    """
    return _inner_step(_Kernel(profiles, sens, v_ref, gamma, eta), iterate)


def sensitivity_step(profiles, iterate: GameIterate, v_ref, gamma, eta, sens) -> GameIterate:
    """Sensitivity recursion ``s <- J2h s + J1h`` with Jacobians taken at ``iterate.xi``.

    Call after :func:`inner_step`, with ``iterate.v_meas`` refreshed for the new
    ``xi``; ``iterate.s`` still holds the previous estimate.
    """
    return _sensitivity_step(_Kernel(profiles, sens, v_ref, gamma, eta), iterate)


def linear_measure(sens: LinearSensitivities, p) -> Callable[[np.ndarray], np.ndarray]:
    """Voltage source for analysis mode: the linear model in place of the plant."""
    p = check_vector(p, sens.n, "p")
    base = sens.R @ p + sens.v0
    return lambda xi: base + sens.X @ xi


def run_inner_loop(profiles, iterate: GameIterate, v_ref, gamma, eta, sigma,
                   measure: Callable[[np.ndarray], np.ndarray], sens: LinearSensitivities,
                   *, max_iter: int = MAX_INNER_ITER, n_jobs: int = 1,
                   callback: Callable[[GameIterate], None] | None = None) -> GameIterate:
    """Distributed equilibrium and sensitivity estimation, warm-started from ``iterate``.

    Each pass measures the voltages at the new reactive demands, so one plant
    measurement serves both the Jacobians of the sensitivity update and the
    next equilibrium-seeking step. Stops when both the demand step (Euclidean)
    and the sensitivity step (Frobenius) are at most ``sigma``.

    Raises :class:`InnerLoopStall` after ``max_iter`` passes.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not eta > 0:
        raise ValueError("eta must be positive")
    kernel = _Kernel(profiles, sens, v_ref, gamma, eta)
    xi0 = check_vector(iterate.xi, kernel.n, "xi")
    it = GameIterate(xi0, np.array(iterate.s, dtype=float), measure(xi0), 0)

    pool = ThreadPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None
    try:
        residual = math.inf
        xi, s, v = it.xi, it.s, it.v_meas
        n = kernel.n
        for count in range(1, max_iter + 1):
            xl, vl = xi.tolist(), v.tolist()
            xi_new = np.array(_map(lambda i: kernel.xi_update(i, xl, vl), n, pool))
            v = measure(xi_new)
            xl, vl = xi_new.tolist(), v.tolist()
            s_new = np.array(_map(lambda i: kernel.s_row(i, xl, vl, s), n, pool))
            dxi = xi_new - xi
            ds = s_new - s
            residual = max(math.sqrt(dxi @ dxi), math.sqrt(np.sum(ds * ds)))
            xi, s = xi_new, s_new
            if callback is not None:
                callback(GameIterate(xi, s, v, count))
            if residual <= sigma:
                return GameIterate(xi, s, v, count)
    finally:
        if pool is not None:
            pool.shutdown()
    raise InnerLoopStall(
        f"inner loop did not reach tolerance {sigma:.1e} in {max_iter} iterations "
        f"(residual {residual:.3e}); step size too large or game ill-conditioned",
        residual=residual, iterations=max_iter)


def check_conditioning(profiles, sens: LinearSensitivities, gamma, eta=None) -> GameConditioning:
    """Strong-monotonicity and Lipschitz constants of the pseudo-gradient.

    ``theta`` is NaN when no step size is given or the step is outside the
    contraction range; ``gamma_max`` is infinite when ``X_tilde`` is negative
    definite.
    """
    J = game_jacobian(profiles, sens, gamma)
    eig = np.linalg.eigvalsh(0.5 * (J + J.T))
    mu = float(eig[0])
    L_F = float(np.linalg.norm(J, 2))
    theta = math.nan
    if eta is not None and mu > 0 and eta < 2 * mu / L_F**2:
        theta = math.sqrt(1 - eta * (2 * mu - eta * L_F**2))
    lam_max = float(np.linalg.eigvalsh(sens.X_tilde)[-1])
    c_min = min(pr.cost_coeff for pr in profiles)
    gamma_max = c_min / lam_max if lam_max > 0 else math.inf
    return GameConditioning(mu=mu, L_F=L_F, theta=theta, gamma_max=gamma_max, eta=eta,
                            gamma=float(gamma))


class NashEquilibriumSeeker(BaseEstimator):
    """Estimator wrapper around :func:`run_inner_loop`.

    ``fit`` binds the game (DSO profiles plus linear grid model); ``predict``
    maps an incentive vector ``v_ref`` to the equilibrium reactive demands and
    stores the learned sensitivity in ``sensitivity_``.
    """

    def __init__(self, gamma=1.0, eta=1e-3, sigma=1e-8, max_iter=MAX_INNER_ITER,
                 n_jobs=1, warm_start=False):
        self.gamma = gamma
        self.eta = eta
        self.sigma = sigma
        self.max_iter = max_iter
        self.n_jobs = n_jobs
        self.warm_start = warm_start

    def fit(self, profiles, sens: LinearSensitivities, p=None, measure=None):
        self.profiles_ = tuple(profiles)
        if len(self.profiles_) != sens.n:
            raise ValueError(f"{len(self.profiles_)} DSOs but a {sens.n}-bus linear model")
        self.sens_ = sens
        self.p_ = np.zeros(sens.n) if p is None else check_vector(p, sens.n, "p")
        self.measure_ = measure or linear_measure(sens, self.p_)
        self.conditioning_ = check_conditioning(self.profiles_, sens, self.gamma, self.eta)
        self.n_features_in_ = sens.n
        self.iterate_ = GameIterate.cold(sens.n)
        return self

    def predict(self, v_ref):
        check_is_fitted(self, "sens_")
        v_ref = check_vector(v_ref, self.n_features_in_, "v_ref")
        start = self.iterate_ if self.warm_start else GameIterate.cold(self.n_features_in_)
        self.iterate_ = run_inner_loop(self.profiles_, start, v_ref, self.gamma, self.eta,
                                       self.sigma, self.measure_, self.sens_,
                                       max_iter=self.max_iter, n_jobs=self.n_jobs)
        self.sensitivity_ = self.iterate_.s
        self.n_iter_ = self.iterate_.inner_iter
        return self.iterate_.xi.copy()

    def payments(self, v_ref):
        """Payments at the last predicted equilibrium."""
        check_is_fitted(self, "iterate_")
        return incentive_payment(self.iterate_.xi, self.iterate_.v_meas,
                                 check_vector(v_ref, self.n_features_in_, "v_ref"), self.gamma)
