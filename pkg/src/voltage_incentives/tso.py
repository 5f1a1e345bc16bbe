"""Upper level: voltage penalty, augmented objective, approximate hypergradient
and the incentive update of the TSO."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_square, check_vector

SCHEDULE_KINDS = ("constant", "geometric", "harmonic")


@dataclass(frozen=True)
class Schedule:
    """Positive step or tolerance sequence indexed by the outer iteration.

    constant:  value
    geometric: max(value * ratio**k, floor)
    harmonic:  value / (1 + k / scale)
    """
    kind: str = "constant"
    value: float = 1e-4
    ratio: float = 0.9
    floor: float = 0.0
    scale: float = 500.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.value > 0:
            raise ValueError("schedule value must be positive")
        if self.kind == "geometric":
            if not 0 < self.ratio <= 1:
                raise ValueError("geometric ratio must be in (0, 1]")
            if self.floor < 0:
                raise ValueError("geometric floor must be non-negative")
            if self.ratio < 1 and self.floor == 0:
                raise ValueError("geometric schedule needs a positive floor to stay positive")
        if self.kind == "harmonic" and not self.scale > 0:
            raise ValueError("harmonic scale must be positive")

    def __call__(self, k: int) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "geometric":
            return max(self.value * self.ratio**k, self.floor)
        return self.value / (1 + k / self.scale)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "geometric":
            return {"kind": "geometric", "initial": self.value, "ratio": self.ratio,
                    "floor": self.floor}
        return {"kind": "harmonic", "initial": self.value, "scale": self.scale}

    @classmethod
    def from_dict(cls, doc: dict) -> "Schedule":
        doc = dict(doc)
        kind = doc.pop("kind", "constant")
        value = doc.pop("value", doc.pop("initial", None))
        if value is None:
            raise ValueError("schedule needs 'value' (constant) or 'initial'")
        allowed = {"constant": set(), "geometric": {"ratio", "floor"},
                   "harmonic": {"scale"}}.get(kind, set())
        extra = set(doc) - allowed
        if extra:
            raise ValueError(f"unexpected keys for {kind} schedule: {sorted(extra)}")
        return cls(kind=kind, value=float(value), **{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class IncentiveState:
    v_ref: np.ndarray
    gamma: float
    rho: float
    v_lo: float
    v_hi: float
    epsilon_schedule: Schedule = field(default_factory=Schedule)
    sigma_schedule: Schedule = field(
        default_factory=lambda: Schedule("geometric", 1e-3, 0.9, 1e-8))
    outer_iter: int = 0

    def __post_init__(self):
        object.__setattr__(self, "v_ref", check_vector(self.v_ref, name="v_ref"))
        if not self.v_lo < self.v_hi:
            raise ValueError("v_lo must be below v_hi")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @property
    def epsilon(self) -> float:
        return self.epsilon_schedule(self.outer_iter)

    @property
    def sigma(self) -> float:
        return self.sigma_schedule(self.outer_iter)


@dataclass(frozen=True)
class HypergradientReport:
    grad: np.ndarray
    term_direct: np.ndarray
    term_voltage: np.ndarray
    term_equilibrium: np.ndarray
    objective: float

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def penalty(v, v_lo, v_hi, rho) -> float:
    v = np.asarray(v, dtype=float)
    over = np.maximum(0.0, v - v_hi)
    under = np.maximum(0.0, v_lo - v)
    return float(rho * np.sum(over**2) + rho * np.sum(under**2))


def penalty_gradient(v, v_lo, v_hi, rho) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return 2 * rho * np.maximum(0.0, v - v_hi) - 2 * rho * np.maximum(0.0, v_lo - v)


def augmented_objective(v_ref, v, q, gamma, rho, v_lo, v_hi) -> float:
    """Total incentive payments plus the voltage penalty."""
    v = np.asarray(v, dtype=float)
    payments = gamma * (v - np.asarray(v_ref, dtype=float)) * np.asarray(q, dtype=float)
    return float(np.sum(payments)) + penalty(v, v_lo, v_hi, rho)


def hypergradient(v_ref, v_meas, xi, s, X, gamma, rho, v_lo, v_hi) -> HypergradientReport:
    """Approximate gradient of the leader objective through the follower equilibrium.

    The voltage Jacobian with respect to reactive demand is taken as ``X``;
    ``s`` is the inner loop's sensitivity estimate.
    """
    xi = check_vector(xi, name="xi")
    n = xi.size
    v_ref = check_vector(v_ref, n, "v_ref")
    v_meas = check_vector(v_meas, n, "v_meas")
    s = check_square(s, n, "s")
    X = check_square(X, n, "X")

    d1 = -gamma * xi
    d2 = gamma * xi + penalty_gradient(v_meas, v_lo, v_hi, rho)
    d3 = gamma * (v_meas - v_ref)
    term_direct = d1
    term_voltage = (X @ s).T @ d2
    term_equilibrium = s.T @ d3
    grad = term_direct + term_voltage + term_equilibrium
    return HypergradientReport(grad, term_direct, term_voltage, term_equilibrium,
                               augmented_objective(v_ref, v_meas, xi, gamma, rho, v_lo, v_hi))


def update_incentive(state: IncentiveState, report: HypergradientReport) -> IncentiveState:
    eps = state.epsilon
    if not eps > 0:
        raise ValueError(f"step size at outer iteration {state.outer_iter} is not positive")
    return replace(state, v_ref=state.v_ref - eps * report.grad, outer_iter=state.outer_iter + 1)
