"""Transmission network model, Newton-Raphson AC power flow and its linearization.

Sign convention throughout: ``p`` and ``q`` are *demands* at the non-slack
buses, so a positive reactive demand depresses the local voltage and the
diagonal of the reactive sensitivity matrix is negative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml

from ._validation import check_vector
from .exceptions import (
    NetworkFormatError,
    NonConvergence,
    SignConventionViolation,
    SingularJacobian,
)

PF_TOL = 1e-8
PF_MAX_ITER = 50
FD_STEP = 1e-4


class Line(NamedTuple):
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float


@dataclass(frozen=True)
class GridModel:
    """Immutable single-voltage-level transmission network.

    Bus indices are 0-based. ``labels`` keeps the 1-based bus numbers used in
    network and scenario files.
    """

    n_bus: int
    slack_bus: int
    lines: tuple[Line, ...]
    base_mva: float = 100.0
    base_kv: float = 230.0
    v_slack: float = 1.0
    labels: tuple[int, ...] = ()
    name: str = ""
    ybus: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_bus < 2:
            raise ValueError("a network needs at least two buses")
        if not 0 <= self.slack_bus < self.n_bus:
            raise ValueError(f"slack bus {self.slack_bus} out of range")
        if self.base_mva <= 0 or self.base_kv <= 0 or self.v_slack <= 0:
            raise ValueError("base quantities and slack voltage must be positive")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(1, self.n_bus + 1)))
        if len(self.labels) != self.n_bus:
            raise ValueError("one label per bus is required")
        lines = tuple(Line(*ln) for ln in self.lines)
        object.__setattr__(self, "lines", lines)
        for ln in lines:
            if not (0 <= ln.from_bus < self.n_bus and 0 <= ln.to_bus < self.n_bus):
                raise ValueError(f"line {ln} references an unknown bus")
            if ln.from_bus == ln.to_bus:
                raise ValueError(f"line {ln} is a self-loop")
            if ln.x <= 0:
                raise ValueError(f"line {ln} must have strictly positive reactance")
        if not self._connected():
            raise ValueError("network topology is not connected")
        ybus = _build_ybus(self.n_bus, lines)
        ybus.flags.writeable = False
        object.__setattr__(self, "ybus", ybus)
        pq = np.array([i for i in range(self.n_bus) if i != self.slack_bus])
        pq.flags.writeable = False
        object.__setattr__(self, "_pq", pq)
        # row/column blocks reused by every Newton iteration
        y_pq = ybus[pq]
        y_pp = y_pq[:, pq].copy()
        y_pq.flags.writeable = False
        y_pp.flags.writeable = False
        object.__setattr__(self, "_y_pq", y_pq)
        object.__setattr__(self, "_y_pp", y_pp)

    def _connected(self) -> bool:
        adj = {i: set() for i in range(self.n_bus)}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        seen, stack = {self.slack_bus}, [self.slack_bus]
        while stack:
            for nb in adj[stack.pop()] - seen:
                seen.add(nb)
                stack.append(nb)
        return len(seen) == self.n_bus

    @property
    def pq_buses(self) -> np.ndarray:
        """0-based indices of the non-slack buses, in the order used by ``p``/``q`` vectors."""
        return self._pq

    @property
    def n_pq(self) -> int:
        return self.n_bus - 1

    def index_of(self, label: int) -> int:
        """0-based index of the bus numbered ``label`` in the network file."""
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"bus {label} does not exist") from None

    def pq_position(self, label: int) -> int:
        """Position of bus ``label`` inside the non-slack vectors."""
        idx = self.index_of(label)
        if idx == self.slack_bus:
            raise KeyError(f"bus {label} is the slack bus")
        return int(np.flatnonzero(self.pq_buses == idx)[0])


def _build_ybus(n: int, lines) -> np.ndarray:
    Y = np.zeros((n, n), dtype=complex)
    for f, t, r, x, b in lines:
        y = 1.0 / complex(r, x)
        Y[f, f] += y + 0.5j * b
        Y[t, t] += y + 0.5j * b
        Y[f, t] -= y
        Y[t, f] -= y
    return Y


def load_network(path) -> GridModel:
    """Read a network file (YAML document with ``buses``, ``lines`` and ``base_mva``)."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc
    return network_from_dict(doc, source=str(path))


def network_from_dict(doc, source="<network>") -> GridModel:
    if not isinstance(doc, dict):
        raise NetworkFormatError(f"{source}: expected a mapping at top level")
    try:
        buses = doc["buses"]
        raw_lines = doc["lines"]
        base_mva = float(doc.get("base_mva", 100.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"{source}: missing or malformed field {exc}") from exc

    try:
        labels = [int(b["index"]) for b in buses]
        kinds = [str(b.get("type", "pq")).lower() for b in buses]
        kvs = {float(b["base_kv"]) for b in buses}
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"{source}: bad bus entry ({exc})") from exc
    if len(set(labels)) != len(labels):
        raise NetworkFormatError(f"{source}: duplicate bus numbers")
    if set(kinds) - {"pq", "slack"}:
        raise NetworkFormatError(f"{source}: bus type must be 'slack' or 'pq'")
    if kinds.count("slack") != 1:
        raise NetworkFormatError(f"{source}: exactly one slack bus is required")
    if len(kvs) != 1:
        raise NetworkFormatError(f"{source}: all buses must share one voltage level")
    slack = kinds.index("slack")
    v_slack = float(buses[slack].get("v_set", 1.0))

    pos = {lab: i for i, lab in enumerate(labels)}
    lines = []
    for k, ln in enumerate(raw_lines):
        try:
            lines.append(Line(pos[int(ln["from"])], pos[int(ln["to"])],
                              float(ln["r"]), float(ln["x"]), float(ln.get("b", 0.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkFormatError(f"{source}: bad line entry #{k + 1} ({exc})") from exc
    try:
        return GridModel(n_bus=len(labels), slack_bus=slack, lines=tuple(lines),
                         base_mva=base_mva, base_kv=kvs.pop(), v_slack=v_slack,
                         labels=tuple(labels), name=str(doc.get("name", "")))
    except ValueError as exc:
        raise NetworkFormatError(f"{source}: {exc}") from exc


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("voltage_incentives") / "data" / name))


def build_five_bus() -> GridModel:
    """The PJM 5-bus network at 230 kV shipped with the package."""
    return load_network(bundled_path("five_bus.network"))


# --------------------------------------------------------------------------- #
# AC power flow
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray       # magnitudes at non-slack buses
    theta: np.ndarray   # angles at non-slack buses, radians
    mismatch: float
    iterations: int


def solve_ac_power_flow(grid: GridModel, p, q, *, tol=PF_TOL, max_iter=PF_MAX_ITER,
                        init: PowerFlowSolution | None = None) -> PowerFlowSolution:
    """Polar Newton-Raphson power flow.

    ``p`` and ``q`` are demands at the non-slack buses. Starts flat unless
    ``init`` supplies a previous solution.
    """
    pq = grid.pq_buses
    m = len(pq)
    p = check_vector(p, m, "p")
    q = check_vector(q, m, "q")
    Y_pq = grid._y_pq
    Y_pp = grid._y_pp
    diag = np.arange(m)
    jac = np.empty((2 * m, 2 * m))

    vm = np.ones(grid.n_bus)
    va = np.zeros(grid.n_bus)
    vm[grid.slack_bus] = grid.v_slack
    if init is not None:
        vm[pq] = init.v
        va[pq] = init.theta
    s_spec = -(p + 1j * q)

    for it in range(max_iter + 1):
        V = vm * np.exp(1j * va)
        Vp = V[pq]
        ip = Y_pq @ V
        mis = Vp * np.conj(ip) - s_spec
        worst = float(np.abs(mis.view(np.float64)).max())   # over real and imaginary parts
        if not np.isfinite(worst):
            raise NonConvergence(f"power flow diverged after {it} iterations")
        if worst <= tol:
            return PowerFlowSolution(vm[pq], va[pq], float(worst), it)
        if it == max_iter:
            break

        vn = Vp / vm[pq]
        d_vm = Vp[:, None] * np.conj(Y_pp * vn[None, :])
        d_vm[diag, diag] += np.conj(ip) * vn
        d_va = -1j * Vp[:, None] * np.conj(Y_pp * Vp[None, :])
        d_va[diag, diag] += 1j * Vp * np.conj(ip)
        jac[:m, :m] = d_va.real
        jac[:m, m:] = d_vm.real
        jac[m:, :m] = d_va.imag
        jac[m:, m:] = d_vm.imag
        rhs = np.concatenate([mis.real, mis.imag])
        try:
            dx = np.linalg.solve(jac, -rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"singular power-flow Jacobian at iteration {it}") from exc
        if not np.isfinite(dx).all():
            raise SingularJacobian(f"ill-conditioned power-flow Jacobian at iteration {it}")
        va[pq] += dx[:m]
        vm[pq] += dx[m:]
        if (vm[pq] <= 0).any():
            raise NonConvergence("voltage magnitude collapsed to zero")
    raise NonConvergence(f"mismatch {worst:.3e} above {tol:.1e} after {max_iter} iterations")


# --------------------------------------------------------------------------- #
# Linearized model
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class LinearSensitivities:
    """Affine voltage model ``v = R p + X q + v0``."""

    R: np.ndarray
    X: np.ndarray
    v0: np.ndarray
    X_tilde: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        X = np.array(self.X, dtype=float)
        v0 = np.array(self.v0, dtype=float).reshape(-1)
        n = v0.shape[0]
        if R.shape != (n, n) or X.shape != (n, n):
            raise ValueError(f"R and X must be {n}x{n}, got {R.shape} and {X.shape}")
        Xt = X + np.diag(np.diag(X))
        for arr in (R, X, v0, Xt):
            arr.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "v0", v0)
        object.__setattr__(self, "X_tilde", Xt)

    @property
    def n(self) -> int:
        return self.v0.shape[0]

    def restrict(self, idx, p_rest=None, q_rest=None) -> "LinearSensitivities":
        """Sub-model over the buses ``idx``.

        Fixed demands at the dropped buses (``p_rest``/``q_rest``, full-length
        vectors whose entries at ``idx`` are ignored) are folded into ``v0``.
        """
        idx = np.asarray(idx)
        rest = np.setdiff1d(np.arange(self.n), idx)
        v0 = self.v0[idx].copy()
        if p_rest is not None:
            v0 += self.R[np.ix_(idx, rest)] @ np.asarray(p_rest, float)[rest]
        if q_rest is not None:
            v0 += self.X[np.ix_(idx, rest)] @ np.asarray(q_rest, float)[rest]
        return LinearSensitivities(self.R[np.ix_(idx, idx)], self.X[np.ix_(idx, idx)], v0)

    def shift(self, q_fixed) -> "LinearSensitivities":
        """Fold a fixed reactive demand into the offset, so ``q`` means the controllable part only."""
        return LinearSensitivities(self.R, self.X, self.v0 + self.X @ np.asarray(q_fixed, float))


def linearize(grid: GridModel, p0, q0, *, step=FD_STEP, tol=PF_TOL,
              symmetrize: bool = True) -> LinearSensitivities:
    """Central finite-difference Jacobians of the AC solution, anchored at ``(p0, q0)``.

    ``X`` is replaced by ``(X + X.T) / 2`` unless ``symmetrize`` is off. On a
    lossy network the raw Jacobian is slightly asymmetric, so only the raw
    map is accurate to second order away from the anchor. Raises
    :class:`SignConventionViolation` when a self-sensitivity is not negative.
    """
    m = grid.n_pq
    p0 = check_vector(p0, m, "p0")
    q0 = check_vector(q0, m, "q0")
    base = solve_ac_power_flow(grid, p0, q0, tol=tol)

    R = np.empty((m, m))
    X = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        plus = solve_ac_power_flow(grid, p0 + e, q0, tol=tol, init=base).v
        minus = solve_ac_power_flow(grid, p0 - e, q0, tol=tol, init=base).v
        R[:, j] = (plus - minus) / (2 * step)
        plus = solve_ac_power_flow(grid, p0, q0 + e, tol=tol, init=base).v
        minus = solve_ac_power_flow(grid, p0, q0 - e, tol=tol, init=base).v
        X[:, j] = (plus - minus) / (2 * step)
    if symmetrize:
        X = 0.5 * (X + X.T)
    if np.any(np.diag(X) >= 0):
        raise SignConventionViolation(
            f"non-negative self-sensitivity X_ii: {np.diag(X)}")
    v0 = base.v - R @ p0 - X @ q0
    return LinearSensitivities(R, X, v0)


def linearized_voltage(sens: LinearSensitivities, p, q) -> np.ndarray:
    p = check_vector(p, sens.n, "p")
    q = check_vector(q, sens.n, "q")
    return sens.R @ p + sens.X @ q + sens.v0
