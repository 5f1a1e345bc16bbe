"""Scenario files (YAML), canonical dumps, and trace persistence.

A scenario names a network file (resolved relative to the scenario), fixed
loads at the non-slack buses, the participating DSOs and the controller
settings. See ``data/five_bus.scenario`` for an annotated example.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import yaml

from .dso import DsoProfile
from .exceptions import NetworkFormatError, ParseError, ValidationError
from .grid import GridModel, bundled_path, load_network
from .tso import Schedule

if TYPE_CHECKING:
    from .codesign import Disturbance, ScenarioTrace

OUT_DIR_ENV = "VOLTAGE_INCENTIVES_OUT"
MODES = ("feedback", "linear-analysis")

_SECTIONS = {"network", "seed", "mode", "loads", "dsos", "incentive", "limits",
             "solver", "disturbances"}


@dataclass(frozen=True)
class ScenarioConfig:
    network: Path
    p: tuple            # active demand per non-slack bus, grid order
    q_fixed: tuple      # uncontrolled reactive demand per non-slack bus
    profiles: tuple     # DsoProfile per participating DSO
    gamma: float
    rho: float
    v_lo: float
    v_hi: float
    eta: float
    epsilon: Schedule
    sigma: Schedule
    v_ref_init: tuple
    max_outer: int
    disturbances: tuple = ()
    mode: str = "feedback"
    seed: int | None = None
    cost_range: tuple | None = None
    margin: float = 0.0         # penalty band is [v_lo + margin, v_hi - margin]
    grad_tol: float = 1e-6
    max_inner: int = 10_000
    grid: GridModel = field(default=None, compare=False, repr=False)
    source: Path | None = field(default=None, compare=False)

    @property
    def n_dso(self) -> int:
        return len(self.profiles)

    @property
    def dso_buses(self) -> tuple:
        return tuple(pr.bus for pr in self.profiles)

    @property
    def penalty_band(self) -> tuple[float, float]:
        return self.v_lo + self.margin, self.v_hi - self.margin


class _Doc:
    """Dict access that reports the dotted field path on failure."""

    def __init__(self, data, path=""):
        if not isinstance(data, dict):
            raise ParseError(f"{path or 'document'}: expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path

    def _name(self, key):
        return f"{self.path}.{key}" if self.path else key

    def has(self, key):
        return key in self.data

    def get(self, key, kind, default=...):
        if key not in self.data:
            if default is ...:
                raise ParseError(f"{self._name(key)}: required field missing")
            return default
        return _convert(self.data[key], kind, self._name(key))

    def section(self, key, required=True):
        if key not in self.data:
            if required:
                raise ParseError(f"{self._name(key)}: required section missing")
            return _Doc({}, self._name(key))
        return _Doc(self.data[key], self._name(key))

    def items(self, key, required=True):
        if key not in self.data:
            if required:
                raise ParseError(f"{self._name(key)}: required list missing")
            return []
        val = self.data[key]
        if not isinstance(val, list):
            raise ParseError(f"{self._name(key)}: expected a list")
        return [_Doc(v, f"{self._name(key)}[{i}]") for i, v in enumerate(val)]


def _convert(value, kind, name):
    try:
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                raise TypeError
            out = float(value)
            if not math.isfinite(out):
                raise ValueError
            return out
        if kind is int:
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "floats":
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return (float(value),)
            return tuple(_convert(v, float, f"{name}[{i}]") for i, v in enumerate(value))
        if kind is dict:
            if not isinstance(value, dict):
                raise TypeError
            return value
    except ParseError:
        raise
    except (TypeError, ValueError):
        pass
    label = kind if isinstance(kind, str) else kind.__name__
    raise ParseError(f"{name}: expected {label}, got {value!r}")


def _read_yaml(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read scenario ({exc.strerror or exc})") from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ParseError(f"{path}:{where}: {problem}") from exc


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a scenario file.

    DSO costs missing from the file are drawn from ``dsos.cost_range`` with
    ``numpy.random.default_rng(seed)``, one draw per DSO in file order.
    """
    path = Path(path)
    raw = _read_yaml(path)
    if raw is None:
        raise ParseError(f"{path}: empty document")
    return scenario_from_dict(raw, base_dir=path.parent, source=path)


def _resolve_network(name: str, base_dir: Path) -> Path:
    cand = Path(name)
    if not cand.is_absolute():
        cand = base_dir / cand
    if cand.exists():
        return cand.resolve()
    try:
        bundled = bundled_path(name)
    except Exception:
        bundled = None
    if bundled is not None and Path(bundled).exists():
        return Path(bundled).resolve()
    raise ValidationError("network", f"network file {name!r} not found next to the scenario")


def scenario_from_dict(raw, base_dir=Path("."), source=None) -> ScenarioConfig:
    doc = _Doc(raw)
    unknown = set(doc.data) - _SECTIONS
    if unknown:
        raise ParseError(f"unknown top-level section(s): {', '.join(sorted(unknown))}")

    net_path = _resolve_network(doc.get("network", str), Path(base_dir))
    try:
        grid = load_network(net_path)
    except NetworkFormatError as exc:
        raise ValidationError("network", str(exc)) from exc
    except OSError as exc:
        raise ValidationError("network", f"{net_path}: {exc}") from exc

    seed = doc.get("seed", int, None)
    mode = doc.get("mode", str, "feedback")
    if mode == "linear":
        mode = "linear-analysis"
    if mode not in MODES:
        raise ValidationError("mode", f"expected one of {MODES}, got {mode!r}")

    def position(bus, fieldname):
        if bus not in grid.labels:
            raise ValidationError(fieldname, f"bus {bus} is not in network {grid.name!r}")
        try:
            return grid.pq_position(bus)
        except KeyError:
            raise ValidationError(fieldname, f"bus {bus} is the slack bus") from None

    m = grid.n_pq
    p = np.zeros(m)
    q = np.zeros(m)
    seen = set()
    for item in doc.items("loads", required=False):
        bus = item.get("bus", int)
        pos = position(bus, f"{item.path}.bus")
        if bus in seen:
            raise ValidationError(f"{item.path}.bus", f"bus {bus} listed twice")
        seen.add(bus)
        p[pos] = item.get("p", float, 0.0)
        q[pos] = item.get("q", float, 0.0)

    dsos = doc.section("dsos")
    cost_range = dsos.get("cost_range", "floats", None)
    members = dsos.items("members")
    if not members:
        raise ValidationError("dsos.members", "at least one DSO is required")
    if cost_range is not None:
        if len(cost_range) != 2 or not 0 < cost_range[0] <= cost_range[1]:
            raise ValidationError("dsos.cost_range", "expected [low, high] with 0 < low <= high")
    draws = None
    if any(not mb.has("cost") for mb in members):
        if cost_range is None:
            raise ValidationError("dsos.cost_range", "needed for DSOs without an explicit cost")
        if seed is None:
            raise ValidationError("seed", "mandatory when costs are drawn from a range")
        draws = np.random.default_rng(seed).uniform(cost_range[0], cost_range[1], len(members))

    profiles = []
    dso_seen = set()
    for i, mb in enumerate(members):
        bus = mb.get("bus", int)
        position(bus, f"{mb.path}.bus")
        if bus in dso_seen:
            raise ValidationError(f"{mb.path}.bus", f"two DSOs at bus {bus}")
        dso_seen.add(bus)
        cost = mb.get("cost", float) if mb.has("cost") else float(draws[i])
        q_min = mb.get("q_min", float)
        q_max = mb.get("q_max", float)
        if not cost > 0:
            raise ValidationError(f"{mb.path}.cost", "must be positive")
        if not q_min <= q_max:
            raise ValidationError(f"{mb.path}.q_min", "q_min exceeds q_max")
        profiles.append(DsoProfile(bus=bus, cost_coeff=cost, q_min=q_min, q_max=q_max))
    n = len(profiles)

    inc = doc.section("incentive")
    gamma = inc.get("gamma", float)
    rho = inc.get("rho", float)
    v_ref_init = inc.get("v_ref_init", "floats", (1.0,))
    if len(v_ref_init) == 1:
        v_ref_init = v_ref_init * n
    if len(v_ref_init) != n:
        raise ValidationError("incentive.v_ref_init", f"expected 1 or {n} values")
    for name, val in (("incentive.gamma", gamma), ("incentive.rho", rho)):
        if not val > 0:
            raise ValidationError(name, "must be positive")

    lim = doc.section("limits")
    v_lo = lim.get("v_lo", float)
    v_hi = lim.get("v_hi", float)
    margin = lim.get("margin", float, 0.0)
    if not v_lo < v_hi:
        raise ValidationError("limits.v_lo", "must be below limits.v_hi")
    if not 0 <= margin < 0.5 * (v_hi - v_lo):
        raise ValidationError("limits.margin", "must be non-negative and leave a non-empty band")

    sol = doc.section("solver")
    eta = sol.get("eta", float)
    if not eta > 0:
        raise ValidationError("solver.eta", "must be positive")
    schedules = {}
    for key, default in (("epsilon", None), ("sigma", {"kind": "geometric", "initial": 1e-3,
                                                      "ratio": 0.9, "floor": 1e-8})):
        spec = sol.get(key, dict, default)
        if spec is None:
            raise ParseError(f"solver.{key}: required field missing")
        try:
            schedules[key] = Schedule.from_dict(spec)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"solver.{key}", str(exc)) from exc
    max_outer = sol.get("max_outer", int, 5000)
    max_inner = sol.get("max_inner", int, 10_000)
    grad_tol = sol.get("grad_tol", float, 1e-6)
    if max_outer < 1:
        raise ValidationError("solver.max_outer", "must be at least 1")
    if max_inner < 1:
        raise ValidationError("solver.max_inner", "must be at least 1")
    if grad_tol < 0:
        raise ValidationError("solver.grad_tol", "must be non-negative")

    from .codesign import Disturbance

    dist = []
    for item in doc.items("disturbances", required=False):
        idx = item.get("dso", int)
        if not 1 <= idx <= n:
            raise ValidationError(f"{item.path}.dso", f"expected a DSO number in 1..{n}")
        d_lo = item.get("q_min", float, profiles[idx - 1].q_min)
        d_hi = item.get("q_max", float, profiles[idx - 1].q_max)
        at = item.get("at", int)
        if at < 0:
            raise ValidationError(f"{item.path}.at", "must be non-negative")
        if not d_lo <= d_hi:
            raise ValidationError(f"{item.path}.q_min", "q_min exceeds q_max")
        dist.append(Disturbance(at_outer_iter=at, dso_index=idx - 1, new_q_min=d_lo, new_q_max=d_hi))

    return ScenarioConfig(
        network=net_path, p=tuple(p.tolist()), q_fixed=tuple(q.tolist()),
        profiles=tuple(profiles), gamma=gamma, rho=rho, v_lo=v_lo, v_hi=v_hi, eta=eta,
        epsilon=schedules["epsilon"], sigma=schedules["sigma"], v_ref_init=tuple(v_ref_init),
        max_outer=max_outer, disturbances=tuple(dist), mode=mode, seed=seed,
        cost_range=cost_range, margin=margin, grad_tol=grad_tol, max_inner=max_inner,
        grid=grid, source=Path(source) if source is not None else None)


def scenario_to_dict(cfg: ScenarioConfig, base_dir=None) -> dict[str, Any]:
    """Canonical document: every value explicit, costs included."""
    net = cfg.network
    if base_dir is not None:
        try:
            net = Path(os.path.relpath(cfg.network, base_dir))
        except ValueError:
            pass
    labels = [int(cfg.grid.labels[i]) for i in cfg.grid.pq_buses] if cfg.grid is not None \
        else list(range(1, len(cfg.p) + 1))
    doc: dict[str, Any] = {"network": str(net), "mode": cfg.mode}
    if cfg.seed is not None:
        doc["seed"] = cfg.seed
    doc["loads"] = [{"bus": b, "p": p, "q": q} for b, p, q in zip(labels, cfg.p, cfg.q_fixed)]
    dsos: dict[str, Any] = {}
    if cfg.cost_range is not None:
        dsos["cost_range"] = list(cfg.cost_range)
    dsos["members"] = [{"bus": pr.bus, "cost": pr.cost_coeff, "q_min": pr.q_min,
                        "q_max": pr.q_max} for pr in cfg.profiles]
    doc["dsos"] = dsos
    doc["incentive"] = {"gamma": cfg.gamma, "rho": cfg.rho, "v_ref_init": list(cfg.v_ref_init)}
    doc["limits"] = {"v_lo": cfg.v_lo, "v_hi": cfg.v_hi, "margin": cfg.margin}
    doc["solver"] = {"eta": cfg.eta, "epsilon": cfg.epsilon.to_dict(),
                     "sigma": cfg.sigma.to_dict(), "max_outer": cfg.max_outer,
                     "max_inner": cfg.max_inner, "grad_tol": cfg.grad_tol}
    if cfg.disturbances:
        doc["disturbances"] = [{"at": d.at_outer_iter, "dso": d.dso_index + 1,
                                "q_min": d.new_q_min, "q_max": d.new_q_max}
                               for d in cfg.disturbances]
    return doc


def dump_scenario(cfg: ScenarioConfig, path) -> Path:
    path = Path(path)
    doc = scenario_to_dict(cfg, base_dir=path.parent)
    try:
        path.write_text(yaml.safe_dump(doc, sort_keys=False))
    except OSError as exc:
        raise OSError(f"cannot write scenario to {path}: {exc}") from exc
    return path


def output_dir(requested=None) -> Path:
    """``requested`` if given, else ``$VOLTAGE_INCENTIVES_OUT``, else ``./out``."""
    if requested is not None:
        return Path(requested)
    return Path(os.environ.get(OUT_DIR_ENV, "out"))


# --------------------------------------------------------------------------- #
# Trace persistence
# --------------------------------------------------------------------------- #

def trace_columns(labels) -> list[str]:
    cols = ["k"]
    for group in ("v_ref", "v", "xi", "payment"):
        cols += [f"{group}_{b}" for b in labels]
    return cols + ["phi_e", "grad_norm", "inner_iters", "events"]


def _num(x) -> str:
    # repr round-trips exactly, so recomputed payments match the stored ones
    return repr(float(x))


def write_trace(trace: "ScenarioTrace", out_dir, *, oracle_reports=(), name="trace") -> dict[str, Path]:
    """Write ``<name>.csv`` (one row per outer iteration) and ``<name>_summary.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        table = out / f"{name}.csv"
        with table.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(trace_columns(trace.labels))
            for r in trace.rows:
                w.writerow([r.k, *map(_num, r.v_ref), *map(_num, r.v), *map(_num, r.xi),
                            *map(_num, r.payments), _num(r.phi_e), _num(r.grad_norm),
                            r.inner_iters, "; ".join(r.events)])
        summary = out / f"{name}_summary.json"
        doc = trace.summary()
        doc["oracle_reports"] = [json.loads(rep.to_line()) for rep in oracle_reports]
        summary.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write trace under {out}: {exc}") from exc
    return {"table": table, "summary": summary}


def read_trace_table(path) -> dict[str, np.ndarray]:
    """Load a trace CSV back into column arrays (``events`` stays a list of strings)."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty trace table")
    header, body = rows[0], rows[1:]
    cols: dict[str, Any] = {}
    for j, name in enumerate(header):
        vals = [row[j] for row in body]
        if name == "events":
            cols[name] = vals
        elif name in ("k", "inner_iters"):
            cols[name] = np.array([int(v) for v in vals], dtype=int)
        else:
            cols[name] = np.array([float(v) for v in vals])
    return cols


def bundled_scenario(name: str = "five_bus.scenario") -> Path:
    return bundled_path(name)
