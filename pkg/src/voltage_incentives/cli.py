"""Command-line entry point: ``voltage-incentives {run,inner,check,verify,disturb-demo}``.

Exit codes: 0 success, 1 parse/validation failure, 2 numerical failure
(inner-loop stall, infeasible plant; ``check`` also uses it for a violated
conditioning report), 3 oracle failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .codesign import build_game_model, make_measure, run_codesign
from .dso import GameIterate, check_conditioning, run_inner_loop
from .exceptions import (
    InnerLoopStall,
    OracleNoConvergence,
    ParseError,
    PlantInfeasible,
    PowerFlowError,
    SignConventionViolation,
    ValidationError,
)
from .scenario import bundled_scenario, load_scenario, output_dir, write_trace

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_ORACLE = 0, 1, 2, 3

log = logging.getLogger("voltage_incentives")


def _fmt(x) -> str:
    return np.array2string(np.asarray(x), precision=5, suppress_small=True, max_line_width=120)


def _flush_partial(trace, out, stream):
    if trace is not None and len(trace):
        paths = write_trace(trace, out, name="trace_partial")
        print(f"partial trace ({len(trace)} rows) written to {paths['table']}", file=stream)


def _run(cfg, out, jobs, max_outer, label):
    t0 = time.perf_counter()
    try:
        trace = run_codesign(cfg, n_jobs=jobs, max_outer=max_outer)
    except (InnerLoopStall, PlantInfeasible) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _flush_partial(exc.trace, out, sys.stderr)
        return None, EXIT_NUMERIC
    paths = write_trace(trace, out)
    s = trace.summary()
    print(f"{label}: {len(trace)} outer iterations in {time.perf_counter() - t0:.1f} s "
          f"({trace.stop_reason})")
    print(f"  DSO buses          {list(trace.labels)}")
    print(f"  initial voltage    {_fmt(s['initial_voltage'])}  "
          f"({s['initial_buses_below_bound']} below {cfg.v_lo})")
    print(f"  final voltage      {_fmt(s['final_voltage'])}  in bounds: {s['final_in_bounds']}")
    print(f"  final v_ref        {_fmt(s['final_v_ref'])}")
    print(f"  final xi           {_fmt(s['final_xi'])}")
    print(f"  final payments     {_fmt(s['final_payments'])}")
    print(f"  trace              {paths['table']}")
    print(f"  summary            {paths['summary']}")
    return trace, EXIT_OK


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    _, code = _run(cfg, output_dir(args.out), args.jobs, args.max_outer, "run")
    return code


def cmd_inner(args) -> int:
    cfg = load_scenario(args.scenario)
    model = build_game_model(cfg)
    v_ref = np.array(cfg.v_ref_init)
    sigma = args.sigma if args.sigma is not None else cfg.sigma.value
    it = run_inner_loop(cfg.profiles, GameIterate.cold(cfg.n_dso), v_ref, cfg.gamma, cfg.eta,
                        sigma, make_measure(cfg, model), model.sens,
                        max_iter=cfg.max_inner, n_jobs=args.jobs)
    print(f"inner loop ({cfg.mode}) converged in {it.inner_iter} iterations, sigma = {sigma:g}")
    print(f"v_ref        {_fmt(v_ref)}")
    print(f"equilibrium  {_fmt(it.xi)}")
    print(f"voltage      {_fmt(it.v_meas)}")
    print("sensitivity")
    print(_fmt(it.s))
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = load_scenario(args.scenario)
    model = build_game_model(cfg)
    c = check_conditioning(cfg.profiles, model.sens, cfg.gamma, cfg.eta)
    print(f"mu        = {c.mu:.6g}")
    print(f"L_F       = {c.L_F:.6g}")
    print(f"theta     = {c.theta:.6g}  (eta = {cfg.eta:g}, eta_max = {c.eta_max:.6g})")
    print(f"gamma_max = {c.gamma_max:.6g}  (gamma = {cfg.gamma:g})")
    if c.violated:
        print("conditioning violated: mu <= 0 or gamma above gamma_max", file=sys.stderr)
        return EXIT_NUMERIC
    if not c.theta < 1:
        print("step size outside the contraction range", file=sys.stderr)
        return EXIT_NUMERIC
    print("conditioning ok")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import oracle_suite

    cfg = load_scenario(args.scenario)
    reports = oracle_suite(cfg, n_jobs=args.jobs)
    for r in reports:
        print(r.to_line())
    failed = [r.quantity for r in reports if not r.passed]
    if failed:
        print(f"oracle check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ORACLE
    print(f"all {len(reports)} oracle checks passed")
    return EXIT_OK


def cmd_disturb_demo(args) -> int:
    cfg = load_scenario(bundled_scenario("five_bus_disturbance.scenario"))
    trace, code = _run(cfg, output_dir(args.out), args.jobs, None, "disturb-demo")
    if trace is None:
        return code
    d = cfg.disturbances[0]
    k = d.at_outer_iter
    window = min(50, k, len(trace) - k)
    pay = trace.column("payments")
    pre = pay[k - window:k].mean(axis=0)
    post = pay[-window:].mean(axis=0)
    print(f"  disturbance at k={k}: {d.describe()}")
    print(f"  mean payments over {window} iterations before  {_fmt(pre)}")
    print(f"  mean payments over last {window} iterations    {_fmt(post)}")
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voltage-incentives",
                                 description="Incentive-based reactive power procurement")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("scenario", type=Path)
        p.add_argument("--jobs", type=int, default=1,
                       help="threads for the per-DSO updates (results do not depend on it)")

    p = sub.add_parser("run", help="run the full co-design loop")
    common(p)
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default: $VOLTAGE_INCENTIVES_OUT or ./out)")
    p.add_argument("--max-outer", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("inner", help="one inner loop at the initial incentive")
    common(p)
    p.add_argument("--sigma", type=float, default=None)
    p.set_defaults(func=cmd_inner)

    p = sub.add_parser("check", help="conditioning report")
    common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("verify", help="compare the algorithms with the oracles")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("disturb-demo", help="bundled scenario with the 40 MVar cap")
    common(p, scenario=False)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_disturb_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InnerLoopStall, PlantInfeasible, PowerFlowError, SignConventionViolation) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OracleNoConvergence as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
