"""Command line front end: ``conelq {solve, simulate, verify, portfolio}``.

Every run writes JSON reports into the output directory.  Failures write
``error.json`` and exit with the bucket of the error: 1 I/O, 2 validation or
well-posedness, 3 property check, 4 numerical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .cone import brute_force_H, eval_H, is_symmetric
from .errors import (
    ConeLQError,
    FaceLimitExceeded,
    InputOutputError,
    MonotonicityViolated,
    NoDecay,
    PositivityViolated,
    PropertyCheckFailed,
    UnknownConfigKey,
    ValidationError,
)
from .esre import (
    MONOTONE_TOL,
    SolverConfig,
    algebraic_residual,
    check_monotonicity,
    check_positivity,
    export_solution,
    solve_infinite,
    value_function,
)
from .model import ProblemSpec, check_assumptions, coefficients_at, load_problem
from .portfolio import load_market, solve_tracking, tracking_report
from .sim import SimConfig, build_policy, decay_report, perturb_policy, simulate_cost, write_path_costs

OUT_ENV = "CONELQ_OUT"
VERIFY_PATHS = 2000
VERIFY_DT = 1e-2
ORACLE_POINTS = 25


# -- configuration -----------------------------------------------------------

def _coerce(raw: str, kind):
    kind_name = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if "bool" in kind_name:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    try:
        if "int" in kind_name and "float" not in kind_name:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ValidationError(f"cannot parse {raw!r} as {kind_name}") from None


def parse_overrides(pairs: list[str]) -> tuple[dict, dict]:
    """``solver.<field>=value`` and ``sim.<field>=value`` pairs."""
    targets = {"solver": {f.name: f.type for f in dataclasses.fields(SolverConfig)},
               "sim": {f.name: f.type for f in dataclasses.fields(SimConfig)}}
    out = {"solver": {}, "sim": {}}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"override {pair!r} is not KEY=VALUE")
        key, raw = pair.split("=", 1)
        group, _, name = key.strip().partition(".")
        if group not in targets or name not in targets[group]:
            known = sorted(f"{g}.{n}" for g in targets for n in targets[g])
            raise UnknownConfigKey(f"unknown config key {key!r}; known keys: {', '.join(known)}", key=key)
        out[group][name] = _coerce(raw.strip(), targets[group][name])
    return out["solver"], out["sim"]


def _solver_config(args) -> SolverConfig:
    return SolverConfig(**args.solver_overrides)


def _sim_config(args, spec: ProblemSpec, verify: bool = False) -> SimConfig:
    fields = dict(args.sim_overrides)
    if verify:
        fields.setdefault("paths", VERIFY_PATHS)
        fields.setdefault("dt", VERIFY_DT)
    for flag, name in (("paths", "paths"), ("dt", "dt"), ("horizon", "T"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            fields[name] = value
    if verify and "T" not in fields:
        dt = fields.get("dt", VERIFY_DT)
        # a multiple of 2 dt, so the coarse bias run covers the same window
        fields["T"] = math.ceil(10.0 / check_assumptions(spec).rho / (2 * dt) - 1e-9) * 2 * dt
    return SimConfig(**fields)


# -- output ------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc.strerror}") from None
    return path


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "conelq-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputOutputError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise InputOutputError(f"output directory {out} is not writable")
    return out


# -- commands ----------------------------------------------------------------

def run_solve(args) -> int:
    spec = load_problem(args.input)
    out = _out_dir(args)
    sol = solve_infinite(spec, _solver_config(args))
    export_solution(sol, out)
    print(f"P1(0) = {sol.P1_0.tolist()}  P2(0) = {sol.P2_0.tolist()}  ({sol.case.value})")
    return 0


def run_simulate(args) -> int:
    spec = load_problem(args.input)
    out = _out_dir(args)
    sol = solve_infinite(spec, _solver_config(args))
    cfg = _sim_config(args, spec)
    est = simulate_cost(spec, build_policy(spec, sol), cfg)
    report = est.to_dict()
    report["value_function"] = value_function(sol, spec.x0, spec.i0)
    report["antithetic"] = cfg.antithetic
    write_json(out / "simulation.json", report)
    if args.dump_paths:
        write_path_costs(est, out / "paths.csv")
    print(f"cost {est.mean:.6g} +- {est.stderr:.3g} (tail bound {est.tail_bound:.3g}); "
          f"value {report['value_function']:.6g}")
    return 0


def _check(name, passed, margin, **extra):
    # margin is slack: nonnegative when the check holds
    status = "skipped" if passed is None else ("pass" if passed else "fail")
    return {"name": name, "status": status, "margin": margin, **extra}


def _oracle_check(spec: ProblemSpec, sol) -> dict:
    idx = np.unique(np.linspace(0, sol.grid.size - 1, ORACLE_POINTS).astype(int))
    worst = 0.0
    try:
        for k in idx:
            t = float(sol.grid[k])
            for i in range(spec.ell):
                c = coefficients_at(spec, t, i)
                for sign, P, a in ((1, sol.P1[i, k], sol.a_by_sign[0]), (2, sol.P2[i, k], sol.a_by_sign[1])):
                    fast = eval_H(sign, float(P), c, spec.cone, a).value
                    slow = brute_force_H(sign, float(P), c, spec.cone, a)
                    worst = max(worst, abs(fast - slow))
    except FaceLimitExceeded as exc:
        return _check("hamiltonian_oracle", None, None, reason=exc.message)
    return _check("hamiltonian_oracle", worst <= 1e-8, 1e-8 - worst, max_error=worst)


def _discretization_allowance(spec, policy, cfg: SimConfig, mean: float) -> float | None:
    coarse = dataclasses.replace(cfg, dt=2 * cfg.dt)
    n = round(cfg.T / coarse.dt)
    if abs(n * coarse.dt - cfg.T) > 1e-9 * max(1.0, cfg.T):
        return None
    return 2.0 * abs(mean - simulate_cost(spec, policy, coarse).mean)


def _mc_checks(spec: ProblemSpec, sol, cfg: SimConfig) -> list[dict]:
    policy = build_policy(spec, sol)
    opt = simulate_cost(spec, policy, cfg)
    V = value_function(sol, spec.x0, spec.i0)
    gap = abs(opt.mean + opt.tail_bound / 2 - V)
    # Euler bias is O(dt): a run at 2 dt estimates it (bias(dt) ~ mean(dt) - mean(2 dt))
    bias = _discretization_allowance(spec, policy, cfg, opt.mean)
    allowed = max(3 * opt.stderr, opt.tail_bound) + (bias or 0.0)
    checks = [_check("mc_value", gap <= allowed, allowed - gap, mean=opt.mean, stderr=opt.stderr,
                     tail_bound=opt.tail_bound, value=V, discretization_allowance=bias)]
    worst = math.inf
    for label, pol in (("scale(0.25)", perturb_policy(policy, 0.25, "scale")),
                       ("scale(0.5)", perturb_policy(policy, 0.5, "scale")),
                       ("swap", perturb_policy(policy, mode="swap"))):
        est = simulate_cost(spec, pol, cfg)
        worst = min(worst, (est.mean + 2 * est.stderr) - (opt.mean - 2 * opt.stderr))
    checks.append(_check("mc_optimality", worst >= 0, worst))
    rep = decay_report(opt.times, opt.second_moment)
    checks.append(_check("mc_decay", rep.passed, rep.to_dict()["m2_T_quarter"] - rep.to_dict()["m2_T"],
                         rate=rep.rate))
    return checks


FAILURE_CODES = {"monotonicity": MonotonicityViolated, "positivity": PositivityViolated,
                 "mc_decay": NoDecay}


def run_verify(args) -> int:
    spec = load_problem(args.input)
    out = _out_dir(args)
    solver_cfg = _solver_config(args)
    sim_cfg = _sim_config(args, spec, verify=True)
    checks = []

    mono = check_monotonicity(spec, solver_cfg, raise_on_failure=False)
    checks.append(_check("monotonicity", mono["passed"], MONOTONE_TOL - mono["margin"],
                         violation=mono["margin"]))
    sol = solve_infinite(spec, solver_cfg)
    report = sol.report
    upper = float(report.p_upper - max(sol.P1.max(), sol.P2.max()))
    checks.append(_check("upper_bound", upper >= -1e-6, upper))
    checks.append(_check("nonnegativity", float(min(sol.P1.min(), sol.P2.min())) >= -1e-9,
                         float(min(sol.P1.min(), sol.P2.min()))))
    if spec.coeffs.Q.min() > 0:
        pos = check_positivity(spec, sol, raise_on_failure=False)
        checks.append(_check("positivity", pos["passed"], min(pos["strict_margin"], pos["envelope_margin"])))
    else:
        checks.append(_check("positivity", None, None, reason="state weight is not uniformly positive"))
    checks.append(_oracle_check(spec, sol))
    if is_symmetric(spec.cone):
        gap = float(np.max(np.abs(sol.P1 - sol.P2)))
        checks.append(_check("symmetric_collapse", gap <= 1e-8, 1e-8 - gap, max_gap=gap))
    else:
        checks.append(_check("symmetric_collapse", None, None, reason="cone is not symmetric"))
    if spec.coeffs.n_segments == 1:
        r1, r2 = algebraic_residual(spec, sol.P1_0, sol.P2_0, sol.a_by_sign)
        res = float(max(np.abs(r1).max(), np.abs(r2).max()))
        tol = 10 * sol.config.horizon_tol
        checks.append(_check("algebraic_consistency", res < tol, tol - res, residual=res))
    else:
        checks.append(_check("algebraic_consistency", None, None, reason="time-varying coefficients"))
    checks.extend(_mc_checks(spec, sol, sim_cfg))

    failed = [c for c in checks if c["status"] == "fail"]
    payload = {
        "passed": not failed,
        "case": sol.case.value,
        "P1_0": sol.P1_0, "P2_0": sol.P2_0,
        "value_function": value_function(sol, spec.x0, spec.i0),
        "solver": sol.config.to_dict(),
        "simulation": sim_cfg.to_dict(),
        "checks": checks,
    }
    if failed:
        err = FAILURE_CODES.get(failed[0]["name"], PropertyCheckFailed)(
            f"check {failed[0]['name']} failed (margin {failed[0]['margin']})",
            failed=[c["name"] for c in failed])
        payload["error"] = err.to_dict()
        write_json(out / "verify.json", payload)
        raise err
    write_json(out / "verify.json", payload)
    print("all checks passed: " + ", ".join(c["name"] for c in checks if c["status"] == "pass"))
    return 0


def run_portfolio(args) -> int:
    market = load_market(args.input)
    out = _out_dir(args)
    track = solve_tracking(market, _solver_config(args))
    report = tracking_report(track)
    write_json(out / "portfolio.json", report)
    print(f"P2(0) = {report['P2_per_regime']}  value = {report['value_at_x0']:.6g}")
    return 0


COMMANDS = {"solve": run_solve, "simulate": run_simulate, "verify": run_verify, "portfolio": run_portfolio}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conelq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--input", required=True, help="problem (or market) JSON file")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./conelq-out)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="solver.<field> or sim.<field> override (repeatable)")
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--horizon", type=float, default=None, help="simulation truncation time T")
        if name == "simulate":
            p.add_argument("--dump-paths", action="store_true", help="also write per-path costs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.solver_overrides, args.sim_overrides = parse_overrides(args.overrides)
        return COMMANDS[args.command](args)
    except ConeLQError as exc:
        return _fail(args, exc.to_dict(), exc.exit_code)
    except Exception as exc:  # noqa: BLE001 - last-resort bucket
        return _fail(args, {"code": "INTERNAL", "message": f"{type(exc).__name__}: {exc}"}, 4)


def _fail(args, payload: dict, code: int) -> int:
    payload = {**payload, "exit_code": code}
    print(f"error [{payload['code']}]: {payload['message']}", file=sys.stderr)
    try:
        out = Path(args.out or os.environ.get(OUT_ENV) or "conelq-out")
        write_json(out / "error.json", payload)
    except ConeLQError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
