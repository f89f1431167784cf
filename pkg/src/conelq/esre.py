"""Backward integration of the coupled Riccati systems for P1 and P2.

With deterministic coefficients each system is an ODE in t,

    dP(i)/dt = -[(2A + C'C) P(i) + Qw + H_sign(P(i), i, a) + sum_j q_ij P(j)],

solved backward from P(N, i) = 0.  Internally the integration variable is the
time to go ``tau = N - t``.  Past the last breakpoint the system is autonomous,
so the tail ``tau -> P`` does not depend on N and is cached; growing the horizon
only extends that cache.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cone import eval_H, ray_signs
from .errors import (
    BoundViolated,
    InputOutputError,
    MaxRoundsExceeded,
    MonotonicityViolated,
    NegativeRoot,
    NegativeSolution,
    NewtonDiverged,
    NotPositiveDefinite,
    PositivityViolated,
    PreconditionViolated,
    SideConditionViolated,
    StepTooLarge,
    UnsupportedCase,
    ValidationError,
)
from .model import AssumptionReport, Case, ProblemSpec, check_assumptions

CLAMP_TOL = 1e-12
NEGATIVE_TOL = 1e-9
BOUND_SLACK = 1e-6
MONOTONE_TOL = 1e-8
PD_TOL = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    """Discretization and stopping rules.

    ``horizon0`` and ``a0`` default to ``max(10/rho, last breakpoint)`` and
    ``1e-2 (1 + p_upper)`` when left as ``None``.
    """

    step: float = 0.05
    horizon0: float | None = None
    horizon_growth: float = 2.0
    horizon_tol: float = 1e-8
    a0: float | None = None
    a_decay: float = 0.5
    a_tol: float = 1e-7
    max_rounds: int = 12
    max_a_rounds: int = 60

    def __post_init__(self):
        if not self.step > 0:
            raise ValidationError("solver step must be positive")
        if not self.horizon_tol > 0 or not self.a_tol > 0:
            raise ValidationError("tolerances must be positive")
        if not 0 < self.a_decay < 1:
            raise ValidationError("a_decay must lie in (0, 1)")
        if not self.horizon_growth > 1:
            raise ValidationError("horizon_growth must exceed 1")
        if self.horizon0 is not None and not self.horizon0 > 0:
            raise ValidationError("horizon0 must be positive")
        if self.a0 is not None and not self.a0 > 0:
            raise ValidationError("a0 must be positive")
        if self.max_rounds < 1 or self.max_a_rounds < 1:
            raise ValidationError("round caps must be >= 1")

    def resolved(self, spec: ProblemSpec, report: AssumptionReport) -> SolverConfig:
        t_last = float(spec.coeffs.breakpoints[-1])
        h0 = self.horizon0 if self.horizon0 is not None else max(10.0 / report.rho, t_last)
        a0 = self.a0 if self.a0 is not None else 1e-2 * (1.0 + report.p_upper)
        return replace(self, horizon0=float(h0), a0=float(a0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EsreSolution:
    """P1, P2 on a time grid covering ``[0, window]``.

    ``P1[i, k]`` is the value in regime ``i`` at ``grid[k]``.  Beyond the
    window the curves are held at their last value (the coefficients are
    constant there, so the infinite-horizon solution is too).
    """

    grid: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    case: Case
    a_final: float
    report: AssumptionReport
    config: SolverConfig
    horizon: tuple[float, float] = (0.0, 0.0)
    a_by_sign: tuple[float, float] = (0.0, 0.0)
    diagnostics: dict = field(default_factory=dict)

    def curves(self, sign: int) -> np.ndarray:
        return self.P1 if sign == 1 else self.P2

    def index(self, t: float) -> int:
        k = int(np.searchsorted(self.grid, t, side="right") - 1)
        return min(max(k, 0), self.grid.size - 1)

    @property
    def P1_0(self) -> np.ndarray:
        return self.P1[:, 0]

    @property
    def P2_0(self) -> np.ndarray:
        return self.P2[:, 0]

    def metadata(self) -> dict:
        return {
            "case": self.case.value,
            "a_final": self.a_final,
            "a_by_sign": list(self.a_by_sign),
            "horizon": list(self.horizon),
            "window": float(self.grid[-1]),
            "P1_0": self.P1_0.tolist(),
            "P2_0": self.P2_0.tolist(),
            "assumptions": self.report.to_dict(),
            "config": self.config.to_dict(),
            "diagnostics": self.diagnostics,
        }


# -- right-hand side ---------------------------------------------------------

class _Flow:
    """Backward system for one sign and one regularization level."""

    def __init__(self, spec: ProblemSpec, sign: int, a: float, p_upper: float):
        self.spec = spec
        self.sign = sign
        self.a = float(a)
        self.max_jump = 0.5 * p_upper
        c = spec.coeffs
        self.ell = spec.ell
        self.bp = [float(t) for t in c.breakpoints]
        self.q = [[float(x) for x in row] for row in spec.gen.q]
        self.scalar = spec.m == 1
        self.pos, self.neg = ray_signs(spec.cone) if self.scalar else (True, True)
        self.drift = [[float(2 * c.A[k, i] + c.C[k, i] @ c.C[k, i]) for i in range(self.ell)]
                      for k in range(c.n_segments)]
        self.qw = [[float(c.Q[k, i]) for i in range(self.ell)] for k in range(c.n_segments)]
        if self.scalar:
            self.be = [[float(c.B[k, i, 0] + c.D[k, i, :, 0] @ c.C[k, i]) for i in range(self.ell)]
                       for k in range(c.n_segments)]
            self.dd = [[float(c.D[k, i, :, 0] @ c.D[k, i, :, 0]) for i in range(self.ell)]
                       for k in range(c.n_segments)]
            self.r = [[float(c.R[k, i, 0, 0]) for i in range(self.ell)] for k in range(c.n_segments)]
        self.tail = [[0.0] * self.ell]
        self.tail_step = None

    def hamiltonian(self, seg: int, i: int, P: float) -> float:
        if self.scalar:
            M = P * self.dd[seg][i] + self.r[seg][i] + self.a
            if not M > PD_TOL:
                raise SideConditionViolated(
                    f"R + P D'D + aI lost positivity (value {M:.3g}) in regime {i}",
                    regime=i, P=P, a=self.a)
            s = P * self.be[seg][i]
            v = -s / M if self.sign == 1 else s / M
            if (v > 0 and self.pos) or (v < 0 and self.neg):
                return -s * s / M
            return 0.0
        try:
            return eval_H(self.sign, P, self.spec.coeffs.at(seg, i), self.spec.cone, self.a).value
        except NotPositiveDefinite as exc:
            raise SideConditionViolated(f"R + P D'D + aI lost positivity in regime {i}: {exc.message}",
                                        regime=i, P=P, a=self.a) from None

    def rhs(self, seg: int, P: list[float]) -> list[float]:
        drift, qw, q = self.drift[seg], self.qw[seg], self.q
        out = []
        for i in range(self.ell):
            coupling = 0.0
            for j in range(self.ell):
                coupling += q[i][j] * P[j]
            out.append(drift[i] * P[i] + qw[i] + self.hamiltonian(seg, i, P[i]) + coupling)
        return out

    def step(self, seg: int, P: list[float], h: float) -> list[float]:
        ell = self.ell
        k1 = self.rhs(seg, P)
        k2 = self.rhs(seg, [P[i] + 0.5 * h * k1[i] for i in range(ell)])
        k3 = self.rhs(seg, [P[i] + 0.5 * h * k2[i] for i in range(ell)])
        k4 = self.rhs(seg, [P[i] + h * k3[i] for i in range(ell)])
        new = [P[i] + h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) for i in range(ell)]
        for i in range(ell):
            if self.max_jump > 0 and abs(new[i] - P[i]) > self.max_jump:
                raise StepTooLarge(
                    f"one step moved P({i}) by {abs(new[i] - P[i]):.3g} (> half the upper bound); "
                    "reduce the step", regime=i, step=h)
            if new[i] < 0:
                if new[i] >= -CLAMP_TOL:
                    new[i] = 0.0
                elif new[i] < -NEGATIVE_TOL:
                    raise NegativeSolution(f"P({i}) = {new[i]:.3g} went negative", regime=i)
        return new

    def tail_values(self, count: int, h: float) -> list[list[float]]:
        """Autonomous flow past the last breakpoint, ``count`` steps of size ``h``."""
        if self.tail_step != h:
            self.tail = [[0.0] * self.ell]
            self.tail_step = h
        last = len(self.bp) - 1
        while len(self.tail) <= count:
            self.tail.append(self.step(last, self.tail[-1], h))
        return self.tail[:count + 1]


def _pieces(bp: list[float], N: float):
    """Segment pieces of [0, N] from latest to earliest: (segment, lo, hi)."""
    out = []
    for k in range(len(bp) - 1, -1, -1):
        lo = bp[k]
        hi = bp[k + 1] if k + 1 < len(bp) else N
        hi = min(hi, N)
        if lo < hi:
            out.append((k, lo, hi))
    return out


def _integrate(flow: _Flow, N: float, h: float, use_tail: bool = False):
    times = [N]
    values = [[0.0] * flow.ell]
    for seg, lo, hi in _pieces(flow.bp, N):
        nsub = max(1, math.ceil((hi - lo) / h - 1e-9))
        if use_tail and seg == len(flow.bp) - 1:
            tail = flow.tail_values(nsub, h)
            # lo + k h rather than hi - j h: identical points for every horizon
            times.extend(lo + (nsub - j) * h for j in range(1, nsub))
            times.append(lo)
            values.extend(tail[1:])
            continue
        hh = (hi - lo) / nsub
        P = values[-1]
        for j in range(1, nsub + 1):
            P = flow.step(seg, P, hh)
            times.append(hi - j * hh if j < nsub else lo)
            values.append(P)
    grid = np.array(times[::-1])
    curves = np.array(values[::-1]).T
    return grid, curves


def _prepare(spec: ProblemSpec) -> AssumptionReport:
    report = check_assumptions(spec)
    if report.case is Case.UNSUPPORTED:
        raise UnsupportedCase("instance satisfies neither the standard nor the singular assumptions")
    return report


def integrate_finite_horizon(spec: ProblemSpec, N: float, a: float = 0.0, sign: int = 1,
                             step: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Finite-horizon solution with ``P(N, .) = 0``.

    Returns ``(grid, curves)`` with ``curves[i, k] = P(grid[k], i)``.  Steps are
    aligned with the coefficient breakpoints.
    """
    report = _prepare(spec)
    if sign not in (1, 2):
        raise ValueError("sign must be 1 or 2")
    if a < 0:
        raise ValidationError("regularization a must be nonnegative")
    if report.case is Case.SINGULAR and not a > 0:
        raise PreconditionViolated("singular instances need a > 0 for the finite-horizon system")
    if not N > 0 or not step > 0:
        raise ValidationError("horizon and step must be positive")
    return _integrate(_Flow(spec, sign, a, report.p_upper), float(N), float(step))


# -- infinite horizon --------------------------------------------------------

class _Horizons:
    """Horizon ladder aligned so that every horizon is ``t_last + k * step``."""

    def __init__(self, spec: ProblemSpec, cfg: SolverConfig):
        self.t_last = float(spec.coeffs.breakpoints[-1])
        self.h = cfg.step
        self.growth = cfg.horizon_growth
        self.N0 = self.align(cfg.horizon0)

    def align(self, N: float) -> float:
        k = max(1, math.ceil((N - self.t_last) / self.h - 1e-9))
        return self.t_last + k * self.h

    def next(self, N: float) -> float:
        return self.align(self.growth * N)


def _window(grid: np.ndarray, curves: np.ndarray, t_max: float):
    keep = grid <= t_max + 1e-9
    return grid[keep], curves[:, keep]


def _solve_sign(spec, cfg, hz, report, sign, a):
    flow = _Flow(spec, sign, a, report.p_upper)
    N = hz.N0
    grid, curves = _integrate(flow, N, hz.h, use_tail=True)
    increments = []
    for _ in range(cfg.max_rounds):
        N_next = hz.next(N)
        grid_n, curves_n = _integrate(flow, N_next, hz.h, use_tail=True)
        diff = curves_n[:, 0] - curves[:, 0]
        inc = float(np.max(np.abs(diff)))
        increments.append(float(diff.min()))
        N, grid, curves = N_next, grid_n, curves_n
        if inc < cfg.horizon_tol:
            g, c = _window(grid, curves, hz.N0)
            return {"grid": g, "curves": c, "horizon": N, "rounds": len(increments),
                    "last_increment": inc, "min_increment": min(increments)}
    raise MaxRoundsExceeded(
        f"horizon loop for P{sign} did not settle after {cfg.max_rounds} rounds "
        f"(last increment {inc:.3g}, horizon {N:.6g})",
        sign=sign, last_increment=inc, horizon=N)


def _solve_sign_singular(spec, cfg, hz, report, sign):
    a = cfg.a0
    prev = _solve_sign(spec, cfg, hz, report, sign, a)
    for rounds in range(1, cfg.max_a_rounds + 1):
        a_next = a * cfg.a_decay
        cur = _solve_sign(spec, cfg, hz, report, sign, a_next)
        inc = float(np.max(np.abs(cur["curves"][:, 0] - prev["curves"][:, 0])))
        a, prev = a_next, cur
        if inc < cfg.a_tol:
            cur.update(a=a, a_rounds=rounds, a_increment=inc)
            return cur
    raise MaxRoundsExceeded(
        f"regularization loop for P{sign} did not settle after {cfg.max_a_rounds} rounds "
        f"(last increment {inc:.3g}, a = {a:.3g})",
        sign=sign, last_increment=inc, a=a)


def _side_condition_min(spec: ProblemSpec, grid, curves, a: float) -> float:
    c = spec.coeffs
    worst = math.inf
    for k, t in enumerate(grid):
        seg = c.segment_index(t)
        for i in range(spec.ell):
            M = curves[i, k] * (c.D[seg, i].T @ c.D[seg, i]) + c.R[seg, i] + a * np.eye(spec.m)
            worst = min(worst, float(np.linalg.eigvalsh(M)[0]))
    return worst


def solve_infinite(spec: ProblemSpec, config: SolverConfig | None = None) -> EsreSolution:
    """Nonnegative infinite-horizon solution by horizon growth (and a -> 0)."""
    report = _prepare(spec)
    cfg = (config or SolverConfig()).resolved(spec, report)
    hz = _Horizons(spec, cfg)
    results = {}
    for sign in (1, 2):
        if report.case is Case.SINGULAR:
            results[sign] = _solve_sign_singular(spec, cfg, hz, report, sign)
        else:
            results[sign] = _solve_sign(spec, cfg, hz, report, sign, 0.0)
            results[sign].update(a=0.0, a_rounds=0, a_increment=0.0)
    r1, r2 = results[1], results[2]
    grid = r1["grid"]
    if grid.shape != r2["grid"].shape or np.max(np.abs(grid - r2["grid"])) > 1e-9:
        raise AssertionError("sign grids disagree")
    P1, P2 = r1["curves"], r2["curves"]

    bound = report.p_upper + BOUND_SLACK
    for name, P in (("P1", P1), ("P2", P2)):
        if P.min() < -NEGATIVE_TOL:
            raise NegativeSolution(f"{name} reaches {P.min():.3g}")
        if P.max() > bound:
            raise BoundViolated(f"{name} reaches {P.max():.6g} above c1/rho = {report.p_upper:.6g}",
                                value=float(P.max()), bound=report.p_upper)
    side = min(_side_condition_min(spec, grid, P1, r1["a"]), _side_condition_min(spec, grid, P2, r2["a"]))
    if not side > 0:
        raise SideConditionViolated(f"R + P D'D + aI has eigenvalue {side:.3g} on the grid")

    a_final = max(r1["a"], r2["a"])
    sol = EsreSolution(
        grid=grid, P1=P1, P2=P2, case=report.case, a_final=a_final, report=report, config=cfg,
        horizon=(r1["horizon"], r2["horizon"]), a_by_sign=(r1["a"], r2["a"]),
    )
    sol.diagnostics = {
        "horizon_rounds": [r1["rounds"], r2["rounds"]],
        "horizon_increment": [r1["last_increment"], r2["last_increment"]],
        "horizon_monotone_margin": max(0.0, -min(r1["min_increment"], r2["min_increment"])),
        "a_rounds": [r1["a_rounds"], r2["a_rounds"]],
        "a_increment": [r1["a_increment"], r2["a_increment"]],
        "side_condition_min_eig": side,
        "stationary_residual": _stationary_residual(spec, sol),
    }
    return sol


def _stationary_residual(spec: ProblemSpec, sol: EsreSolution) -> float:
    """Algebraic residual at the last breakpoint, where the solution is stationary."""
    k = sol.index(float(spec.coeffs.breakpoints[-1]))
    last = spec.coeffs.n_segments - 1
    worst = 0.0
    for sign, a in ((1, sol.a_by_sign[0]), (2, sol.a_by_sign[1])):
        flow = _Flow(spec, sign, a, 0.0)
        res = flow.rhs(last, [float(x) for x in sol.curves(sign)[:, k]])
        worst = max(worst, max(abs(x) for x in res))
    return worst


def value_function(sol: EsreSolution, x: float, i0: int) -> float:
    xp, xm = max(x, 0.0), max(-x, 0.0)
    return float(sol.P1[i0, 0] * xp * xp + sol.P2[i0, 0] * xm * xm)


# -- algebraic equations ---------------------------------------------------

def algebraic_residual(spec: ProblemSpec, P1, P2, a=0.0) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of the stationary equations for constant coefficients.

    ``a`` is one regularization level or a pair (one per sign).
    """
    if spec.coeffs.n_segments != 1:
        raise PreconditionViolated("algebraic equations need time-constant coefficients")
    a_pair = tuple(a) if np.ndim(a) else (a, a)
    out = []
    for sign, P in ((1, P1), (2, P2)):
        flow = _Flow(spec, sign, a_pair[sign - 1], 0.0)
        out.append(np.array(flow.rhs(0, [float(x) for x in np.ravel(P)])))
    return out[0], out[1]


def solve_algebraic(spec: ProblemSpec, seed_solution, a: float = 0.0, tol: float = 1e-10,
                    max_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Newton iteration on the stationary equations seeded from a solve.

    ``seed_solution`` is an ``EsreSolution`` (its t = 0 values are used) or a
    pair of ell-vectors.  Only nonnegative roots are accepted.
    """
    if spec.coeffs.n_segments != 1:
        raise PreconditionViolated("algebraic equations need time-constant coefficients")
    if isinstance(seed_solution, EsreSolution):
        seeds = (seed_solution.P1_0, seed_solution.P2_0)
    else:
        seeds = tuple(np.asarray(s, dtype=float).ravel() for s in seed_solution)
    ell = spec.ell
    roots = []
    for sign, seed in zip((1, 2), seeds):
        flow = _Flow(spec, sign, a, 0.0)

        def F(P, flow=flow):
            return np.array(flow.rhs(0, [float(x) for x in P]))

        P = np.array(seed, dtype=float)
        r = F(P)
        for _ in range(max_iter):
            if np.max(np.abs(r)) < tol:
                break
            J = np.empty((ell, ell))
            for j in range(ell):
                dP = 1e-7 * max(abs(P[j]), 1.0)
                Pp = P.copy()
                Pp[j] += dP
                J[:, j] = (F(Pp) - r) / dP
            try:
                delta = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                raise NewtonDiverged(f"singular Jacobian for P{sign}") from None
            t = 1.0
            norm = np.max(np.abs(r))
            while True:
                trial = P + t * delta
                try:
                    r_trial = F(trial)
                except SideConditionViolated:
                    r_trial = None
                if r_trial is not None and np.max(np.abs(r_trial)) < norm:
                    break
                t *= 0.5
                if t < 1e-10:
                    raise NewtonDiverged(f"line search failed for P{sign} (residual {norm:.3g})",
                                         residual=norm)
            P, r = trial, r_trial
        else:
            if np.max(np.abs(r)) >= tol:
                raise NewtonDiverged(f"Newton for P{sign} stalled at residual {np.max(np.abs(r)):.3g}",
                                     residual=float(np.max(np.abs(r))))
        if P.min() < -CLAMP_TOL:
            raise NegativeRoot(f"Newton for P{sign} converged to a negative root {P.tolist()}",
                               root=float(P.min()))
        roots.append(np.maximum(P, 0.0))
    return roots[0], roots[1]


# -- structural checks -------------------------------------------------------

def _common(grid_a, curves_a, grid_b, curves_b):
    """Values of both curves on the points of ``grid_a`` shared with ``grid_b``."""
    idx = np.searchsorted(grid_b, grid_a)
    idx = np.clip(idx, 0, grid_b.size - 1)
    ok = np.abs(grid_b[idx] - grid_a) < 1e-9
    return curves_a[:, ok], curves_b[:, idx[ok]]


def check_monotonicity(spec: ProblemSpec, config: SolverConfig | None = None,
                       tol: float = MONOTONE_TOL, raise_on_failure: bool = True) -> dict:
    """Horizon ladder {N0, 2N0, 4N0} and, for singular instances, an a-ladder.

    Margins are the largest violation (positive means violated): a decrease in
    N, or an increase as a decreases.
    """
    report = _prepare(spec)
    cfg = (config or SolverConfig()).resolved(spec, report)
    hz = _Horizons(spec, cfg)
    singular = report.case is Case.SINGULAR
    a_base = cfg.a0 if singular else 0.0
    horizons = [hz.N0]
    while len(horizons) < 3:
        horizons.append(hz.align(2.0 * horizons[-1]))
    out = {"horizons": horizons, "horizon_margin": 0.0, "a_values": [], "a_margin": None,
           "P0_by_horizon": []}
    for sign in (1, 2):
        flow = _Flow(spec, sign, a_base, report.p_upper)
        runs = [_integrate(flow, N, hz.h, use_tail=True) for N in horizons]
        out["P0_by_horizon"].append([r[1][:, 0].tolist() for r in runs])
        for (g0, c0), (g1, c1) in zip(runs, runs[1:]):
            small, large = _common(g0, c0, g1, c1)
            out["horizon_margin"] = max(out["horizon_margin"], float(np.max(small - large)))
    if singular:
        a_values = [cfg.a0 * cfg.a_decay ** j for j in range(4)]
        out["a_values"] = a_values
        out["a_margin"] = 0.0
        for sign in (1, 2):
            runs = [_integrate(_Flow(spec, sign, a, report.p_upper), hz.N0, hz.h, use_tail=True)
                    for a in a_values]
            for (_, c_big), (_, c_small) in zip(runs, runs[1:]):
                out["a_margin"] = max(out["a_margin"], float(np.max(c_small - c_big)))
    worst = max(out["horizon_margin"], out["a_margin"] or 0.0)
    out["margin"] = worst
    out["passed"] = worst <= tol
    if raise_on_failure and not out["passed"]:
        raise MonotonicityViolated(
            f"monotone structure violated by {worst:.3g} (step {cfg.step} may be too coarse)",
            margin=worst)
    return out


def positivity_constants(spec: ProblemSpec, report: AssumptionReport) -> dict:
    """Rates of the lower envelopes ``delta/c (1 - exp(-c tau))``."""
    c = spec.coeffs
    qii = np.diag(spec.gen.q)[None, :]
    drift = 2.0 * c.A + np.einsum("kin,kin->ki", c.C, c.C) + qii
    be = c.B + np.einsum("kinm,kin->kim", c.D, c.C)
    be2 = np.einsum("kim,kim->ki", be, be)
    q_min = float(c.Q.min())
    out = {"q_min": q_min}
    if report.case is Case.SINGULAR:
        delta = report.delta
        out.update(delta=delta, c=float(-(drift - be2 / delta).min()))
    else:
        delta = min(report.delta, q_min)
        out.update(delta=delta, c=float(-(drift - 2 * report.c1 / (delta * report.rho) * be2).min()))
    return out


def check_positivity(spec: ProblemSpec, sol: EsreSolution, raise_on_failure: bool = True) -> dict:
    """Strict positivity on the window, plus the lower envelope where available."""
    c = spec.coeffs
    if not c.Q.min() > 0:
        raise PreconditionViolated("positivity needs a uniformly positive state weight")
    consts = positivity_constants(spec, sol.report)
    out = {"min_P1": float(sol.P1.min()), "min_P2": float(sol.P2.min()), **consts}
    strict = min(out["min_P1"], out["min_P2"])
    out["strict_margin"] = strict
    env_margin = math.inf
    tol = 1e-8
    for sign, N in ((1, sol.horizon[0]), (2, sol.horizon[1])):
        env = consts["delta"] / consts["c"] * (1.0 - np.exp(-consts["c"] * (N - sol.grid)))
        env_margin = min(env_margin, float(np.min(sol.curves(sign) - env[None, :])))
    out["envelope_margin"] = env_margin
    out["passed"] = strict > 0 and env_margin >= -tol
    if raise_on_failure and not out["passed"]:
        raise PositivityViolated(
            f"positivity failed (min P {strict:.3g}, envelope margin {env_margin:.3g})",
            strict_margin=strict, envelope_margin=env_margin)
    return out


# -- export ------------------------------------------------------------------

def export_solution(sol: EsreSolution, out_dir, stem: str = "solution") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "regime", "P1", "P2"])
            for k, t in enumerate(sol.grid):
                for i in range(sol.P1.shape[0]):
                    w.writerow([repr(float(t)), i, repr(float(sol.P1[i, k])), repr(float(sol.P2[i, k]))])
        meta_path = out_dir / f"{stem}.json"
        meta_path.write_text(json.dumps(sol.metadata(), indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    except OSError as exc:
        raise InputOutputError(f"cannot write to {out_dir}: {exc.strerror}") from None
    return csv_path, meta_path
