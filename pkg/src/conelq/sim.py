"""Optimal feedback policy and Monte Carlo evaluation of the closed loop.

Paths are simulated in fixed-size blocks, vectorized across the paths of a
block.  Every path owns a random generator derived from ``(seed, path)``
(antithetic pairs share one), and all cross-path reductions run in block
order, so results do not depend on how many worker threads are used.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cone import distance_to_cone, eval_H
from .errors import ExplodedPath, InputOutputError, NoDecay, ValidationError
from .esre import EsreSolution
from .model import ProblemSpec, RegimeGenerator, check_assumptions, coefficients_at

NOISE_CHUNK = 1024


@dataclass(frozen=True)
class FeedbackPolicy:
    """``u(t, X, i) = V1[i, k] X^+ + V2[i, k] X^-`` with ``k`` the grid cell of t."""

    spec: ProblemSpec
    grid: np.ndarray
    V1: np.ndarray   # (ell, len(grid), m)
    V2: np.ndarray
    label: str = "optimal"

    def index(self, t: float) -> int:
        k = int(np.searchsorted(self.grid, t, side="right") - 1)
        return min(max(k, 0), self.grid.size - 1)

    def gains(self, t: float, i: int) -> tuple[np.ndarray, np.ndarray]:
        k = self.index(t)
        return self.V1[i, k], self.V2[i, k]

    def control(self, t: float, X: float, i: int) -> np.ndarray:
        v1, v2 = self.gains(t, i)
        return v1 * max(X, 0.0) + v2 * max(-X, 0.0)

    def control_cost_bound(self) -> float:
        """Largest ``v'Rv`` over cached gains, grid cells and regimes."""
        worst = 0.0
        for k, t in enumerate(self.grid):
            for i in range(self.spec.ell):
                R = coefficients_at(self.spec, t, i).R
                for V in (self.V1, self.V2):
                    v = V[i, k]
                    worst = max(worst, float(v @ R @ v))
        return worst

    def max_cone_distance(self) -> float:
        cone = self.spec.cone
        return max(distance_to_cone(cone, v) for V in (self.V1, self.V2)
                   for v in V.reshape(-1, V.shape[-1]))


def build_policy(spec: ProblemSpec, sol: EsreSolution) -> FeedbackPolicy:
    ell, T = sol.P1.shape
    V1 = np.zeros((ell, T, spec.m))
    V2 = np.zeros((ell, T, spec.m))
    a1, a2 = sol.a_by_sign
    for k, t in enumerate(sol.grid):
        for i in range(ell):
            c = coefficients_at(spec, t, i)
            V1[i, k] = eval_H(1, float(sol.P1[i, k]), c, spec.cone, a1).minimizer
            V2[i, k] = eval_H(2, float(sol.P2[i, k]), c, spec.cone, a2).minimizer
    return FeedbackPolicy(spec, sol.grid.copy(), V1, V2)


def zero_policy(spec: ProblemSpec) -> FeedbackPolicy:
    z = np.zeros((spec.ell, 1, spec.m))
    return FeedbackPolicy(spec, np.array([0.0]), z, z.copy(), label="zero")


def perturb_policy(policy: FeedbackPolicy, epsilon: float = 0.0, mode: str = "scale") -> FeedbackPolicy:
    """Admissible but (generally) suboptimal variants of a policy.

    ``scale`` multiplies both gains by ``1 + epsilon``; ``swap`` exchanges them.
    Both keep every gain inside the cone.
    """
    if mode == "scale":
        if epsilon < 0:
            raise ValidationError("scale perturbation needs epsilon >= 0")
        f = 1.0 + epsilon
        return replace(policy, V1=policy.V1 * f, V2=policy.V2 * f, label=f"scale({epsilon:g})")
    if mode == "swap":
        return replace(policy, V1=policy.V2.copy(), V2=policy.V1.copy(), label="swap")
    raise ValidationError(f"unknown perturbation mode {mode!r}")


# -- regime paths ------------------------------------------------------------

def sample_regime_jumps(gen: RegimeGenerator, i0: int, T: float, rng: np.random.Generator):
    """Exact chain path on [0, T]: jump times (starting with 0) and states."""
    q = gen.q
    times, states = [0.0], [int(i0)]
    t, i = 0.0, int(i0)
    while True:
        rate = -q[i, i]
        if not rate > 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > T:
            break
        weights = np.where(np.arange(gen.ell) == i, 0.0, q[i])
        cum = np.cumsum(weights) / rate
        i = int(min(np.searchsorted(cum, rng.random() * cum[-1], side="right"), gen.ell - 1))
        times.append(t)
        states.append(i)
    return np.array(times), np.array(states, dtype=int)


def sample_regime_path(gen: RegimeGenerator, i0: int, T: float, dt: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Regime at ``k dt`` for ``k = 0..T/dt`` (right-continuous lookup)."""
    n = _steps(T, dt)
    times, states = sample_regime_jumps(gen, i0, T, rng)
    grid = np.arange(n + 1) * dt
    return states[np.searchsorted(times, grid, side="right") - 1]


# -- simulation --------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    T: float | None = None
    paths: int = 10_000
    seed: int = 0
    antithetic: bool = False
    block_size: int = 4096
    workers: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if self.paths < 2:
            raise ValidationError("need at least 2 paths")
        if self.antithetic and self.paths % 2:
            raise ValidationError("antithetic sampling needs an even path count")
        if self.block_size < 2 or self.block_size % 2:
            raise ValidationError("block_size must be an even integer >= 2")
        if self.T is not None:
            _steps(self.T, self.dt)
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    def resolved(self, spec: ProblemSpec) -> SimConfig:
        if self.T is not None:
            return self
        T = 4 * 10.0 / check_assumptions(spec).rho
        T = math.ceil(T / self.dt - 1e-9) * self.dt
        return replace(self, T=T)

    def to_dict(self) -> dict:
        return {"dt": self.dt, "T": self.T, "paths": self.paths, "seed": self.seed,
                "antithetic": self.antithetic, "block_size": self.block_size}


def _steps(T: float, dt: float) -> int:
    n = round(T / dt)
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValidationError(f"T = {T} is not a positive multiple of dt = {dt}")
    return int(n)


@dataclass
class CostEstimate:
    mean: float
    stderr: float
    tail_bound: float
    decay_rate: float
    paths: int
    dt: float
    T: float
    seed: int
    times: np.ndarray = field(repr=False, default=None)
    second_moment: np.ndarray = field(repr=False, default=None)
    path_costs: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"mean": _finite(self.mean), "stderr": _finite(self.stderr),
                "tail_bound": _finite(self.tail_bound), "decay_rate": _finite(self.decay_rate),
                "paths": self.paths, "dt": self.dt, "T": self.T, "seed": self.seed}


def _finite(x: float):
    return float(x) if math.isfinite(x) else None


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


class _Tables:
    """Coefficients and gains indexed by (step, regime)."""

    def __init__(self, spec: ProblemSpec, policy: FeedbackPolicy, n: int, dt: float):
        c = spec.coeffs
        t = np.arange(n + 1) * dt
        self.seg = np.searchsorted(c.breakpoints, t, side="right") - 1
        self.gain = np.clip(np.searchsorted(policy.grid, t, side="right") - 1, 0, policy.grid.size - 1)
        self.A, self.B, self.C, self.D, self.Q, self.R = c.A, c.B, c.C, c.D, c.Q, c.R
        self.V1, self.V2 = policy.V1, policy.V2
        self.scalar = spec.m == 1 and spec.n == 1
        if self.scalar:
            self.B, self.C = c.B[..., 0], c.C[..., 0]
            self.D, self.R = c.D[..., 0, 0], c.R[..., 0, 0]
            self.V1, self.V2 = policy.V1[..., 0], policy.V2[..., 0]


def _simulate_block(spec, tables, cfg, n, first, count, limit):
    """Paths ``first .. first+count-1``; returns costs, X(T), and sums of X^2 per step."""
    sqdt = math.sqrt(cfg.dt)
    dt = cfg.dt
    if cfg.antithetic:
        streams = [_rng(cfg.seed, (first + j) // 2) for j in range(0, count, 2)]
    else:
        streams = [_rng(cfg.seed, first + j) for j in range(count)]
    switching = bool(np.any(np.diag(spec.gen.q) < 0))
    regimes = np.empty((len(streams), n + 1), dtype=int)
    for j, g in enumerate(streams):
        regimes[j] = sample_regime_path(spec.gen, spec.i0, n * dt, dt, g) if switching else spec.i0
    sign = None
    if cfg.antithetic:
        regimes = np.repeat(regimes, 2, axis=0)
        sign = np.tile([1.0, -1.0], count // 2)
    rows = np.arange(count)

    X = np.full(count, float(spec.x0))
    J = np.zeros(count)
    m2 = np.empty(n + 1)
    noise_dim = spec.n
    base = chunk = 0
    Z = None
    for k in range(n):
        if Z is None or k - base == chunk:
            base = k
            size = chunk = min(NOISE_CHUNK, n - k)
            Z = np.stack([g.standard_normal((size, noise_dim)) for g in streams])
            if cfg.antithetic:
                Z = np.repeat(Z, 2, axis=0) * sign[:, None, None]
            Z *= sqdt
            if tables.scalar:
                Z = np.ascontiguousarray(Z[:, :, 0].T)
        dW = Z[k - base] if tables.scalar else Z[:, k - base]
        # a single chain state indexes as a scalar, which keeps the tables scalar too
        reg = regimes[:, k] if switching else spec.i0
        seg, gk = tables.seg[k], tables.gain[k]
        m2[k] = float(np.sum(X * X))
        Xp = np.maximum(X, 0.0)
        Xm = np.maximum(-X, 0.0)
        A = tables.A[seg, reg]
        Q = tables.Q[seg, reg]
        if tables.scalar:
            u = tables.V1[reg, gk] * Xp + tables.V2[reg, gk] * Xm
            J += (Q * X * X + tables.R[seg, reg] * u * u) * dt
            X = X + (A * X + tables.B[seg, reg] * u) * dt \
                + (tables.C[seg, reg] * X + tables.D[seg, reg] * u) * dW
        else:
            u = tables.V1[reg, gk] * Xp[:, None] + tables.V2[reg, gk] * Xm[:, None]
            R = tables.R[seg, reg]
            J += (Q * X * X + np.einsum("pm,pmk,pk->p", u, R, u)) * dt
            vol = tables.C[seg, reg] * X[:, None] + np.einsum("pnm,pm->pn", tables.D[seg, reg], u)
            X = X + (A * X + np.einsum("pm,pm->p", tables.B[seg, reg], u)) * dt \
                + np.einsum("pn,pn->p", vol, dW)
        if not np.abs(X).max() <= limit:
            bad = int(rows[~(np.abs(X) <= limit)][0]) + first
            raise ExplodedPath(f"path {bad} left |X| <= {limit:.3g} at t = {(k + 1) * dt:.6g}; "
                               "reduce dt or check the assumptions", path=bad)
    m2[n] = float(np.sum(X * X))
    return J, X, m2


def _run(spec: ProblemSpec, policy: FeedbackPolicy, cfg: SimConfig):
    cfg = cfg.resolved(spec)
    n = _steps(cfg.T, cfg.dt)
    tables = _Tables(spec, policy, n, cfg.dt)
    limit = 1e6 * (1.0 + abs(spec.x0))
    blocks = [(s, min(cfg.block_size, cfg.paths - s)) for s in range(0, cfg.paths, cfg.block_size)]

    def work(b):
        return _simulate_block(spec, tables, cfg, n, b[0], b[1], limit)

    if cfg.workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]
    J = np.concatenate([r[0] for r in results])
    XT = np.concatenate([r[1] for r in results])
    m2 = np.zeros(n + 1)
    for r in results:
        m2 += r[2]
    m2 /= cfg.paths
    return cfg, n, J, XT, m2


def fit_decay_rate(times: np.ndarray, m2: np.ndarray) -> float:
    """Minus the least-squares slope of ``log m2`` over the last half of the window."""
    if not np.any(m2 > 0):
        return math.inf
    T = times[-1]
    sel = (times >= T / 2) & (m2 > 0)
    if sel.sum() < 2:
        return math.inf
    slope = np.polyfit(times[sel], np.log(m2[sel]), 1)[0]
    return float(-slope)


def simulate_cost(spec: ProblemSpec, policy: FeedbackPolicy, simconfig: SimConfig | None = None) -> CostEstimate:
    cfg, n, J, _, m2 = _run(spec, policy, simconfig or SimConfig())
    times = np.arange(n + 1) * cfg.dt
    samples = 0.5 * (J[0::2] + J[1::2]) if cfg.antithetic else J
    mean = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / math.sqrt(samples.size))
    rate = fit_decay_rate(times, m2)
    if m2[-1] == 0:
        tail = 0.0
    elif rate > 0:
        c1 = check_assumptions(spec).c1
        tail = (c1 + policy.control_cost_bound()) * float(m2[-1]) / rate
    else:
        tail = math.inf
    return CostEstimate(mean, stderr, tail, rate, cfg.paths, cfg.dt, float(cfg.T), cfg.seed,
                        times=times, second_moment=m2, path_costs=J)


@dataclass
class DecayReport:
    times: np.ndarray
    second_moment: np.ndarray
    rate: float
    passed: bool

    def to_dict(self) -> dict:
        return {"rate": _finite(self.rate), "passed": self.passed,
                "m2_T": float(self.second_moment[-1]),
                "m2_T_quarter": float(self.second_moment[(self.times.size - 1) // 4])}


def decay_report(times: np.ndarray, m2: np.ndarray) -> DecayReport:
    quarter = m2[(times.size - 1) // 4]
    passed = bool(m2[-1] < quarter or not np.any(m2 > 0))
    return DecayReport(times, m2, fit_decay_rate(times, m2), passed)


def stability_diagnostic(spec: ProblemSpec, policy: FeedbackPolicy, simconfig: SimConfig | None = None,
                         raise_on_failure: bool = True) -> DecayReport:
    """Sample second moment of the closed-loop state and its decay rate."""
    cfg, n, _, _, m2 = _run(spec, policy, simconfig or SimConfig())
    rep = decay_report(np.arange(n + 1) * cfg.dt, m2)
    if raise_on_failure and not rep.passed:
        raise NoDecay(f"E[X(T)^2] = {m2[-1]:.3g} did not fall below E[X(T/4)^2]", rate=rep.rate)
    return rep


def write_path_costs(est: CostEstimate, path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "cost"])
            for j, c in enumerate(est.path_costs):
                w.writerow([j, repr(float(c))])
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc.strerror}") from None
    return path
