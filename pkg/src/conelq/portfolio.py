"""Tracking a target wealth level as a cone-constrained LQ problem.

Wealth follows ``dX = (r X + pi'b) dt + pi' sigma dW`` with ``b = mu - r 1``.
With ``Y = e^{-int rho} (X - d e^{int r})`` and ``pi~ = e^{-int rho} pi`` the
discounted tracking error cost becomes the LQ cost ``E int Y^2 + lam |pi~|^2``
for the state equation

    dY = ((r - rho) Y + pi~'b) dt + pi~' sigma dW,    Y(0) = x0 - d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IllPosed, PreconditionViolated, SingularSystem, ValidationError
from .esre import EsreSolution, SolverConfig, solve_infinite, value_function
from .model import (
    EIG_TOL,
    CoefficientSet,
    ConeVariant,
    ConstraintCone,
    ProblemSpec,
    RegimeGenerator,
    cone_from_dict,
    read_json,
    validate_generator,
)
from .sim import FeedbackPolicy, build_policy


@dataclass(frozen=True)
class MarketSpec:
    """Piecewise-constant market on a breakpoint grid (segment axis first).

    Shapes: ``r``, ``rho_disc`` are (K, ell); ``mu`` is (K, ell, m);
    ``sigma`` is (K, ell, m, n).
    """

    breakpoints: np.ndarray
    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    rho_disc: np.ndarray
    lam: float
    d: float
    cone: ConstraintCone
    gen: RegimeGenerator
    x0: float = 0.0
    i0: int = 0

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float).ravel()
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim != 4:
            raise ValidationError("sigma must have shape (K, ell, m, n)")
        K, ell, m, n = sigma.shape
        for name, shape in (("r", (K, ell)), ("rho_disc", (K, ell)), ("mu", (K, ell, m))):
            arr = np.asarray(getattr(self, name), dtype=float)
            try:
                arr = arr.reshape(shape)
            except ValueError:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}") from None
            object.__setattr__(self, name, arr)
        if bp.size != K:
            raise ValidationError(f"{bp.size} breakpoints for {K} segments")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "sigma", sigma)
        if self.cone.m != m:
            raise ValidationError(f"cone dimension {self.cone.m} != asset count {m}")
        if self.gen.ell != ell:
            raise ValidationError(f"market has {ell} regimes, generator has {self.gen.ell}")

    @property
    def m(self) -> int:
        return self.sigma.shape[2]

    @property
    def n(self) -> int:
        return self.sigma.shape[3]

    @property
    def ell(self) -> int:
        return self.sigma.shape[1]

    @property
    def b(self) -> np.ndarray:
        return self.mu - self.r[..., None]

    @classmethod
    def constant(cls, r, mu, sigma, rho_disc, lam=0.0, d=0.0, cone=None, gen=None,
                 x0=0.0, i0=0) -> MarketSpec:
        """Time-constant market; scalars are promoted as in ``CoefficientSet.constant``."""
        gen = gen if gen is not None else RegimeGenerator.single()
        ell = gen.ell

        def per_regime(x, base_ndim):
            x = np.asarray(x, dtype=float)
            if x.ndim == base_ndim + 1 and x.shape[0] == ell:
                return x
            while x.ndim < base_ndim:
                x = x[None]
            return np.broadcast_to(x, (ell,) + x.shape)

        sigma = per_regime(sigma, 2)
        cone = cone if cone is not None else ConstraintCone.full(sigma.shape[1])
        return cls(np.array([0.0]), per_regime(r, 0)[None], per_regime(mu, 1)[None], sigma[None],
                   per_regime(rho_disc, 0)[None], float(lam), float(d), cone, gen, float(x0), int(i0))


def to_lq(market: MarketSpec) -> ProblemSpec:
    c5 = float((market.rho_disc - market.r).min())
    if not c5 > 0:
        raise IllPosed(f"discount minus interest rate reaches {c5:.6g}; it must stay positive", c5=c5)
    if market.lam < 0:
        raise IllPosed("control penalty lambda must be nonnegative")
    if market.lam == 0:
        ss = np.einsum("kimn,kipn->kimp", market.sigma, market.sigma)
        lo = float(np.linalg.eigvalsh(ss).min())
        if not lo > EIG_TOL:
            raise IllPosed(f"lambda = 0 needs sigma sigma' uniformly positive (min eigenvalue {lo:.3g})")
    K, ell, m, n = market.sigma.shape
    coeffs = CoefficientSet(
        market.breakpoints,
        market.r - market.rho_disc,
        market.b,
        np.zeros((K, ell, n)),
        np.swapaxes(market.sigma, -1, -2),
        np.ones((K, ell)),
        market.lam * np.broadcast_to(np.eye(m), (K, ell, m, m)),
    )
    return ProblemSpec(coeffs, market.gen, market.cone, market.x0 - market.d, market.i0)


def _is_scalar_constant(market: MarketSpec) -> bool:
    return market.m == 1 and market.n == 1 and market.breakpoints.size == 1


def _is_half_line(cone: ConstraintCone) -> bool:
    if cone.m != 1:
        return False
    if cone.variant is ConeVariant.ORTHANT:
        return True
    if cone.variant is ConeVariant.GENERATED:
        g = cone.generators.ravel()
        return g.size > 0 and bool(np.all(g > 0))
    return False


def _is_line(cone: ConstraintCone) -> bool:
    if cone.m != 1:
        return False
    if cone.variant is ConeVariant.FULL:
        return True
    if cone.variant is ConeVariant.GENERATED:
        g = cone.generators.ravel()
        return bool(np.any(g > 0) and np.any(g < 0))
    return False


def closed_form_single(market: MarketSpec) -> float:
    """``1 / (2(rho - r) + (b^+)^2 / sigma^2)`` for one asset, one regime, no shorting."""
    if not (_is_scalar_constant(market) and market.ell == 1 and market.lam == 0
            and _is_half_line(market.cone)):
        raise PreconditionViolated(
            "single closed form needs m = n = 1, one regime, constant data, lambda = 0, cone R+")
    rho, r = float(market.rho_disc[0, 0]), float(market.r[0, 0])
    b, sigma = float(market.b[0, 0, 0]), float(market.sigma[0, 0, 0, 0])
    bp = max(b, 0.0)
    return 1.0 / (2.0 * (rho - r) + bp * bp / (sigma * sigma))


def closed_form_two_regime(market: MarketSpec) -> np.ndarray:
    """Positive solution of the 2x2 linear system for two unconstrained regimes."""
    if not (_is_scalar_constant(market) and market.ell == 2 and market.lam == 0
            and _is_line(market.cone) and np.all(market.r == 0)):
        raise PreconditionViolated(
            "two-regime closed form needs m = n = 1, two regimes, constant data, r = lambda = 0, cone R")
    q = market.gen.q
    g = [2.0 * market.rho_disc[0, i] + market.b[0, i, 0] ** 2 / market.sigma[0, i, 0, 0] ** 2
         for i in range(2)]
    det = (g[0] - q[0, 0]) * (g[1] - q[1, 1]) - q[0, 1] * q[1, 0]
    if not det > 0:
        raise SingularSystem(f"determinant {det:.3g} is not positive", det=det)
    P = np.array([g[1] + q[0, 1] + q[1, 0], g[0] + q[0, 1] + q[1, 0]]) / det
    if not np.all(P > 0):
        raise SingularSystem(f"solution {P.tolist()} is not positive")
    return P


@dataclass
class TrackingSolution:
    market: MarketSpec
    lq_spec: ProblemSpec
    lq_solution: EsreSolution
    P2_0: np.ndarray
    policy: FeedbackPolicy
    above_target: bool


def solve_tracking(market: MarketSpec, config: SolverConfig | None = None) -> TrackingSolution:
    """Solve the transformed problem and build its feedback.

    For lambda = 0 the gains are evaluated without regularization: the
    limit P is positive, so ``P sigma sigma'`` is already invertible.
    """
    spec = to_lq(market)
    sol = solve_infinite(spec, config)
    if market.lam == 0:
        sol_for_policy = EsreSolution(sol.grid, sol.P1, sol.P2, sol.case, 0.0, sol.report,
                                      sol.config, sol.horizon, (0.0, 0.0), sol.diagnostics)
    else:
        sol_for_policy = sol
    policy = build_policy(spec, sol_for_policy)
    return TrackingSolution(market, spec, sol, sol.P2_0.copy(), policy, bool(market.x0 >= market.d))


def accumulated_rate(market: MarketSpec, rate: np.ndarray, t: float, i: int) -> float:
    """``int_0^t rate(s, i) ds`` in a fixed regime ``i``."""
    bp = market.breakpoints
    total = 0.0
    for k in range(bp.size):
        lo = bp[k]
        hi = bp[k + 1] if k + 1 < bp.size else math.inf
        if t <= lo:
            break
        total += rate[k, i] * (min(t, hi) - lo)
    return total


def _factors(market, t, i, growth, discount):
    if growth is None:
        growth = math.exp(accumulated_rate(market, market.r, t, i))
    if discount is None:
        discount = math.exp(-accumulated_rate(market, market.rho_disc, t, i))
    return growth, discount


def transformed_control(track: TrackingSolution, t: float, X: float, i: int,
                        growth: float | None = None, discount: float | None = None) -> np.ndarray:
    """Optimal ``pi~ = v1 Y^+ + v2 Y^-`` at wealth X, with ``Y = discount (X - d growth)``.

    ``growth = e^{int r}`` and ``discount = e^{-int rho}`` along the realized
    regime path; by default they are accumulated in the fixed regime ``i``.
    """
    growth, discount = _factors(track.market, t, i, growth, discount)
    Y = discount * (X - track.market.d * growth)
    return track.policy.control(t, Y, i)


def optimal_portfolio(track: TrackingSolution, t: float, X: float, i: int,
                      growth: float | None = None, discount: float | None = None) -> np.ndarray:
    """Optimal wealth-space portfolio ``pi = e^{int rho} pi~``.

    Equals ``v1 (X - d growth)^+ + v2 (X - d growth)^-``; it coincides with
    the transformed control at t = 0.
    """
    growth, discount = _factors(track.market, t, i, growth, discount)
    return transformed_control(track, t, X, i, growth, discount) / discount


def tracking_report(track: TrackingSolution) -> dict:
    m = track.market
    checks = []
    try:
        expected = closed_form_single(m)
        got = float(track.P2_0[0])
        checks.append({"name": "closed_form_single", "expected": expected, "got": got,
                       "abs_err": abs(got - expected)})
    except PreconditionViolated:
        pass
    try:
        expected = closed_form_two_regime(m)
        for i in range(2):
            got = float(track.P2_0[i])
            checks.append({"name": f"closed_form_two_regime[{i}]", "expected": float(expected[i]),
                           "got": got, "abs_err": abs(got - float(expected[i]))})
    except PreconditionViolated:
        pass
    return {
        "P2_per_regime": track.P2_0.tolist(),
        "P1_per_regime": track.lq_solution.P1_0.tolist(),
        "value_at_x0": value_function(track.lq_solution, m.x0 - m.d, m.i0),
        "above_target": track.above_target,
        "case": track.lq_solution.case.value,
        "a_final": track.lq_solution.a_final,
        "closed_form_checks": checks,
    }


# -- JSON --------------------------------------------------------------------

def market_from_dict(d: dict) -> MarketSpec:
    """Parse ``{dims, generator, breakpoints, regimes[i][k] = {r, mu, sigma, rho}, lambda, d, cone, initial}``."""
    try:
        dims = d["dims"]
        m, n, ell = int(dims["m"]), int(dims["n"]), int(dims["ell"])
        bp = np.asarray(d.get("breakpoints", [0.0]), dtype=float)
        K = bp.size
        segs = d["regimes"]
        if len(segs) != ell or any(len(s) != K for s in segs):
            raise ValidationError(f"regimes must be {ell} regimes x {K} segments")

        def grab(key, shape):
            vals = [[segs[i][k][key] for i in range(ell)] for k in range(K)]
            return np.asarray(vals, dtype=float).reshape((K, ell) + shape)

        gen = RegimeGenerator(np.asarray(d.get("generator", [[0.0]]), dtype=float).reshape(ell, ell))
        init = d.get("initial", {})
        return MarketSpec(bp, grab("r", ()), grab("mu", (m,)), grab("sigma", (m, n)), grab("rho", ()),
                          float(d.get("lambda", 0.0)), float(d.get("d", 0.0)),
                          cone_from_dict(d.get("cone", {}), m), gen,
                          float(init.get("x", 0.0)), int(init.get("regime", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed market spec: {exc!r}") from None


def market_to_dict(market: MarketSpec) -> dict:
    K, ell = market.r.shape
    return {
        "dims": {"m": market.m, "n": market.n, "ell": ell},
        "generator": market.gen.q.tolist(),
        "breakpoints": market.breakpoints.tolist(),
        "regimes": [[{"r": float(market.r[k, i]), "mu": market.mu[k, i].tolist(),
                      "sigma": market.sigma[k, i].tolist(), "rho": float(market.rho_disc[k, i])}
                     for k in range(K)] for i in range(ell)],
        "lambda": market.lam,
        "d": market.d,
        "cone": market.cone.to_dict(),
        "initial": {"x": market.x0, "regime": market.i0},
    }


def load_market(path) -> MarketSpec:
    market = market_from_dict(read_json(path))
    validate_generator(market.gen)
    return market

