"""Constrained Hamiltonians and cone projections.

For a scalar ``P`` the two Hamiltonians are

    H_sign(P) = inf_{v in cone} v'Mv + 2 e v's,    e = +1 (sign 1), -1 (sign 2)

with ``M = P D'D + R + aI`` and ``s = P (B + D'C)``.  Writing ``M = Rt'Rt``
(``Rt`` upper triangular) the objective is ``|Rt v - p|^2 - |p|^2`` with
``p = -e Rt^{-T} s``, so the minimizer is obtained by projecting ``p`` onto
the transformed cone ``Rt Gamma`` and mapping back.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import FaceLimitExceeded, NonConvergence, NotPositiveDefinite
from .model import Coefficients, ConeVariant, ConstraintCone

PD_TOL = 1e-12
DEGENERATE_GENERATOR = 1e-12


@dataclass(frozen=True)
class HamiltonianEval:
    value: float
    minimizer: np.ndarray
    weight_factor: np.ndarray


def nnls(G: np.ndarray, p: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Lawson-Hanson active set method for ``min |G x - p|`` with ``x >= 0``.

    Returns the weight vector ``x``.  ``max_iter`` caps the total number of
    inner least-squares solves (default ``100 * k``).
    """
    G = np.asarray(G, dtype=float)
    p = np.asarray(p, dtype=float)
    k = G.shape[1]
    x = np.zeros(k)
    if k == 0:
        return x
    if max_iter is None:
        max_iter = 100 * k
    scale = max(1.0, float(np.abs(G).max()) * float(np.abs(p).max(initial=0.0)))
    tol = 10 * np.finfo(float).eps * max(G.shape) * scale

    passive = np.zeros(k, dtype=bool)
    excluded = np.zeros(k, dtype=bool)
    w = G.T @ p
    iterations = 0
    while True:
        candidates = ~passive & ~excluded & (w > tol)
        if not candidates.any():
            return x
        j = int(np.argmax(np.where(candidates, w, -np.inf)))
        passive[j] = True
        while True:
            iterations += 1
            if iterations > max_iter:
                raise NonConvergence(f"NNLS exceeded {max_iter} iterations", k=k)
            z = np.zeros(k)
            z[passive] = np.linalg.lstsq(G[:, passive], p, rcond=None)[0]
            if np.all(z[passive] > 0):
                break
            if z[j] <= 0 and x[j] == 0:
                # entering column cannot improve the fit (roundoff); skip it
                passive[j] = False
                excluded[j] = True
                z = None
                break
            bad = np.flatnonzero(passive & (z <= 0))
            ratios = x[bad] / (x[bad] - z[bad])
            alpha = ratios.min()
            x = x + alpha * (z - x)
            # the blocking index must leave even if roundoff kept it positive
            passive[bad[np.argmin(ratios)]] = False
            passive &= x > 0
            x[~passive] = 0.0
        if z is None:
            continue
        x = z
        excluded[:] = False
        w = G.T @ (p - G @ x)


def project_cone(cone: ConstraintCone, p) -> np.ndarray:
    """Euclidean projection of ``p`` onto ``cone``."""
    p = np.asarray(p, dtype=float)
    if cone.variant is ConeVariant.FULL:
        return p.copy()
    if cone.variant is ConeVariant.ORTHANT:
        return np.maximum(p, 0.0)
    G = cone.generators
    return G @ nnls(G, p)


def distance_to_cone(cone: ConstraintCone, v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.linalg.norm(v - project_cone(cone, v)))


def is_symmetric(cone: ConstraintCone, tol: float = 1e-9) -> bool:
    """True when ``-cone == cone``."""
    if cone.variant is ConeVariant.FULL:
        return True
    G = cone.generator_matrix()
    if G.shape[1] == 0:
        return True
    scale = np.linalg.norm(G, axis=0)
    return all(distance_to_cone(cone, -G[:, j]) <= tol * scale[j] for j in range(G.shape[1]))


def weight_matrix(P: float, coeffs: Coefficients, a: float = 0.0) -> np.ndarray:
    D = coeffs.D
    return P * (D.T @ D) + coeffs.R + a * np.eye(coeffs.R.shape[0])


def linear_term(P: float, coeffs: Coefficients) -> np.ndarray:
    # Lambda = 0 for deterministic coefficients
    return P * (coeffs.B + coeffs.D.T @ coeffs.C)


def factor_weight(P: float, coeffs: Coefficients, a: float = 0.0) -> np.ndarray:
    """Upper-triangular ``Rt`` with ``Rt'Rt = P D'D + R + aI``."""
    M = weight_matrix(P, coeffs, a)
    lam_min = float(np.linalg.eigvalsh(M)[0])
    if not lam_min > PD_TOL:
        raise NotPositiveDefinite(
            f"P D'D + R + aI is not positive definite (min eigenvalue {lam_min:.3g})",
            P=P, a=a, min_eig=lam_min)
    return np.linalg.cholesky(M).T


def ray_signs(cone: ConstraintCone) -> tuple[bool, bool]:
    """For m = 1: whether the cone contains +1 and -1 directions."""
    if cone.variant is ConeVariant.FULL:
        return True, True
    if cone.variant is ConeVariant.ORTHANT:
        return True, False
    g = cone.generators[0]
    return bool(np.any(g > 0)), bool(np.any(g < 0))


def scalar_hamiltonian(sign: int, s: float, M: float, pos: bool, neg: bool) -> tuple[float, float]:
    """(value, minimizer) of ``inf_v M v^2 + 2 e v s`` over a 1-d cone."""
    if not M > PD_TOL:
        raise NotPositiveDefinite(f"weight {M:.3g} is not positive", min_eig=M)
    v = -s / M if sign == 1 else s / M
    if (v > 0 and pos) or (v < 0 and neg) or v == 0:
        return -s * s / M, v
    return 0.0, 0.0


def eval_H(sign: int, P: float, coeffs: Coefficients, cone: ConstraintCone,
           a: float = 0.0) -> HamiltonianEval:
    if sign not in (1, 2):
        raise ValueError("sign must be 1 or 2")
    s = linear_term(P, coeffs)
    if s.size == 1:
        M = float(weight_matrix(P, coeffs, a)[0, 0])
        value, v = scalar_hamiltonian(sign, float(s[0]), M, *ray_signs(cone))
        return HamiltonianEval(value, np.array([v]), np.array([[math.sqrt(M)]]))

    Rt = factor_weight(P, coeffs, a)
    p = np.linalg.solve(Rt.T, s)
    if sign == 1:
        p = -p
    if cone.variant is ConeVariant.FULL:
        w = p
        v = np.linalg.solve(Rt, w)
    else:
        G = cone.generator_matrix()
        Gt = Rt @ G
        keep = np.linalg.norm(Gt, axis=0) > DEGENERATE_GENERATOR * np.linalg.norm(Rt)
        weights = nnls(Gt[:, keep], p)
        w = Gt[:, keep] @ weights
        v = G[:, keep] @ weights
    diff = w - p
    value = min(float(diff @ diff - p @ p), 0.0)
    return HamiltonianEval(value, v, Rt)


def objective(sign: int, v, P: float, coeffs: Coefficients, a: float = 0.0) -> float:
    v = np.asarray(v, dtype=float)
    e = 1.0 if sign == 1 else -1.0
    return float(v @ weight_matrix(P, coeffs, a) @ v + 2 * e * v @ linear_term(P, coeffs))


def brute_force_H(sign: int, P: float, coeffs: Coefficients, cone: ConstraintCone,
                  a: float = 0.0, max_dim: int = 4, max_generators: int = 6) -> float:
    """Minimum over the cone by enumerating faces.

    Each linearly independent subset of generators spans a face; the
    stationary point of the quadratic restricted to that span is kept when its
    generator weights are nonnegative.  The apex 0 is always a candidate.
    """
    M = weight_matrix(P, coeffs, a)
    e = 1.0 if sign == 1 else -1.0
    g = e * linear_term(P, coeffs)
    m = M.shape[0]
    if m > max_dim:
        raise FaceLimitExceeded(f"m = {m} exceeds the face enumeration limit {max_dim}")
    if cone.variant is ConeVariant.FULL:
        return min(-float(g @ np.linalg.solve(M, g)), 0.0)
    G = cone.generator_matrix()
    k = G.shape[1]
    if k > max_generators:
        raise FaceLimitExceeded(f"{k} generators exceed the face enumeration limit {max_generators}")
    best = 0.0
    for r in range(1, min(k, m) + 1):
        for S in itertools.combinations(range(k), r):
            GS = G[:, S]
            if np.linalg.matrix_rank(GS) < r:
                continue
            H = GS.T @ M @ GS
            lam = -np.linalg.solve(H, GS.T @ g)
            if lam.min() < -1e-12 * (1.0 + np.abs(lam).max()):
                continue
            v = GS @ lam
            best = min(best, float(v @ M @ v + 2 * v @ g))
    return best


__all__ = [
    "HamiltonianEval", "nnls", "project_cone", "distance_to_cone", "is_symmetric",
    "weight_matrix", "linear_term", "factor_weight", "eval_H", "brute_force_H",
    "objective", "ray_signs", "scalar_hamiltonian",
]
