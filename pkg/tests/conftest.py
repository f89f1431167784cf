import numpy as np
import pytest

from conelq.model import CoefficientSet, ConstraintCone, ProblemSpec, RegimeGenerator
from conelq.portfolio import MarketSpec

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def golden_spec(C=0.0, x0=1.0):
    # 2A + C^2 = -1 for any C
    A = -0.5 - 0.5 * C * C
    return ProblemSpec(CoefficientSet.constant(A, 1.0, C, 0.0, 1.0, 1.0),
                       RegimeGenerator.single(), ConstraintCone.full(1), x0=x0)


def single_market(d=1.0, x0=0.0, lam=0.0):
    return MarketSpec.constant(0.01, 0.31, 0.2, 0.05, lam=lam, d=d, x0=x0,
                               cone=ConstraintCone.orthant(1))


def two_regime_market():
    return MarketSpec.constant(0.0, [[0.3], [0.1]], 0.2, [0.05, 0.05],
                               gen=RegimeGenerator([[-1.0, 1.0], [1.0, -1.0]]), d=1.0)


def random_generator(rng, ell):
    q = rng.uniform(0.0, 1.0, (ell, ell))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return RegimeGenerator(q)


def random_cone(rng, m, kind=None):
    kind = kind or rng.choice(["full", "orthant", "generated"])
    if kind == "full":
        return ConstraintCone.full(m)
    if kind == "orthant":
        return ConstraintCone.orthant(m)
    return ConstraintCone.generated(rng.normal(size=(m, 3)))


def random_problem(rng, singular=False, cone_kind=None, ell=None, m=None):
    ell = ell or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 3))
    n = m if singular else int(rng.integers(1, 3))
    C = rng.normal(0.0, 0.5, (ell, n))
    rho = rng.uniform(0.5, 1.5, ell)
    A = -(rho + (C * C).sum(axis=1)) / 2.0
    B = rng.normal(size=(ell, m))
    D = rng.normal(0.0, 0.5, (ell, n, m))
    if singular:
        D = D + np.eye(m)
        R = np.zeros((ell, m, m))
    else:
        L = rng.normal(size=(ell, m, m))
        R = L @ np.swapaxes(L, 1, 2) + 0.5 * np.eye(m)
    Q = rng.uniform(0.5, 2.0, ell)
    coeffs = CoefficientSet.constant(A, B, C, D, Q, R, ell=ell)
    return ProblemSpec(coeffs, random_generator(rng, ell), random_cone(rng, m, cone_kind),
                       x0=float(rng.choice([-1.0, 1.0])), i0=int(rng.integers(ell)))


@pytest.fixture
def golden():
    return golden_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
