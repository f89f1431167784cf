import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conelq.cone import (
    brute_force_H,
    distance_to_cone,
    eval_H,
    factor_weight,
    is_symmetric,
    nnls,
    objective,
    project_cone,
    scalar_hamiltonian,
)
from conelq.errors import FaceLimitExceeded, NotPositiveDefinite
from conelq.model import Coefficients, ConstraintCone

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


@st.composite
def cones(draw, m=None):
    m = m or draw(st.integers(1, 3))
    kind = draw(st.sampled_from(["full", "orthant", "generated"]))
    if kind == "full":
        return ConstraintCone.full(m)
    if kind == "orthant":
        return ConstraintCone.orthant(m)
    k = draw(st.integers(1, 4))
    G = draw(arrays(np.float64, (m, k), elements=finite))
    G[:, np.linalg.norm(G, axis=0) < 1e-3] = 1.0
    return ConstraintCone.generated(G)


@st.composite
def cone_and_point(draw):
    cone = draw(cones())
    p = draw(arrays(np.float64, (cone.m,), elements=finite))
    return cone, p


def random_coeffs(rng, m, n=2, psd_R=False):
    L = rng.normal(size=(m, m))
    R = L @ L.T + (0.0 if psd_R else 0.3) * np.eye(m)
    return Coefficients(float(rng.normal()), rng.normal(size=m), rng.normal(size=n),
                        rng.normal(size=(n, m)), 1.0, R)


# -- projection ----------------------------------------------------------------

def test_projection_examples():
    assert np.allclose(project_cone(ConstraintCone.generated([[1.0], [1.0]]), [2.0, 0.0]), [1.0, 1.0])
    assert np.allclose(project_cone(ConstraintCone.orthant(2), [-1.0, 3.0]), [0.0, 3.0])
    assert np.allclose(project_cone(ConstraintCone.zero(2), [5.0, -1.0]), [0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(cone_and_point())
def test_projection_idempotent(cp):
    cone, p = cp
    w = project_cone(cone, p)
    assert np.allclose(project_cone(cone, w), w, atol=1e-9 * (1 + np.abs(p).max()))


@settings(max_examples=200, deadline=None)
@given(cone_and_point(), st.floats(0.01, 100.0))
def test_projection_positively_homogeneous(cp, c):
    cone, p = cp
    assert np.allclose(project_cone(cone, c * p), c * project_cone(cone, p),
                       atol=1e-8 * c * (1 + np.abs(p).max()))


@settings(max_examples=200, deadline=None)
@given(cone_and_point())
def test_projection_orthogonality(cp):
    # Moreau: w in cone, (p - w) orthogonal to w and in the polar cone
    cone, p = cp
    w = project_cone(cone, p)
    scale = 1 + np.abs(p).max() ** 2
    assert abs((p - w) @ w) <= 1e-8 * scale
    G = cone.generator_matrix()
    if G is not None and G.shape[1]:
        assert np.all(G.T @ (p - w) <= 1e-8 * scale * (1 + np.abs(G).max()))


@settings(max_examples=150, deadline=None)
@given(cones(m=2), arrays(np.float64, (2,), elements=finite), arrays(np.float64, (2,), elements=finite))
def test_projection_nonexpansive(cone, p, q):
    d = np.linalg.norm(project_cone(cone, p) - project_cone(cone, q))
    assert d <= np.linalg.norm(p - q) + 1e-9 * (1 + np.abs(p).max() + np.abs(q).max())


def test_nnls_degenerate_narrow_cone():
    # nearly collinear generators once made the active set cycle
    G = np.array([[-0.37756529, -0.28550809, -0.73269698],
                  [-0.16281045, 0.77797163, 1.71459593]])
    p = np.array([0.68777661, 0.68379814])
    x = nnls(G, p)
    assert np.all(x >= 0)
    assert np.allclose(x, [0.0, 0.48868942, 0.0], atol=1e-7)


def test_symmetry_detection():
    assert is_symmetric(ConstraintCone.full(2))
    assert not is_symmetric(ConstraintCone.orthant(2))
    assert is_symmetric(ConstraintCone.generated([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]]))
    assert is_symmetric(ConstraintCone.zero(3))


def test_distance_to_cone():
    assert distance_to_cone(ConstraintCone.orthant(2), [-3.0, 4.0]) == pytest.approx(3.0)


# -- Hamiltonian -----------------------------------------------------------------

def test_scalar_hamiltonian_branches():
    # sign 1: minimizer -s/M
    assert scalar_hamiltonian(1, 2.0, 4.0, True, True) == (-1.0, -0.5)
    assert scalar_hamiltonian(1, 2.0, 4.0, True, False) == (0.0, 0.0)
    assert scalar_hamiltonian(2, 2.0, 4.0, True, False) == (-1.0, 0.5)
    with pytest.raises(NotPositiveDefinite):
        scalar_hamiltonian(1, 1.0, 0.0, True, True)


def test_full_space_closed_form(rng):
    for _ in range(50):
        m = int(rng.integers(1, 4))
        c = random_coeffs(rng, m)
        P = float(rng.uniform(0.0, 3.0))
        M = P * c.D.T @ c.D + c.R
        s = P * (c.B + c.D.T @ c.C)
        for sign in (1, 2):
            h = eval_H(sign, P, c, ConstraintCone.full(m))
            assert h.value == pytest.approx(-s @ np.linalg.solve(M, s), rel=1e-10, abs=1e-12)
            e = 1.0 if sign == 1 else -1.0
            assert np.allclose(h.minimizer, -e * np.linalg.solve(M, s), atol=1e-10)


def test_minimizer_lies_in_cone_and_attains_value(rng):
    for _ in range(200):
        m = int(rng.integers(1, 4))
        c = random_coeffs(rng, m)
        cone = ConstraintCone.generated(rng.normal(size=(m, 3)))
        P = float(rng.uniform(0.0, 3.0))
        for sign in (1, 2):
            h = eval_H(sign, P, c, cone)
            assert distance_to_cone(cone, h.minimizer) <= 1e-9 * (1 + np.abs(h.minimizer).max())
            assert objective(sign, h.minimizer, P, c) == pytest.approx(h.value, abs=1e-10)
            assert h.value <= 0.0


def test_sign_swap_equals_negated_cone(rng):
    # H2 over a cone equals H1 over its negation
    for _ in range(50):
        m = int(rng.integers(1, 4))
        c = random_coeffs(rng, m)
        cone = ConstraintCone.generated(rng.normal(size=(m, 3)))
        P = float(rng.uniform(0.0, 3.0))
        assert eval_H(2, P, c, cone).value == pytest.approx(eval_H(1, P, c, cone.negated()).value, abs=1e-10)


def test_hamiltonian_quadratic_in_P_scaling(rng):
    # for D = 0, H(P) = P^2 H with unit P when R is fixed
    for _ in range(30):
        m = int(rng.integers(1, 4))
        c = random_coeffs(rng, m)._replace(D=np.zeros((2, m)))
        cone = ConstraintCone.generated(rng.normal(size=(m, 3)))
        P = float(rng.uniform(0.1, 3.0))
        assert eval_H(1, P, c, cone).value == pytest.approx(P * P * eval_H(1, 1.0, c, cone).value,
                                                            rel=1e-9, abs=1e-12)


def test_zero_cone_gives_zero(rng):
    c = random_coeffs(rng, 2)
    h = eval_H(1, 1.3, c, ConstraintCone.zero(2))
    assert h.value == 0.0 and np.all(h.minimizer == 0.0)


def test_factor_weight(rng):
    c = random_coeffs(rng, 3)
    Rt = factor_weight(0.7, c, a=0.1)
    assert np.allclose(Rt.T @ Rt, 0.7 * c.D.T @ c.D + c.R + 0.1 * np.eye(3))
    assert np.allclose(np.tril(Rt, -1), 0.0)
    singular = c._replace(R=np.zeros((3, 3)), D=np.zeros((2, 3)))
    with pytest.raises(NotPositiveDefinite):
        factor_weight(1.0, singular)


def test_regularization_rescues_singular_weight(rng):
    c = random_coeffs(rng, 2, psd_R=True)._replace(R=np.zeros((2, 2)), D=np.zeros((2, 2)))
    h = eval_H(1, 0.5, c, ConstraintCone.orthant(2), a=0.2)
    assert h.value == pytest.approx(brute_force_H(1, 0.5, c, ConstraintCone.orthant(2), a=0.2), abs=1e-12)


def test_brute_force_limits(rng):
    c = random_coeffs(rng, 2)
    with pytest.raises(FaceLimitExceeded):
        brute_force_H(1, 1.0, c, ConstraintCone.generated(rng.normal(size=(2, 7))))
    c5 = random_coeffs(rng, 5)
    with pytest.raises(FaceLimitExceeded):
        brute_force_H(1, 1.0, c5, ConstraintCone.orthant(5))


def test_invalid_sign(rng):
    with pytest.raises(ValueError):
        eval_H(3, 1.0, random_coeffs(rng, 1), ConstraintCone.full(1))
