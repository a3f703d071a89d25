import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import charpoly, power_sum_naive, spectral_radius_oracle
from resilient_dmpc.linalg import (
    DimensionError,
    as_matrix,
    eigenvalues,
    mat_power_sum,
    row_sum_norm,
    spectral_radius,
)

A1 = np.array([[0.0, 1.0], [-1.0, 0.0]])
B1 = np.array([[0.5], [0.5]])
K1 = np.array([[0.3125, -0.3724]])


def test_identity_radius():
    assert spectral_radius(np.eye(2)) == pytest.approx(1.0, abs=1e-12)


def test_rotation_radius():
    assert spectral_radius([[0.0, 1.0], [-1.0, 0.0]]) == pytest.approx(1.0, abs=1e-12)


def test_companion_matrix_against_polynomial_roots():
    rng = np.random.default_rng(3)
    for _ in range(20):
        coeffs = rng.uniform(-2, 2, 4)
        comp = np.zeros((4, 4))
        comp[0] = -coeffs
        comp[1:, :3] = np.eye(3)
        expected = np.max(np.abs(np.roots(np.concatenate([[1.0], coeffs]))))
        assert spectral_radius(comp) == pytest.approx(expected, rel=1e-9)


def test_eigenvalues_match_charpoly_oracle():
    rng = np.random.default_rng(0)
    for n in range(1, 8):
        m = rng.normal(size=(n, n))
        ours = np.sort_complex(eigenvalues(m))
        ref = np.sort_complex(np.roots(charpoly(m)))
        assert np.allclose(ours, ref, atol=1e-6)


def test_defective_and_symmetric_inputs():
    jordan = np.array([[1.0, 1.0], [0.0, 1.0]])
    assert spectral_radius(jordan) == pytest.approx(1.0, abs=1e-7)
    s = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
    assert spectral_radius(s) == pytest.approx(2 + np.sqrt(2), rel=1e-12)


def test_zero_and_nilpotent():
    assert spectral_radius(np.zeros((3, 3))) == 0.0
    nil = np.diag([1.0, 1.0], k=1)
    assert spectral_radius(nil) < 1e-6


def test_rejects_bad_input():
    with pytest.raises(DimensionError):
        spectral_radius(np.ones((2, 3)))
    with pytest.raises(ValueError):
        spectral_radius([[np.nan]])
    with pytest.raises(ValueError):
        spectral_radius(np.eye(2), tol=0.0)
    with pytest.raises(DimensionError):
        as_matrix(np.ones((2, 2, 2)))


def test_power_sum_trivial_cases():
    bk = B1 @ K1
    assert np.allclose(mat_power_sum(np.zeros((2, 2)), B1, K1, 3), bk)
    assert np.allclose(mat_power_sum(np.eye(2), B1, K1, 2), 3 * bk)


def test_power_sum_example1_against_naive_sum():
    a_k = A1 + B1 @ K1
    for n in (1, 5, 20):
        assert np.allclose(mat_power_sum(a_k, B1, K1, n), power_sum_naive(a_k, B1, K1, n), atol=1e-12)


def test_power_sum_shape_errors():
    with pytest.raises(DimensionError):
        mat_power_sum(np.eye(2), np.ones((3, 1)), K1, 2)
    with pytest.raises(ValueError):
        mat_power_sum(np.eye(2), B1, K1, 0)


def test_row_sum_norm():
    assert row_sum_norm([[1.0, -2.0], [0.5, 0.5]]) == 3.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-3, 3)))
def test_radius_matches_oracle(m):
    assert spectral_radius(m) == pytest.approx(spectral_radius_oracle(m), rel=1e-5, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)), st.floats(0.1, 3))
def test_radius_scales(m, s):
    assert spectral_radius(s * m) == pytest.approx(s * spectral_radius(m), rel=1e-6, abs=1e-8)
