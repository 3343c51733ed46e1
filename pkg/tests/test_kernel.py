import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kflow.errors import NumericError
from kflow.kernel import KernelParams, kernel_cross_matrix, rbf_eval


def test_zero_distance_is_one():
    for g in (1e-3, 0.5, 7.0):
        assert rbf_eval([0.3, -1.2], [0.3, -1.2], g) == 1.0


def test_one_step_value():
    assert rbf_eval([0.0], [1.0], 1.0) == pytest.approx(0.3678794412, abs=1e-10)


def test_two_dim_value():
    # independent evaluation of exp(-gamma * sum of squared differences)
    expected = math.exp(-0.5 * ((1 - 3) ** 2 + (2 - 4) ** 2))
    assert rbf_eval([1, 2], [3, 4], KernelParams(0.5)) == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(math.exp(-4.0))


@pytest.mark.parametrize("gamma", [0.0, -1.0, float("inf"), float("nan")])
def test_bad_gamma(gamma):
    with pytest.raises(ValueError):
        KernelParams(gamma)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        rbf_eval([1.0, 2.0], [1.0], 1.0)
    with pytest.raises(ValueError):
        kernel_cross_matrix(np.zeros((3, 2)), np.zeros((2, 3)), 1.0)


def test_non_finite_input():
    with pytest.raises(NumericError):
        rbf_eval([float("nan")], [0.0], 1.0)


def test_cross_matrix_small_case():
    K = kernel_cross_matrix(np.array([[0.0], [1.0]]), np.array([[0.0]]), 1.0)
    np.testing.assert_allclose(K, [[1.0], [math.exp(-1.0)]], rtol=1e-15)


def test_cross_matrix_matches_double_loop():
    rng = np.random.default_rng(3)
    U, W = rng.normal(size=(8, 3)), rng.normal(size=(4, 3))
    K = kernel_cross_matrix(U, W, 0.7)
    ref = np.empty((8, 4))
    for i in range(8):
        for m in range(4):
            ref[i, m] = math.exp(-0.7 * sum((U[i, k] - W[m, k]) ** 2 for k in range(3)))
    np.testing.assert_allclose(K, ref, rtol=1e-14)


def test_torch_and_numpy_paths_agree():
    rng = np.random.default_rng(4)
    U, W = rng.normal(size=(6, 2)), rng.normal(size=(5, 2))
    Kt = kernel_cross_matrix(torch.as_tensor(U), torch.as_tensor(W), 1.3)
    assert isinstance(Kt, torch.Tensor)
    np.testing.assert_array_equal(Kt.numpy(), kernel_cross_matrix(U, W, 1.3))


def test_gram_symmetric_unit_diagonal_psd():
    rng = np.random.default_rng(5)
    for n in (1, 7, 32):
        U = rng.normal(size=(n, 3))
        K = kernel_cross_matrix(U, U, 0.4)
        assert np.array_equal(K, K.T)
        assert np.all(np.diag(K) == 1.0)
        assert np.linalg.eigvalsh(K).min() > -1e-10


def test_near_duplicate_points_do_not_cancel():
    x = np.array([[1e8, 1e8]])
    y = x + 1e-4
    # an expanded-norm formula loses the 2e-8 distance entirely
    assert kernel_cross_matrix(x, y, 1.0)[0, 0] < 1.0


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite),
       st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_range_symmetry_and_monotonicity(x, y, g1, g2):
    k = rbf_eval(x, y, g1)
    assert 0.0 <= k <= 1.0
    assert k == rbf_eval(y, x, g1)
    assert rbf_eval(x, x, g1) == 1.0
    lo, hi = sorted((g1, g2))
    assert rbf_eval(x, y, hi) <= rbf_eval(x, y, lo)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(-2, 2)), arrays(np.float64, 2, elements=st.floats(-2, 2)))
def test_strictly_positive_for_moderate_distances(x, y):
    assert rbf_eval(x, y, 1.0) > 0.0
