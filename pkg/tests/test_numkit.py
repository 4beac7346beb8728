import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp as scipy_logsumexp

from mild import numkit
from mild.errors import DimensionMismatch, NotPositiveDefinite, SingularMatrix


def test_cholesky_known_factor():
    m = np.array([[4.0, 2.0], [2.0, 3.0]])
    L = numkit.cholesky(m)
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]])
    np.testing.assert_allclose(L @ L.T, m)


@pytest.mark.parametrize(
    "m",
    [np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros((2, 2)), -np.eye(3)],
)
def test_cholesky_rejects_indefinite(m):
    with pytest.raises(NotPositiveDefinite):
        numkit.cholesky(m)


def test_cholesky_rejects_asymmetric_and_nonsquare():
    with pytest.raises(NotPositiveDefinite):
        numkit.cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        numkit.cholesky(np.ones((2, 3)))


def test_regularize_zero_matrix():
    np.testing.assert_array_equal(numkit.regularize_spd(np.zeros((2, 2)), 1e-6), 1e-6 * np.eye(2))


def test_regularize_rank_one_becomes_factorizable():
    v = np.array([1.0, 2.0, 3.0])
    m = numkit.regularize_spd(np.outer(v, v), 1e-6)
    numkit.cholesky(m)


def test_regularize_idempotent_with_zero_eps():
    m = numkit.regularize_spd(np.array([[2.0, 1.0], [1.0, 2.0]]), 1e-3)
    np.testing.assert_array_equal(numkit.regularize_spd(m, 0.0), m)


def test_default_jitter_scale_and_floor():
    assert numkit.default_jitter(np.diag([2.0, 4.0])) == pytest.approx(3e-6)
    assert numkit.default_jitter(np.zeros((3, 3))) == 1e-8


def test_solve_triangular_and_errors():
    L = np.array([[2.0, 0.0], [1.0, 3.0]])
    b = np.array([4.0, 5.0])
    np.testing.assert_allclose(L @ numkit.solve_triangular(L, b), b)
    np.testing.assert_allclose(L.T @ numkit.solve_triangular(L, b, trans=True), b)
    with pytest.raises(SingularMatrix):
        numkit.solve_triangular(np.array([[1.0, 0.0], [1.0, 0.0]]), b)
    with pytest.raises(DimensionMismatch):
        numkit.solve_triangular(L, np.ones(3))


def test_logdet_and_cho_solve():
    m = np.array([[4.0, 2.0], [2.0, 3.0]])
    L = numkit.cholesky(m)
    assert numkit.logdet_from_chol(L) == pytest.approx(np.log(np.linalg.det(m)))
    np.testing.assert_allclose(numkit.cho_solve(L, np.eye(2)), np.linalg.inv(m))


@given(
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20),
    st.booleans(),
)
def test_logsumexp_matches_scipy(values, with_neg_inf):
    a = np.array(values)
    if with_neg_inf:
        a = np.append(a, -np.inf)
    assert numkit.logsumexp(a) == pytest.approx(scipy_logsumexp(a), rel=1e-12, abs=1e-12)


def test_logsumexp_axis_and_all_neg_inf():
    a = np.log(np.arange(1.0, 7.0)).reshape(2, 3)
    np.testing.assert_allclose(numkit.logsumexp(a, axis=1), np.log([6.0, 15.0]))
    assert numkit.logsumexp(np.full(3, -np.inf)) == -np.inf


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1), st.integers(0, 7))
def test_one_regularization_pass_suffices_for_gram_matrices(d, seed, rank):
    # covariance-like matrices anywhere in the package are Gram matrices, possibly rank-deficient
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((min(rank, d), d)) * rng.uniform(1e-3, 1e3)
    m = x.T @ x
    numkit.cholesky(numkit.regularize_spd(m))


def test_make_rng_is_pcg64_and_reproducible():
    a = numkit.make_rng(3)
    assert isinstance(a.bit_generator, np.random.PCG64)
    assert a.standard_normal() == numkit.make_rng(3).standard_normal()
    assert numkit.make_rng(a) is a
