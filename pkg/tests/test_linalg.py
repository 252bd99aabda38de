import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lora_extract.errors import ConvergenceFailure, NonFiniteError, ShapeMismatch
from lora_extract.linalg import (
    RankClampWarning,
    as_matrix,
    canonicalize_signs,
    frobenius_norm,
    matmul,
    randomized_svd,
    svd_jacobi,
    svd_thin,
    svd_truncated,
)

from conftest import decaying

TOL = 1e-10


def check_svd(m, res, tol=TOL):
    p = res.rank
    assert np.all(np.diff(res.sigma) <= 0)
    assert np.all(res.sigma >= 0)
    assert np.abs(res.u.T @ res.u - np.eye(p)).max() < tol
    assert np.abs(res.vt @ res.vt.T - np.eye(p)).max() < tol
    assert np.linalg.norm(res.reconstruct() - m) < tol * max(1.0, np.linalg.norm(m))


@pytest.mark.parametrize("kernel", ["lapack", "jacobi"])
def test_diagonal_is_its_own_svd(kernel):
    res = svd_thin(np.diag([3.0, 2.0, 1.0]), kernel=kernel)
    np.testing.assert_allclose(res.sigma, [3, 2, 1], atol=1e-15)
    np.testing.assert_allclose(res.u, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(res.vt, np.eye(3), atol=1e-15)


@pytest.mark.parametrize("kernel", ["lapack", "jacobi"])
def test_zero_matrix(kernel):
    m = np.zeros((3, 2))
    res = svd_thin(m, kernel=kernel)
    np.testing.assert_array_equal(res.sigma, [0.0, 0.0])
    np.testing.assert_array_equal(res.reconstruct(), m)
    check_svd(m, res)


@pytest.mark.parametrize("kernel", ["lapack", "jacobi"])
def test_random_4x3_against_eigendecomposition(kernel):
    m = np.random.default_rng(7).standard_normal((4, 3))
    res = svd_thin(m, kernel=kernel)
    check_svd(m, res)
    # independent oracle: eigenvalues of m^T m are sigma^2
    evals = np.sort(np.linalg.eigh(m.T @ m)[0])[::-1]
    np.testing.assert_allclose(res.sigma ** 2, evals, rtol=1e-10)


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (6, 1), (5, 5), (7, 3), (3, 9), (40, 17)])
def test_jacobi_matches_lapack(shape):
    m = np.random.default_rng(sum(shape)).standard_normal(shape)
    j, l = svd_jacobi(m), svd_thin(m)
    check_svd(m, j)
    np.testing.assert_allclose(j.sigma, l.sigma, rtol=1e-12, atol=1e-13)
    # distinct singular values: vectors agree once signs are canonical
    np.testing.assert_allclose(j.u, l.u, atol=1e-10)
    np.testing.assert_allclose(j.vt, l.vt, atol=1e-10)


def test_jacobi_rank_deficient_completes_basis(rng):
    m = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    res = svd_jacobi(m)
    check_svd(m, res)
    assert res.sigma[2:].max() < 1e-12 * res.sigma[0]


def test_jacobi_iteration_cap():
    m = np.random.default_rng(0).standard_normal((20, 15))
    with pytest.raises(ConvergenceFailure):
        svd_jacobi(m, max_sweeps=1)


def test_lapack_failure_becomes_convergence_failure(monkeypatch):
    def boom(*args, **kwargs):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr(np.linalg, "svd", boom)
    with pytest.raises(ConvergenceFailure):
        svd_thin(np.eye(2))


def test_truncated_diagonal():
    res = svd_truncated(np.diag([3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(res.sigma, [3, 2])
    assert res.u.shape == (3, 2) and res.vt.shape == (2, 3)


def test_truncated_full_rank_is_thin(rng):
    m = rng.standard_normal((5, 4))
    full, trunc = svd_thin(m), svd_truncated(m, 4)
    for a, b in [(full.u, trunc.u), (full.sigma, trunc.sigma), (full.vt, trunc.vt)]:
        np.testing.assert_array_equal(a, b)


def test_truncated_rank_is_clamped_with_warning(rng):
    m = rng.standard_normal((3, 5))
    with pytest.warns(RankClampWarning):
        res = svd_truncated(m, 10)
    assert res.rank == 3
    with pytest.raises(ValueError):
        svd_truncated(m, 0)


def test_randomized_matches_exact_top_values():
    m = decaying(np.random.default_rng(50), (50, 30))
    exact = svd_truncated(m, 5)
    approx = svd_truncated(m, 5, method="randomized", rng=1)
    np.testing.assert_allclose(approx.sigma, exact.sigma, rtol=1e-4)
    check_svd(approx.reconstruct(), approx, tol=1e-8)


def test_randomized_is_seed_deterministic():
    m = decaying(np.random.default_rng(3), (40, 20))
    a = randomized_svd(m, 4, rng=9)
    b = randomized_svd(m, 4, rng=9)
    np.testing.assert_array_equal(a.sigma, b.sigma)
    np.testing.assert_array_equal(a.u, b.u)


def test_randomized_returns_oversampled_components():
    m = np.random.default_rng(0).standard_normal((60, 40))
    assert randomized_svd(m, 5, rng=0).rank == 15
    assert randomized_svd(m, 35, rng=0).rank == 40


@pytest.mark.parametrize("m, expected", [
    (np.eye(3), np.sqrt(3.0)),
    (np.zeros((2, 4)), 0.0),
    (np.array([[3.0, 4.0]]), 5.0),
])
def test_frobenius_norm(m, expected):
    assert frobenius_norm(m) == pytest.approx(expected, abs=1e-15)


def test_matmul(rng):
    m = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)
    np.testing.assert_array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])
    np.testing.assert_array_equal(matmul(m, np.zeros((4, 2))), np.zeros((3, 2)))
    with pytest.raises(ShapeMismatch):
        matmul(m, m)


def test_as_matrix_validation():
    with pytest.raises(NonFiniteError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(NonFiniteError):
        as_matrix([[np.inf]])
    with pytest.raises(ValueError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ValueError):
        as_matrix(np.zeros((0, 3)))
    assert as_matrix(np.ones((2, 2), dtype=np.float16)).dtype == np.float64


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("r", [1, 2, 3])
def test_eckart_young_equality(seed, r):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((rng.integers(3, 12), rng.integers(3, 12)))
    full = svd_thin(m)
    approx = full.truncate(r).reconstruct()
    tail = np.sum(full.sigma[r:] ** 2)
    assert abs(np.linalg.norm(m - approx) ** 2 - tail) <= 1e-8 * np.linalg.norm(m) ** 2


@pytest.mark.parametrize("r", [1, 2])
def test_truncation_beats_random_candidates(r):
    rng = np.random.default_rng(100 + r)
    m = rng.standard_normal((5, 4))
    best = np.linalg.norm(m - svd_truncated(m, r).reconstruct())
    left = rng.standard_normal((1000, 5, r))
    right = rng.standard_normal((1000, r, 4))
    errs = np.linalg.norm(m - left @ right, axis=(1, 2))
    assert best <= errs.min()


def test_sign_flip_invariance(rng):
    m = rng.standard_normal((6, 4))
    res = svd_thin(m)
    u, vt = res.u.copy(), res.vt.copy()
    u[:, 1] *= -1
    vt[1] *= -1
    flipped = (u * res.sigma) @ vt
    assert np.abs(flipped - res.reconstruct()).max() <= 1e-12


def test_canonical_signs():
    u = np.array([[0.6, -0.8], [-0.8, -0.6]])
    vt = np.eye(2)
    cu, cvt = canonicalize_signs(u, vt)
    np.testing.assert_array_equal(cu, [[-0.6, 0.8], [0.8, 0.6]])
    np.testing.assert_array_equal(cvt, [[-1, 0], [0, -1]])


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=finite))
def test_svd_invariants_property(m):
    for kernel in ("lapack", "jacobi"):
        res = svd_thin(m, kernel=kernel)
        assert res.rank == min(m.shape)
        check_svd(m, res, tol=1e-8)
        idx = np.argmax(np.abs(res.u), axis=0)
        assert np.all(res.u[idx, np.arange(res.rank)] >= 0)
