"""
Unit tests for the structured linear algebra kernels.
"""

import numpy as np
import pytest

from mgprnn.exceptions import InvalidHyperparameterError, InvalidInputError, NumericalError, ShapeError
from mgprnn.linalg import (
    MaskedKroneckerCov,
    VecOrdering,
    add_jitter,
    cg_solve,
    default_krylov_dim,
    dense_sqrt_action,
    kron_matvec,
    lanczos_sqrt_vec,
    masked_cov_matvec,
    ou_kernel_matrix,
)
from tests.conftest import KRON_ONES_EYE_RESULT, OU_THREE_OVER_TWO, OU_UNIT_STEP, TEST_SEED, random_spd


class TestVecOrdering:
    """Tests for variable-major flattening."""

    def test_flat_index_is_variable_major(self):
        """Test that entry (m, t) lands at m * T + t."""
        assert VecOrdering.flat_index(2, 1, 4) == 9

    def test_flatten_matches_row_major_ravel(self):
        """Test that flattening an M x T matrix matches a row-major ravel."""
        mat = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(VecOrdering.flatten(mat), mat.ravel())
        np.testing.assert_array_equal(VecOrdering.unflatten(mat.ravel(), 2, 3), mat)

    def test_unflatten_wrong_length_raises(self):
        """Test that unflattening a vector of the wrong length raises ShapeError."""
        with pytest.raises(ShapeError):
            VecOrdering.unflatten(np.zeros(5), 2, 3)


class TestOuKernelMatrix:
    """Tests for the Ornstein-Uhlenbeck correlation matrix."""

    def test_unit_step(self):
        """Test the correlation of times 0 and 1 at length scale 1."""
        k = ou_kernel_matrix([0.0], [1.0], 1.0)
        assert k.entries[0, 0] == pytest.approx(OU_UNIT_STEP, abs=1e-15)

    def test_three_hours_at_length_two(self):
        """Test the correlation of times 0 and 3 at length scale 2."""
        k = ou_kernel_matrix([0.0], [3.0], 2.0)
        assert k.entries[0, 0] == pytest.approx(OU_THREE_OVER_TWO, abs=1e-15)

    def test_correlation_matrix_properties(self):
        """Test symmetry, unit diagonal and PSD after jitter on identical time lists."""
        times = np.array([0.0, 0.3, 0.3 + 1e-9, 2.0, 7.5])
        k = ou_kernel_matrix(times, times, 3.0)
        np.testing.assert_allclose(k.entries, k.entries.T)
        np.testing.assert_allclose(np.diag(k.entries), 1.0)
        assert np.linalg.eigvalsh(add_jitter(k.entries)).min() > 0.0

    def test_rectangular_shape(self):
        """Test that distinct time lists give a rectangular matrix."""
        k = ou_kernel_matrix([0.0, 1.0, 2.0], [0.5, 1.5], 1.0)
        assert k.shape == (3, 2)
        assert k.entries.shape == (3, 2)

    @pytest.mark.parametrize("length_scale", [0.0, -1.0, np.inf, np.nan])
    def test_invalid_length_scale_raises(self, length_scale):
        """Test that non-positive or non-finite length scales are rejected."""
        with pytest.raises(InvalidHyperparameterError):
            ou_kernel_matrix([0.0], [1.0], length_scale)


class TestKronMatvec:
    """Tests for the Kronecker matrix-vector product."""

    def test_scalars(self):
        """Test the 1x1 factors case."""
        np.testing.assert_allclose(kron_matvec(np.array([[2.0]]), np.array([[3.0]]), np.array([5.0])), [30.0])

    def test_identity(self):
        """Test that identity factors return the vector."""
        v = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(kron_matvec(np.eye(2), np.eye(2), v), v)

    def test_ones_with_identity(self):
        """Test a worked example against the dense product."""
        v = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(kron_matvec(np.ones((2, 2)), np.eye(2), v), KRON_ONES_EYE_RESULT)

    def test_matches_dense_product(self):
        """Test agreement with np.kron on seeded random factors up to 6x6."""
        rng = np.random.default_rng(TEST_SEED)
        for _ in range(20):
            p, q = rng.integers(1, 7, size=2)
            a = rng.standard_normal((p, p))
            b = rng.standard_normal((q, q))
            v = rng.standard_normal(p * q)
            np.testing.assert_allclose(kron_matvec(a, b, v), np.kron(a, b) @ v, atol=1e-12)

    def test_rectangular_factors_and_columns(self):
        """Test rectangular factors with a block of sample columns."""
        rng = np.random.default_rng(TEST_SEED + 1)
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((4, 5))
        v = rng.standard_normal((10, 3))
        np.testing.assert_allclose(kron_matvec(a, b, v), np.kron(a, b) @ v, atol=1e-12)

    def test_dimension_mismatch_raises(self):
        """Test that a vector of the wrong length raises ShapeError."""
        with pytest.raises(ShapeError):
            kron_matvec(np.eye(2), np.eye(3), np.zeros(5))


class TestMaskedCovMatvec:
    """Tests for the masked Kronecker covariance action."""

    def test_single_entry(self):
        """Test the 1x1 case: K = [[1]], noise 0.5, v = [2] gives 3."""
        cov = MaskedKroneckerCov(np.array([[1.0]]), np.array([[1.0]]), np.array([0.5]), ((0, 0),))
        np.testing.assert_allclose(masked_cov_matvec(cov, np.array([2.0])), [3.0])

    def test_full_mask_reduces_to_kron(self):
        """Test that a full mask with identity task covariance and no noise equals kron_matvec."""
        rng = np.random.default_rng(TEST_SEED)
        time_corr = random_spd(rng, 3)
        mask = tuple((m, t) for m in range(2) for t in range(3))
        cov = MaskedKroneckerCov(np.eye(2), time_corr, np.zeros(2), mask)
        v = rng.standard_normal(6)
        np.testing.assert_allclose(cov.matvec(v), kron_matvec(np.eye(2), time_corr, v), atol=1e-12)

    def test_matches_dense_submatrix(self):
        """Test a 3-variable, 4-time instance with 7 observed entries against the dense submatrix."""
        rng = np.random.default_rng(TEST_SEED)
        task = random_spd(rng, 3)
        times = np.array([0.0, 1.0, 2.5, 4.0])
        time_corr = add_jitter(ou_kernel_matrix(times, times, 2.0).entries)
        mask = ((0, 0), (0, 2), (1, 1), (1, 3), (2, 0), (2, 1), (2, 3))
        noise = np.array([0.1, 0.2, 0.3])
        cov = MaskedKroneckerCov(task, time_corr, noise, mask)
        v = rng.standard_normal(7)
        np.testing.assert_allclose(cov.matvec(v), cov.dense() @ v, atol=1e-12)

        block = rng.standard_normal((7, 3))
        np.testing.assert_allclose(cov.matvec(block), cov.dense() @ block, atol=1e-12)

    def test_mask_out_of_range_raises(self):
        """Test that a mask entry outside the grid raises ShapeError."""
        with pytest.raises(ShapeError):
            MaskedKroneckerCov(np.eye(2), np.eye(2), np.ones(2), ((0, 0), (2, 1)))

    def test_wrong_vector_length_raises(self):
        """Test that a vector not matching the mask length raises ShapeError."""
        cov = MaskedKroneckerCov(np.eye(1), np.eye(2), np.ones(1), ((0, 0), (0, 1)))
        with pytest.raises(ShapeError):
            cov.matvec(np.ones(3))


class TestCgSolve:
    """Tests for the conjugate gradient solver."""

    def test_identity(self):
        """Test that A = I returns b."""
        result = cg_solve(lambda v: v, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(result.x, [1.0, 2.0, 3.0])
        assert result.converged

    def test_diagonal(self):
        """Test the diag(2, 4) example."""
        a = np.diag([2.0, 4.0])
        result = cg_solve(lambda v: a @ v, np.array([2.0, 4.0]))
        np.testing.assert_allclose(result.x, [1.0, 1.0], atol=1e-12)

    def test_zero_rhs_returns_zero(self):
        """Test that b = 0 returns x = 0 without iterating."""
        result = cg_solve(lambda v: 2.0 * v, np.zeros(4))
        np.testing.assert_array_equal(result.x, np.zeros(4))
        assert result.iterations == 0

    def test_matches_dense_solve(self):
        """Test agreement with np.linalg.solve on seeded SPD systems."""
        rng = np.random.default_rng(TEST_SEED)
        for n in (1, 5, 20, 64):
            a = random_spd(rng, n)
            b = rng.standard_normal(n)
            result = cg_solve(lambda v: a @ v, b, tol=1e-12, max_iter=10 * n)
            assert result.converged
            np.testing.assert_allclose(result.x, np.linalg.solve(a, b), atol=1e-8)

    def test_block_of_columns(self):
        """Test that columns are solved independently, including a zero column."""
        rng = np.random.default_rng(TEST_SEED)
        a = random_spd(rng, 8)
        b = rng.standard_normal((8, 3))
        b[:, 1] = 0.0
        result = cg_solve(lambda v: a @ v, b, tol=1e-12, max_iter=100)
        np.testing.assert_allclose(result.x, np.linalg.solve(a, b), atol=1e-8)

    def test_negative_curvature_raises(self):
        """Test that an indefinite operator raises NumericalError naming the iteration."""
        a = np.diag([1.0, -1.0])
        with pytest.raises(NumericalError) as info:
            cg_solve(lambda v: a @ v, np.array([1.0, 2.0]))
        assert info.value.iteration == 1
        assert "iteration 1" in str(info.value)

    def test_iteration_budget_reports_unconverged(self):
        """Test that hitting max_iter reports converged=False."""
        rng = np.random.default_rng(TEST_SEED)
        a = random_spd(rng, 30, shift=0.01)
        result = cg_solve(lambda v: a @ v, rng.standard_normal(30), tol=1e-14, max_iter=2)
        assert not result.converged
        assert result.iterations == 2

    def test_invalid_tolerance_raises(self):
        """Test that a non-positive tolerance is rejected."""
        with pytest.raises(InvalidInputError):
            cg_solve(lambda v: v, np.ones(2), tol=0.0)


class TestLanczosSqrtVec:
    """Tests for the Lanczos square-root action."""

    def test_identity_covariance(self):
        """Test that Sigma = I returns xi."""
        xi = np.array([0.3, -1.2, 2.0, 0.5])
        np.testing.assert_allclose(lanczos_sqrt_vec(lambda v: v, xi, 4), xi, atol=1e-12)

    def test_scaled_identity(self):
        """Test that Sigma = 4I returns 2 xi."""
        xi = np.array([1.0, 2.0, -3.0])
        np.testing.assert_allclose(lanczos_sqrt_vec(lambda v: 4.0 * v, xi, 3), 2.0 * xi, atol=1e-12)

    def test_full_dimension_matches_dense_root(self):
        """Test that k = n matches the dense symmetric square root on seeded SPD matrices."""
        rng = np.random.default_rng(TEST_SEED)
        for _ in range(20):
            n = int(rng.integers(2, 17))
            sigma = random_spd(rng, n, shift=0.5)
            xi = rng.standard_normal(n)
            approx = lanczos_sqrt_vec(lambda v: sigma @ v, xi, n)
            np.testing.assert_allclose(approx, dense_sqrt_action(sigma, xi), atol=1e-6)

    def test_error_nonincreasing_in_k(self):
        """Test that the error at k = n is no worse than at k = 4, which is no worse than at k = 2."""
        rng = np.random.default_rng(TEST_SEED)
        n = 12
        sigma = random_spd(rng, n, shift=0.5)
        xi = rng.standard_normal(n)
        exact = dense_sqrt_action(sigma, xi)
        errors = [np.linalg.norm(lanczos_sqrt_vec(lambda v: sigma @ v, xi, k) - exact) for k in (2, 4, n)]
        assert errors[2] <= errors[1] <= errors[0]

    def test_block_matches_columnwise(self):
        """Test that a block of columns gives the same result as separate runs."""
        rng = np.random.default_rng(TEST_SEED)
        sigma = random_spd(rng, 6)
        xi = rng.standard_normal((6, 3))
        block = lanczos_sqrt_vec(lambda v: sigma @ v, xi, 6)
        for s in range(3):
            np.testing.assert_allclose(block[:, s], lanczos_sqrt_vec(lambda v: sigma @ v, xi[:, s], 6), atol=1e-10)

    def test_happy_breakdown_on_low_rank_direction(self):
        """Test that an eigenvector start terminates early and stays exact."""
        sigma = np.diag([9.0, 1.0, 4.0])
        xi = np.array([0.0, 0.0, 2.0])
        np.testing.assert_allclose(lanczos_sqrt_vec(lambda v: sigma @ v, xi, 3), [0.0, 0.0, 4.0], atol=1e-12)

    def test_zero_vector_raises(self):
        """Test that xi = 0 raises InvalidInputError."""
        with pytest.raises(InvalidInputError):
            lanczos_sqrt_vec(lambda v: v, np.zeros(3), 2)


class TestDefaultKrylovDim:
    """Tests for the default Krylov dimension."""

    def test_caps_at_problem_size(self):
        """Test that k never exceeds the problem dimension."""
        assert default_krylov_dim(10) == 10
        assert default_krylov_dim(100) == 32
        assert default_krylov_dim(100, 8) == 8
