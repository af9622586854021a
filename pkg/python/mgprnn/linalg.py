"""Structured linear algebra for multitask GP posteriors.

Ornstein-Uhlenbeck kernel matrices, Kronecker matrix-vector products without
materializing the Kronecker product, a masked Kronecker covariance operator,
conjugate gradients and the Lanczos approximation of a symmetric square root
acting on a vector.

Every routine is written against `mgprnn.autodiff`, so it accepts plain numpy
arrays or tape variables. Iterative solvers run on a single vector ``(n,)`` or
on a block of columns ``(n, S)``; columns are processed independently, each
with its own step sizes and convergence state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, NamedTuple

import numpy as np

from mgprnn import autodiff as ad
from mgprnn.exceptions import (
    InvalidHyperparameterError,
    InvalidInputError,
    NumericalError,
    ShapeError,
)

__all__ = [
    "DEFAULT_JITTER",
    "DEFAULT_CG_TOL",
    "DEFAULT_CG_MAX_ITER",
    "DEFAULT_KRYLOV_DIM",
    "HAPPY_BREAKDOWN_TOL",
    "VecOrdering",
    "KernelMatrix",
    "MaskedKroneckerCov",
    "CgResult",
    "ou_kernel_matrix",
    "add_jitter",
    "kron_matvec",
    "masked_cov_matvec",
    "cg_solve",
    "lanczos_sqrt_vec",
    "default_krylov_dim",
    "dense_sqrt_action",
]

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6
DEFAULT_CG_TOL = 1e-8
DEFAULT_CG_MAX_ITER = 200
DEFAULT_KRYLOV_DIM = 32
HAPPY_BREAKDOWN_TOL = 1e-10

MatVec = Callable[[Any], Any]


class VecOrdering:
    """Variable-major flattening of an M x T matrix: flat index = m * T + t.

    This is the index order of ``kron(K_task, K_time)``. Trailing axes (sample
    columns) are carried through unchanged.
    """

    @staticmethod
    def flat_index(variable: Any, time: Any, num_times: int) -> Any:
        return np.asarray(variable) * num_times + np.asarray(time)

    @staticmethod
    def flatten(matrix: Any) -> Any:
        shape = ad.value_of(matrix).shape
        return ad.reshape(matrix, (shape[0] * shape[1],) + shape[2:])

    @staticmethod
    def unflatten(vec: Any, num_vars: int, num_times: int) -> Any:
        shape = ad.value_of(vec).shape
        if shape[0] != num_vars * num_times:
            raise ShapeError(f"cannot unflatten length {shape[0]} into {num_vars}x{num_times}")
        return ad.reshape(vec, (num_vars, num_times) + shape[1:])


@dataclass(frozen=True)
class KernelMatrix:
    """OU correlation matrix between two lists of times (hours)."""

    entries: Any
    times_rows: np.ndarray
    times_cols: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.times_rows), len(self.times_cols))


def _as_times(times: Any, label: str) -> np.ndarray:
    arr = np.asarray(times, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{label} must be finite")
    return arr


def ou_kernel_matrix(times_a: Any, times_b: Any, length_scale: Any) -> KernelMatrix:
    """Entries exp(-|a_i - b_j| / length_scale).

    `length_scale` may be a float or a scalar tape variable.

    Raises:
        InvalidHyperparameterError: if the length scale is not a positive
            finite number.
    """
    a = _as_times(times_a, "times_a")
    b = _as_times(times_b, "times_b")
    value = ad.value_of(length_scale)
    if value.size != 1 or not np.isfinite(value).all() or float(value.reshape(())) <= 0.0:
        raise InvalidHyperparameterError(f"OU length scale must be positive, got {value}")
    distances = np.abs(a[:, np.newaxis] - b[np.newaxis, :])
    entries = ad.exp(ad.neg(ad.div(distances, length_scale)))
    return KernelMatrix(entries, a, b)


def add_jitter(matrix: Any, jitter: float = DEFAULT_JITTER) -> Any:
    """``matrix + jitter * I`` for a square matrix."""
    n = ad.value_of(matrix).shape[0]
    return ad.add(matrix, jitter * np.eye(n))


def kron_matvec(A: Any, B: Any, v: Any) -> Any:
    """``kron(A, B) @ v`` through the reshape identity, never forming kron(A, B).

    With A of shape (p, p') and B of shape (q, q'), `v` has length p' * q'
    in variable-major order (index = i_A * q' + i_B), optionally with trailing
    sample columns. Cost is O(pq(p + q)) per column.
    """
    a_shape = ad.value_of(A).shape
    b_shape = ad.value_of(B).shape
    v_shape = ad.value_of(v).shape
    if len(a_shape) != 2 or len(b_shape) != 2:
        raise ShapeError(f"kron_matvec factors must be matrices, got {a_shape} and {b_shape}")
    p, p_in = a_shape
    q, q_in = b_shape
    if len(v_shape) not in (1, 2) or v_shape[0] != p_in * q_in:
        raise ShapeError(
            f"kron_matvec: vector of shape {v_shape} does not match factors {a_shape} x {b_shape}"
        )
    cols = v_shape[1] if len(v_shape) == 2 else 1

    V = ad.reshape(v, (p_in, q_in * cols))
    V = ad.matmul(A, V)
    V = ad.transpose(ad.reshape(V, (p, q_in, cols)), (1, 0, 2))
    V = ad.matmul(B, ad.reshape(V, (q_in, p * cols)))
    V = ad.transpose(ad.reshape(V, (q, p, cols)), (1, 0, 2))
    return ad.reshape(V, (p * q, cols) if len(v_shape) == 2 else (p * q,))


@dataclass(frozen=True)
class MaskedKroneckerCov:
    """Observed-entry submatrix of ``kron(task_cov, time_corr) + kron(D, I)``.

    `mask` lists (variable_index, time_index) pairs in variable-major order;
    `noise_vars` holds the diagonal of D.
    """

    task_cov: Any
    time_corr: Any
    noise_vars: Any
    mask: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        m, t = self.num_vars, self.num_times
        for var, time in self.mask:
            if not (0 <= var < m and 0 <= time < t):
                raise ShapeError(f"mask entry ({var}, {time}) outside {m} variables x {t} times")
        if len(set(self.mask)) != len(self.mask):
            raise ShapeError("mask contains duplicate (variable, time) pairs")

    @property
    def num_vars(self) -> int:
        return ad.value_of(self.task_cov).shape[0]

    @property
    def num_times(self) -> int:
        return ad.value_of(self.time_corr).shape[0]

    @property
    def size(self) -> int:
        return len(self.mask)

    @cached_property
    def var_index(self) -> np.ndarray:
        return np.array([var for var, _ in self.mask], dtype=np.intp)

    @cached_property
    def time_index(self) -> np.ndarray:
        return np.array([time for _, time in self.mask], dtype=np.intp)

    @cached_property
    def flat_index(self) -> np.ndarray:
        return VecOrdering.flat_index(self.var_index, self.time_index, self.num_times).astype(np.intp)

    def matvec(self, v: Any) -> Any:
        return masked_cov_matvec(self, v)

    def dense(self) -> np.ndarray:
        """Materialized numeric matrix, for verification."""
        full = np.kron(ad.value_of(self.task_cov), ad.value_of(self.time_corr))
        sub = full[np.ix_(self.flat_index, self.flat_index)]
        return sub + np.diag(ad.value_of(self.noise_vars)[self.var_index])


def masked_cov_matvec(cov: MaskedKroneckerCov, v: Any) -> Any:
    """Apply the masked covariance: scatter, Kronecker product, gather, add noise."""
    v_shape = ad.value_of(v).shape
    if len(v_shape) not in (1, 2) or v_shape[0] != cov.size:
        raise ShapeError(f"masked_cov_matvec: vector of shape {v_shape} for mask of size {cov.size}")
    full_len = cov.num_vars * cov.num_times
    full = ad.scatter(v, cov.flat_index, (full_len,) + tuple(v_shape[1:]))
    product = ad.getitem(kron_matvec(cov.task_cov, cov.time_corr, full), cov.flat_index)
    noise = ad.getitem(cov.noise_vars, cov.var_index)
    if len(v_shape) == 2:
        noise = ad.reshape(noise, (cov.size, 1))
    return ad.add(product, ad.mul(noise, v))


class CgResult(NamedTuple):
    x: Any
    converged: bool
    iterations: int
    relative_residual: float


def cg_solve(
    apply_A: MatVec,
    b: Any,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int = DEFAULT_CG_MAX_ITER,
) -> CgResult:
    """Solve ``A x = b`` for symmetric positive definite `apply_A` by conjugate gradients.

    Iteration stops once every column reaches ``||r|| / ||b|| <= tol`` or after
    `max_iter` iterations; `converged` reports which. Converged columns are
    frozen while the others continue. Each iteration is recorded on the tape
    when the inputs are tape variables.

    Raises:
        NumericalError: if a search direction has non-positive curvature,
            naming the iteration.
    """
    if tol <= 0.0:
        raise InvalidInputError(f"cg_solve tolerance must be positive, got {tol}")
    b_val = ad.value_of(b)
    single = b_val.ndim == 1
    B = ad.reshape(b, (b_val.shape[0], 1)) if single else b
    b_val = b_val.reshape(b_val.shape[0], -1)

    b_norm = np.linalg.norm(b_val, axis=0)
    if not np.any(b_norm > 0.0):
        return CgResult(np.zeros_like(ad.value_of(b)), True, 0, 0.0)
    safe_norm = np.where(b_norm > 0.0, b_norm, 1.0)

    x: Any = np.zeros_like(b_val)
    r = B
    p = r
    rr = ad.dot(r, r, axis=0)
    residual = np.sqrt(ad.value_of(rr)) / safe_norm
    active = (b_norm > 0.0) & (residual > tol)

    iteration = 0
    while active.any() and iteration < max_iter:
        iteration += 1
        on = active.astype(np.float64)
        off = 1.0 - on
        Ap = apply_A(p)
        pAp = ad.dot(p, Ap, axis=0)
        curvature = ad.value_of(pAp)
        if np.any(active & (curvature <= 0.0)):
            bad = float(curvature[active & (curvature <= 0.0)][0])
            raise NumericalError(
                f"cg_solve: non-positive curvature d^T A d = {bad:.3e} at iteration {iteration}",
                iteration=iteration,
            )
        alpha = ad.mul(on, ad.div(rr, ad.add(ad.mul(pAp, on), off)))
        x = ad.add(x, ad.mul(alpha, p))
        r = ad.sub(r, ad.mul(alpha, Ap))
        rr_next = ad.dot(r, r, axis=0)
        beta = ad.mul(on, ad.div(rr_next, ad.add(ad.mul(rr, on), off)))
        p = ad.add(r, ad.mul(beta, p))
        rr = rr_next
        residual = np.sqrt(ad.value_of(rr)) / safe_norm
        active = active & (residual > tol)

    converged = not active.any()
    if single:
        x = ad.reshape(x, (b_val.shape[0],))
    return CgResult(x, converged, iteration, float(residual.max()))


def default_krylov_dim(n: int, k: int = DEFAULT_KRYLOV_DIM) -> int:
    return max(1, min(k, n))


def _embed_tridiagonal(alphas: list[Any], betas: list[Any], cols: int) -> Any:
    """Batch of k x k tridiagonal matrices from per-column coefficient lists."""
    k = len(alphas)
    diag_basis = np.zeros((k, k * k))
    diag_basis[np.arange(k), np.arange(k) * (k + 1)] = 1.0
    H = ad.reshape(ad.matmul(ad.stack(alphas, axis=-1), diag_basis), (cols, k, k))
    if k > 1:
        off_basis = np.zeros((k - 1, k * k))
        rows = np.arange(k - 1)
        off_basis[rows, rows * k + rows + 1] = 1.0
        off_basis[rows, (rows + 1) * k + rows] = 1.0
        H = ad.add(H, ad.reshape(ad.matmul(ad.stack(betas, axis=-1), off_basis), (cols, k, k)))
    return H


def lanczos_sqrt_vec(apply_Sigma: MatVec, xi: Any, k: int) -> Any:
    """Approximate ``Sigma^{1/2} xi`` from a k-dimensional Krylov subspace.

    Runs the Lanczos three-term recurrence from ``d_1 = xi / ||xi||`` building
    the orthonormal basis D and tridiagonal H, and returns
    ``||xi|| * D @ sqrtm(H) @ e_1``. Each new basis vector is reorthogonalized
    against all previous ones with two passes of modified Gram-Schmidt.
    A column whose next ``beta`` falls below `HAPPY_BREAKDOWN_TOL` stops
    growing its basis (its effective k shrinks); negative eigenvalues of H are
    clamped to zero.

    Raises:
        InvalidInputError: if `xi` (or any of its columns) is zero or k < 1.
    """
    if k < 1:
        raise InvalidInputError(f"Krylov dimension must be at least 1, got {k}")
    xi_val = ad.value_of(xi)
    single = xi_val.ndim == 1
    n = xi_val.shape[0]
    X = ad.reshape(xi, (n, 1)) if single else xi
    cols = 1 if single else xi_val.shape[1]
    if np.any(np.linalg.norm(xi_val.reshape(n, cols), axis=0) == 0.0):
        raise InvalidInputError("lanczos_sqrt_vec: xi must be nonzero")
    k = min(k, n)

    xi_norm = ad.sqrt(ad.dot(X, X, axis=0))
    d = ad.div(X, xi_norm)
    basis = [d]
    alphas: list[Any] = []
    betas: list[Any] = []
    d_prev: Any = None
    beta: Any = None
    active = np.ones(cols, dtype=bool)

    for j in range(k):
        w = apply_Sigma(d)
        if beta is not None:
            w = ad.sub(w, ad.mul(beta, d_prev))
        alpha = ad.dot(d, w, axis=0)
        alphas.append(alpha)
        if j == k - 1:
            break
        w = ad.sub(w, ad.mul(alpha, d))
        for _ in range(2):
            for q in basis:
                w = ad.sub(w, ad.mul(ad.dot(q, w, axis=0), q))
        ww = ad.dot(w, w, axis=0)
        active = active & (np.sqrt(np.maximum(ad.value_of(ww), 0.0)) >= HAPPY_BREAKDOWN_TOL)
        if not active.any():
            logger.debug("lanczos happy breakdown after %d of %d steps", j + 1, k)
            break
        on = active.astype(np.float64)
        off = 1.0 - on
        beta = ad.mul(ad.sqrt(ad.add(ad.mul(ww, on), off)), on)
        d_prev = d
        d = ad.mul(ad.div(w, ad.add(beta, off)), on)
        basis.append(d)
        betas.append(beta)

    H = _embed_tridiagonal(alphas, betas, cols)
    first_column = ad.getitem(ad.sym_sqrtm(H), (slice(None), slice(None), 0))
    D = ad.stack(basis, axis=-1)
    y = ad.mul(ad.reduce_sum(ad.mul(D, first_column), axis=-1), xi_norm)
    if single:
        y = ad.reshape(y, (n,))
    return y


def dense_sqrt_action(sigma: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Exact ``Sigma^{1/2} xi`` by dense eigendecomposition (clamped at zero)."""
    sigma = 0.5 * (sigma + sigma.T)
    w, v = np.linalg.eigh(sigma)
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return root @ xi
