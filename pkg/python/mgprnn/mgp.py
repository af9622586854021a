"""Multitask Gaussian process posteriors on an hourly reference grid.

The prior over an encounter's latent values is ``K_task (x) K_time`` with an
Ornstein-Uhlenbeck time kernel; observations add per-variable white noise.
`posterior_moments` conditions on the observed entries only, using conjugate
gradients through the masked Kronecker covariance, and `sample_latents` draws
reparameterized samples ``mu + Sigma^{1/2} xi`` with Lanczos square roots.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable

import numpy as np

from mgprnn import autodiff as ad
from mgprnn.exceptions import (
    InvalidHyperparameterError,
    InvalidInputError,
    NumericalError,
    ValidationError,
)
from mgprnn.linalg import (
    DEFAULT_CG_MAX_ITER,
    DEFAULT_CG_TOL,
    DEFAULT_JITTER,
    MaskedKroneckerCov,
    VecOrdering,
    add_jitter,
    cg_solve,
    default_krylov_dim,
    kron_matvec,
    lanczos_sqrt_vec,
    ou_kernel_matrix,
)

if TYPE_CHECKING:
    from mgprnn.data import EncounterRecord

__all__ = [
    "MgpMode",
    "MgpHyperparams",
    "BoundHyperparams",
    "PosteriorGaussian",
    "posterior_moments",
    "posterior_mean_only",
    "sample_latents",
    "check_centered",
]

logger = logging.getLogger(__name__)

# softplus(SOFTPLUS_INV_ONE) == 1
SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))
CENTERING_TOL = 0.1


class MgpMode(str, Enum):
    MULTITASK = "multitask"
    INDEPENDENT_SHARED = "independent-shared"
    INDEPENDENT_PER_VARIABLE = "independent-per-variable"

    @property
    def is_multitask(self) -> bool:
        return self is MgpMode.MULTITASK


@dataclass(frozen=True)
class BoundHyperparams:
    """Hyperparameters in natural units, possibly as tape variables.

    `task_cov` is None in the independent modes (identity task covariance).
    """

    mode: MgpMode
    num_vars: int
    task_cov: Any
    noise_vars: Any
    lengthscale: Any
    leaves: dict[str, ad.Var] = field(default_factory=dict)

    def lengthscale_for(self, variable: int) -> Any:
        if ad.value_of(self.lengthscale).ndim == 0:
            return self.lengthscale
        return ad.getitem(self.lengthscale, variable)


@dataclass
class MgpHyperparams:
    """Unconstrained MGP hyperparameters.

    ``K_task = L L^T`` where L takes the strict lower triangle of
    `task_factor` and softplus of its diagonal; the upper triangle is unused.
    Noise variances and length scales are stored as logs.
    """

    task_factor: np.ndarray
    log_noise: np.ndarray
    log_lengthscale: np.ndarray
    mode: MgpMode = MgpMode.MULTITASK

    PREFIX = "mgp."

    def __post_init__(self) -> None:
        self.mode = MgpMode(self.mode)
        self.task_factor = np.asarray(self.task_factor, dtype=np.float64)
        self.log_noise = np.asarray(self.log_noise, dtype=np.float64)
        self.log_lengthscale = np.asarray(self.log_lengthscale, dtype=np.float64)
        m = self.num_vars
        if self.task_factor.shape != (m, m):
            raise InvalidHyperparameterError(
                f"task_factor must be {m}x{m}, got {self.task_factor.shape}"
            )
        expected = (m,) if self.mode is MgpMode.INDEPENDENT_PER_VARIABLE else ()
        if self.log_lengthscale.shape != expected:
            raise InvalidHyperparameterError(
                f"{self.mode.value} mode needs log_lengthscale of shape {expected}, "
                f"got {self.log_lengthscale.shape}"
            )
        for name, value in self.to_params().items():
            if not np.all(np.isfinite(value)):
                raise InvalidHyperparameterError(f"{name} must be finite")

    @property
    def num_vars(self) -> int:
        return self.log_noise.shape[0]

    @classmethod
    def initial(
        cls,
        num_vars: int,
        mode: MgpMode | str = MgpMode.MULTITASK,
        lengthscale: float | Sequence[float] = 4.0,
        noise: float = 0.1,
    ) -> "MgpHyperparams":
        """K_task = I, noise variance `noise` and length scale(s) `lengthscale` hours."""
        mode = MgpMode(mode)
        if noise <= 0.0:
            raise InvalidHyperparameterError(f"initial noise variance must be positive, got {noise}")
        scales = np.asarray(lengthscale, dtype=np.float64)
        if np.any(scales <= 0.0):
            raise InvalidHyperparameterError(f"initial length scale must be positive, got {lengthscale}")
        if mode is MgpMode.INDEPENDENT_PER_VARIABLE:
            scales = np.broadcast_to(scales, (num_vars,)).copy()
        elif scales.ndim != 0:
            if not np.all(scales == scales.reshape(-1)[0]):
                raise InvalidHyperparameterError(
                    f"{mode.value} mode shares one length scale, got {lengthscale}"
                )
            scales = scales.reshape(-1)[0]
        return cls(
            task_factor=np.eye(num_vars) * SOFTPLUS_INV_ONE,
            log_noise=np.full(num_vars, np.log(noise)),
            log_lengthscale=np.log(scales),
            mode=mode,
        )

    def to_params(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name. The task factor is trainable only in multitask mode."""
        params = {}
        if self.mode.is_multitask:
            params[self.PREFIX + "task_factor"] = self.task_factor
        params[self.PREFIX + "log_noise"] = self.log_noise
        params[self.PREFIX + "log_lengthscale"] = self.log_lengthscale
        return params

    def with_params(self, params: Mapping[str, np.ndarray]) -> "MgpHyperparams":
        return MgpHyperparams(
            task_factor=params.get(self.PREFIX + "task_factor", self.task_factor),
            log_noise=params[self.PREFIX + "log_noise"],
            log_lengthscale=params[self.PREFIX + "log_lengthscale"],
            mode=self.mode,
        )

    def bind(self, tape: ad.Tape | None = None) -> BoundHyperparams:
        """Natural-unit hyperparameters; with a tape, the raw parameters become leaves."""
        params: dict[str, Any] = dict(self.to_params())
        leaves: dict[str, ad.Var] = {}
        if tape is not None:
            for name, value in params.items():
                leaves[name] = tape.leaf(value, name=name)
            params = dict(leaves)
        task_cov = None
        if self.mode.is_multitask:
            raw = params[self.PREFIX + "task_factor"]
            m = self.num_vars
            eye = np.eye(m)
            factor = ad.add(ad.mul(raw, np.tril(np.ones((m, m)), -1)), ad.mul(ad.softplus(raw), eye))
            task_cov = ad.matmul(factor, ad.transpose(factor))
        return BoundHyperparams(
            mode=self.mode,
            num_vars=self.num_vars,
            task_cov=task_cov,
            noise_vars=ad.exp(params[self.PREFIX + "log_noise"]),
            lengthscale=ad.exp(params[self.PREFIX + "log_lengthscale"]),
            leaves=leaves,
        )

    def task_covariance(self) -> np.ndarray:
        bound = self.bind()
        if bound.task_cov is None:
            return np.eye(self.num_vars)
        return ad.value_of(bound.task_cov)

    def noise_variances(self) -> np.ndarray:
        return np.exp(self.log_noise)

    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscale)


@dataclass(frozen=True)
class PosteriorGaussian:
    """Gaussian over the M*X grid latents, variable-major.

    `cov_action` maps a vector (or an (M*X, S) block) to ``Sigma_z @ v``.
    """

    mean: Any
    cov_action: Callable[[Any], Any]
    grid_times: np.ndarray
    num_vars: int
    encounter_id: str | None = None

    @property
    def num_grid(self) -> int:
        return len(self.grid_times)

    @property
    def dim(self) -> int:
        return self.num_vars * self.num_grid

    def mean_matrix(self) -> Any:
        return VecOrdering.unflatten(self.mean, self.num_vars, self.num_grid)

    def dense_covariance(self) -> np.ndarray:
        """Materialize Sigma_z column by column through `cov_action`."""
        return ad.value_of(self.cov_action(np.eye(self.dim)))


def _as_bound(hp: MgpHyperparams | BoundHyperparams) -> BoundHyperparams:
    return hp.bind() if isinstance(hp, MgpHyperparams) else hp


def _check_grid(grid_times: Any) -> np.ndarray:
    grid = np.asarray(grid_times, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise InvalidInputError("grid_times must contain at least one time")
    if grid.size > 1:
        steps = np.diff(grid)
        if np.any(steps <= 0.0) or not np.allclose(steps, steps[0]):
            raise InvalidInputError("grid_times must be increasing and evenly spaced")
    return grid


class _Solver:
    """CG solves that attach the encounter id to failures."""

    def __init__(self, encounter_id: str | None, tol: float, max_iter: int) -> None:
        self.encounter_id = encounter_id
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, apply_A: Callable[[Any], Any], b: Any) -> Any:
        try:
            result = cg_solve(apply_A, b, tol=self.tol, max_iter=self.max_iter)
        except NumericalError as exc:
            raise exc.with_encounter(self.encounter_id) if self.encounter_id else exc
        if not result.converged:
            err = NumericalError(
                f"cg_solve did not converge in {result.iterations} iterations "
                f"(relative residual {result.relative_residual:.3e})",
                iteration=result.iterations,
                encounter_id=self.encounter_id,
            )
            logger.error("%s", err)
            raise err
        return result.x


def posterior_moments(
    enc: "EncounterRecord",
    grid_times: Any,
    hp: MgpHyperparams | BoundHyperparams,
    *,
    cg_tol: float = DEFAULT_CG_TOL,
    cg_max_iter: int = DEFAULT_CG_MAX_ITER,
    jitter: float = DEFAULT_JITTER,
) -> PosteriorGaussian:
    """Posterior mean and covariance action of the grid latents given `enc`'s observations.

    The mean is ``(K_task (x) K_XT)[:, observed] Sigma^{-1} y`` and the
    covariance action is ``v -> (K_task (x) K_X) v - C Sigma^{-1} C^T v`` with
    C the observed cross-covariance columns; every ``Sigma^{-1}`` is a CG
    solve. In the independent modes the computation runs per variable.

    Raises:
        InvalidHyperparameterError: on non-positive length scales.
        NumericalError: if CG breaks down or does not converge; the message
            names the encounter.
    """
    bound = _as_bound(hp)
    grid = _check_grid(grid_times)
    times = np.asarray(enc.obs_times, dtype=np.float64)
    variables = np.asarray(enc.obs_vars, dtype=np.intp)
    values = np.asarray(enc.obs_values, dtype=np.float64)
    if variables.size and (variables.min() < 0 or variables.max() >= bound.num_vars):
        raise ValidationError(
            f"encounter {enc.id}: observation variable outside 0..{bound.num_vars - 1}"
        )
    solve = _Solver(enc.id, cg_tol, cg_max_iter)
    if bound.task_cov is None:
        mean, cov_action = _independent_posterior(grid, times, variables, values, bound, solve, jitter)
    else:
        mean, cov_action = _multitask_posterior(grid, times, variables, values, bound, solve, jitter)
    return PosteriorGaussian(mean, cov_action, grid, bound.num_vars, enc.id)


def _multitask_posterior(grid, times, variables, values, bound, solve, jitter):
    task_cov = bound.task_cov
    lengthscale = bound.lengthscale
    prior_grid = add_jitter(ou_kernel_matrix(grid, grid, lengthscale).entries, jitter)

    def prior_action(v):
        return kron_matvec(task_cov, prior_grid, v)

    if times.size == 0:
        return np.zeros(bound.num_vars * len(grid)), prior_action

    obs_times, time_index = np.unique(times, return_inverse=True)
    order = np.lexsort((time_index, variables))
    mask = tuple(zip(variables[order].tolist(), time_index[order].tolist()))
    y = values[order]

    cov = MaskedKroneckerCov(
        task_cov=task_cov,
        time_corr=add_jitter(ou_kernel_matrix(obs_times, obs_times, lengthscale).entries, jitter),
        noise_vars=bound.noise_vars,
        mask=mask,
    )
    cross_grid = ou_kernel_matrix(grid, obs_times, lengthscale).entries
    cross_obs = ad.transpose(cross_grid)
    full_len = cov.num_vars * cov.num_times

    def cross(a):
        shape = (full_len,) + ad.value_of(a).shape[1:]
        return kron_matvec(task_cov, cross_grid, ad.scatter(a, cov.flat_index, shape))

    def cross_t(v):
        return ad.getitem(kron_matvec(task_cov, cross_obs, v), cov.flat_index)

    mean = cross(solve(cov.matvec, y))

    def cov_action(v):
        return ad.sub(prior_action(v), cross(solve(cov.matvec, cross_t(v))))

    return mean, cov_action


def _univariate_posterior(grid, times, values, lengthscale, noise, solve, jitter):
    prior = add_jitter(ou_kernel_matrix(grid, grid, lengthscale).entries, jitter)
    if times.size == 0:
        return np.zeros(len(grid)), lambda v: ad.matmul(prior, v)

    gram = add_jitter(ou_kernel_matrix(times, times, lengthscale).entries, jitter)
    cross = ou_kernel_matrix(grid, times, lengthscale).entries
    cross_t = ad.transpose(cross)

    def matvec(v):
        return ad.add(ad.matmul(gram, v), ad.mul(noise, v))

    mean = ad.matmul(cross, solve(matvec, values))

    def action(v):
        return ad.sub(ad.matmul(prior, v), ad.matmul(cross, solve(matvec, ad.matmul(cross_t, v))))

    return mean, action


def _independent_posterior(grid, times, variables, values, bound, solve, jitter):
    num_grid = len(grid)
    means = []
    actions = []
    for m in range(bound.num_vars):
        sel = variables == m
        mean_m, action_m = _univariate_posterior(
            grid,
            times[sel],
            values[sel],
            bound.lengthscale_for(m),
            ad.getitem(bound.noise_vars, m),
            solve,
            jitter,
        )
        means.append(mean_m)
        actions.append(action_m)

    def cov_action(v):
        blocks = [
            action(ad.getitem(v, slice(m * num_grid, (m + 1) * num_grid)))
            for m, action in enumerate(actions)
        ]
        return ad.concat(blocks, axis=0)

    return ad.concat(means, axis=0), cov_action


def posterior_mean_only(
    enc: "EncounterRecord",
    grid_times: Any,
    hp: MgpHyperparams | BoundHyperparams,
    **kwargs: Any,
) -> Any:
    """Posterior mean reshaped to M x X."""
    return posterior_moments(enc, grid_times, hp, **kwargs).mean_matrix()


def sample_latents(
    post: PosteriorGaussian,
    num_samples: int,
    k: int | None = None,
    rng_seed: int | np.random.SeedSequence | np.random.Generator | None = None,
    *,
    xi: np.ndarray | None = None,
) -> Any:
    """Draw `num_samples` latent matrices ``mu + Sigma^{1/2} xi_s``, shape (S, M, X).

    `xi` of shape (M*X, S) fixes the standard normal draws; otherwise they
    come from `rng_seed`. All S samples share one batched Lanczos run.
    """
    if num_samples < 1:
        raise InvalidInputError(f"num_samples must be at least 1, got {num_samples}")
    dim = post.dim
    if xi is None:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        xi = rng.standard_normal((dim, num_samples))
    xi = np.asarray(xi, dtype=np.float64).reshape(dim, num_samples)
    k = default_krylov_dim(dim) if k is None else default_krylov_dim(dim, k)

    root = lanczos_sqrt_vec(post.cov_action, xi, k)
    samples = ad.add(ad.reshape(post.mean, (dim, 1)), root)
    return ad.reshape(ad.transpose(samples), (num_samples, post.num_vars, post.num_grid))


def check_centered(
    records: Sequence["EncounterRecord"],
    num_vars: int,
    tol: float = CENTERING_TOL,
    strict: bool = False,
) -> list[int]:
    """Variables whose pooled observation mean exceeds `tol` in magnitude.

    The zero-mean prior assumes standardized inputs. Offenders are logged;
    with `strict` they raise ValidationError.
    """
    sums = np.zeros(num_vars)
    counts = np.zeros(num_vars)
    for enc in records:
        np.add.at(sums, np.asarray(enc.obs_vars, dtype=np.intp), np.asarray(enc.obs_values))
        np.add.at(counts, np.asarray(enc.obs_vars, dtype=np.intp), 1.0)
    means = np.divide(sums, counts, out=np.zeros(num_vars), where=counts > 0)
    offenders = [int(m) for m in np.flatnonzero(np.abs(means) >= tol)]
    if offenders:
        message = "observations are not centered for variables %s (means %s)"
        if strict:
            raise ValidationError(message % (offenders, np.round(means[offenders], 3).tolist()))
        logger.warning(message, offenders, np.round(means[offenders], 3).tolist())
    return offenders
