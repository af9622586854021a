"""Timing of Lanczos square-root sampling against the dense path.

The covariance is a Kronecker prior ``K_task (x) K_time`` on an hourly grid;
the Lanczos path only uses its structured action, the dense path materializes
it and takes an eigendecomposition.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from mgprnn.config import BenchConfig
from mgprnn.linalg import add_jitter, dense_sqrt_action, kron_matvec, lanczos_sqrt_vec, ou_kernel_matrix
from mgprnn.synthetic import default_task_factor

__all__ = ["BenchRow", "run_bench"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchRow:
    size: int
    method: str
    krylov_dim: int | None
    seconds: float | None
    max_deviation: float | None
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(fn, repeats: int):
    best = np.inf
    result = None
    for _ in range(repeats):
        started = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - started)
    return result, best


def run_bench(cfg: BenchConfig, seed: int = 0) -> list[BenchRow]:
    """Rows per grid size: dense sampling (when under the cap) and Lanczos per k."""
    rng = np.random.default_rng(seed)
    factor = default_task_factor(cfg.num_vars)
    task_cov = factor @ factor.T
    rows = []
    for size in cfg.sizes:
        num_grid = size // cfg.num_vars
        grid = np.arange(num_grid, dtype=np.float64)
        time_cov = add_jitter(ou_kernel_matrix(grid, grid, cfg.lengthscale).entries)
        xi = rng.standard_normal(size)

        exact = None
        if size <= cfg.dense_cap:
            exact, seconds = _timed(lambda: dense_sqrt_action(np.kron(task_cov, time_cov), xi), cfg.repeats)
            rows.append(BenchRow(size, "dense", None, seconds, None))
        else:
            message = f"dense path refused: MX={size} exceeds dense_cap={cfg.dense_cap}"
            logger.info(message)
            rows.append(BenchRow(size, "dense", None, None, None, message))

        dims = list(cfg.krylov_dims)
        if size <= cfg.full_rank_max and size not in dims:
            dims.append(size)
        for k in dims:
            approx, seconds = _timed(
                lambda: lanczos_sqrt_vec(lambda v: kron_matvec(task_cov, time_cov, v), xi, k), cfg.repeats
            )
            deviation = None if exact is None else float(np.max(np.abs(approx - exact)))
            rows.append(BenchRow(size, "lanczos", k, seconds, deviation))

    for row in rows:
        logger.info(
            "bench MX=%d %s k=%s seconds=%s deviation=%s",
            row.size,
            row.method,
            row.krylov_dim,
            "n/a" if row.seconds is None else f"{row.seconds:.4f}",
            "n/a" if row.max_deviation is None else f"{row.max_deviation:.2e}",
        )
    return rows
