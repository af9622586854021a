"""Classifier inputs assembled from latents, baseline covariates and medications.

Each grid hour j contributes the column ``[z_j, b, p_j]``: latent (or imputed)
values, the baseline covariates repeated at every step, and counts of
medication administrations per class in the window ``(j - 1, j]`` (the first
window is ``[0, 0]``). Administrations in the partial hour after the last
grid time count toward the last window.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from mgprnn import autodiff as ad
from mgprnn.data import EncounterRecord, StandardizationStats, hourly_impute
from mgprnn.exceptions import ShapeError

__all__ = [
    "medication_counts",
    "static_inputs",
    "assemble_inputs",
    "raw_inputs",
    "plr_features",
]


def medication_counts(enc: EncounterRecord, num_grid: int, num_meds: int) -> np.ndarray:
    """P x X administration counts per hourly window."""
    counts = np.zeros((num_meds, num_grid))
    for t, bits in enc.meds:
        if len(bits) != num_meds:
            raise ShapeError(f"encounter {enc.id}: medication vector of length {len(bits)}, expected {num_meds}")
        if t > enc.observed_until:
            continue
        counts[:, min(math.ceil(t), num_grid - 1)] += bits
    return counts


def static_inputs(enc: EncounterRecord, num_grid: int, num_meds: int) -> np.ndarray:
    """(B + P) x X block of repeated baseline covariates and medication counts."""
    baseline = np.repeat(np.asarray(enc.baseline, dtype=np.float64)[:, np.newaxis], num_grid, axis=1)
    return np.concatenate([baseline, medication_counts(enc, num_grid, num_meds)], axis=0)


def assemble_inputs(latents: Any, static: np.ndarray) -> Any:
    """Stack (S, M, X) latents over the shared static block into (S, M + B + P, X)."""
    shape = ad.value_of(latents).shape
    if len(shape) != 3 or static.shape[1] != shape[2]:
        raise ShapeError(f"cannot assemble latents {shape} with static block {static.shape}")
    tiled = np.broadcast_to(static, (shape[0],) + static.shape)
    return ad.concat([latents, tiled], axis=1)


def raw_inputs(enc: EncounterRecord, stats: StandardizationStats | int, num_meds: int) -> np.ndarray:
    """(M + B + P) x X inputs with hourly-imputed values in place of latents."""
    imputed = hourly_impute(enc, stats)
    return np.concatenate([imputed, static_inputs(enc, enc.num_grid, num_meds)], axis=0)


def plr_features(enc: EncounterRecord, stats: StandardizationStats | int, num_meds: int) -> np.ndarray:
    """Snapshot at the truncation time: last imputed values, baseline, cumulative medication counts."""
    imputed = hourly_impute(enc, stats)
    cumulative = medication_counts(enc, enc.num_grid, num_meds).sum(axis=1)
    return np.concatenate([imputed[:, -1], np.asarray(enc.baseline, dtype=np.float64), cumulative])
