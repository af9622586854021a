"""Seeded synthetic cohorts drawn from a known multitask GP.

Each encounter's latent functions are ``f = L g`` with ``K_task = L L^T`` and
g independent unit Ornstein-Uhlenbeck processes, sampled exactly by the AR(1)
recursion on the union of a fine grid and the observation times. The label
depends on the mean of each latent over the last `summary_window_hours`
before a per-encounter onset time drawn ahead of discharge. Positives end at
that onset with everything later removed; negatives end at discharge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from mgprnn.config import SyntheticSpec
from mgprnn.data import EncounterRecord
from mgprnn.exceptions import GenerationError

__all__ = [
    "SyntheticSpec",
    "GeneratedCohort",
    "default_task_factor",
    "generate_cohort",
]

logger = logging.getLogger(__name__)

INTERCEPT_BRACKET = (-50.0, 50.0)
CROSS_LOADING = 0.6
MAX_ONSET_FRACTION = 0.5


@dataclass(frozen=True)
class GeneratedCohort:
    records: list[EncounterRecord]
    manifest: dict[str, Any]

    @property
    def prevalence(self) -> float:
        return float(np.mean([r.label for r in self.records]))

    def observation_counts(self, num_vars: int) -> list[int]:
        counts = np.zeros(num_vars, dtype=np.int64)
        for record in self.records:
            np.add.at(counts, record.obs_vars, 1)
        return counts.tolist()


def default_task_factor(num_vars: int) -> np.ndarray:
    """Unit-variance factor with every variable loading on variable 0."""
    factor = np.eye(num_vars)
    if num_vars > 1:
        factor[1:, 0] = CROSS_LOADING
        factor[np.arange(1, num_vars), np.arange(1, num_vars)] = np.sqrt(1.0 - CROSS_LOADING**2)
    return factor


def _resolved(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    m = spec.num_vars
    intensity = spec.obs_intensity
    if intensity is None:
        intensity = np.geomspace(2.0, 0.02, m) if m > 1 else [2.0]
    link = spec.link_coefficients
    if link is None:
        link = np.zeros(m)
        link[: min(m, 2)] = (1.5, 1.0)[: min(m, 2)]
    scales = np.broadcast_to(np.asarray(spec.lengthscale, dtype=np.float64), (m,)).copy()
    factor = np.asarray(spec.task_factor, dtype=np.float64) if spec.task_factor is not None else default_task_factor(m)
    return {
        "task_factor": np.tril(factor),
        "noise_vars": np.asarray(spec.noise_vars if spec.noise_vars is not None else [0.1] * m, dtype=np.float64),
        "lengthscales": scales,
        "obs_intensity": np.asarray(intensity, dtype=np.float64),
        "missing_prob": np.asarray(spec.missing_prob if spec.missing_prob is not None else [0.0] * m, dtype=np.float64),
        "link_coefficients": np.asarray(link, dtype=np.float64),
        "baseline_coefficients": np.asarray(
            spec.baseline_coefficients if spec.baseline_coefficients is not None else [0.0] * spec.num_baseline,
            dtype=np.float64,
        ),
    }


def _ou_paths(times: np.ndarray, lengthscales: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance OU paths, one row per length scale, sampled exactly at `times`."""
    paths = np.empty((len(lengthscales), len(times)))
    paths[:, 0] = rng.standard_normal(len(lengthscales))
    for i in range(1, len(times)):
        rho = np.exp(-(times[i] - times[i - 1]) / lengthscales)
        paths[:, i] = rho * paths[:, i - 1] + np.sqrt(1.0 - rho**2) * rng.standard_normal(len(lengthscales))
    return paths


def _stay_lengths(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    sigma2 = np.log1p(spec.los_dispersion**2)
    mu = np.log(spec.mean_los_hours) - 0.5 * sigma2
    stays = rng.lognormal(mu, np.sqrt(sigma2), spec.num_encounters)
    return np.maximum(stays, spec.min_los_hours)


def _simulate_encounter(index, stay, spec, truth, rng):
    m = spec.num_vars
    obs_times = []
    for var in range(m):
        count = rng.poisson(truth["obs_intensity"][var] * stay)
        times = np.sort(rng.uniform(0.0, stay, count))
        keep = rng.uniform(size=count) >= truth["missing_prob"][var]
        obs_times.append(times[keep])

    low, high = spec.onset_lead_hours
    lead = min(rng.uniform(low, high), MAX_ONSET_FRACTION * stay)
    onset = float(stay - lead)

    fine = np.unique(np.concatenate([np.arange(0.0, stay, spec.fine_grid_hours), [onset, stay]]))
    all_times, inverse = np.unique(np.concatenate([fine] + obs_times), return_inverse=True)
    latent = truth["task_factor"] @ _ou_paths(all_times, truth["lengthscales"], rng)

    obs = []
    offset = len(fine)
    for var, times in enumerate(obs_times):
        columns = inverse[offset : offset + len(times)]
        offset += len(times)
        noise = rng.standard_normal(len(times)) * np.sqrt(truth["noise_vars"][var])
        obs.extend((float(t), var, float(v)) for t, v in zip(times, latent[var, columns] + noise))
    obs.sort(key=lambda o: (o[0], o[1]))

    window = inverse[: len(fine)][(fine >= onset - spec.summary_window_hours) & (fine <= onset)]
    summary = latent[:, window].mean(axis=1)

    baseline = rng.standard_normal(spec.num_baseline)
    meds = []
    if spec.num_meds:
        for t in np.sort(rng.uniform(0.0, stay, rng.poisson(spec.med_intensity * stay))):
            bits = (rng.uniform(size=spec.num_meds) < 0.5).astype(int)
            if not bits.any():
                bits[rng.integers(spec.num_meds)] = 1
            meds.append((float(t), tuple(int(b) for b in bits)))

    score = float(summary @ truth["link_coefficients"] + baseline @ truth["baseline_coefficients"])
    record = EncounterRecord(
        id=f"enc{index:06d}",
        baseline=tuple(float(b) for b in baseline),
        obs=tuple(obs),
        meds=tuple(meds),
        label=0,
        event_time=float(stay),
    )
    return record, score, onset


def _cut_at_onset(record: EncounterRecord, onset: float) -> EncounterRecord:
    return replace(
        record,
        obs=tuple(o for o in record.obs if o[0] <= onset),
        meds=tuple(m for m in record.meds if m[0] <= onset),
        event_time=onset,
    )


def _calibrate_intercept(scores: np.ndarray, prevalence: float) -> float:
    if np.ptp(scores) == 0.0:
        raise GenerationError(
            "label link has no dependence on the latents; rescale link_coefficients "
            "or baseline_coefficients"
        )
    try:
        return float(brentq(lambda c: expit(c + scores).mean() - prevalence, *INTERCEPT_BRACKET, xtol=1e-12))
    except ValueError as exc:
        raise GenerationError(
            f"cannot calibrate prevalence {prevalence} within intercept range {INTERCEPT_BRACKET}; "
            "rescale link_coefficients"
        ) from exc


def _threshold_for(scores: np.ndarray, prevalence: float) -> float:
    num_pos = int(round(prevalence * len(scores)))
    ranked = np.sort(scores)[::-1]
    if num_pos == 0 or num_pos == len(scores) or ranked[num_pos - 1] == ranked[num_pos]:
        raise GenerationError(
            f"label link cannot separate a prevalence of {prevalence} among {len(scores)} "
            "encounters; rescale link_coefficients"
        )
    return float(0.5 * (ranked[num_pos - 1] + ranked[num_pos]))


def generate_cohort(spec: SyntheticSpec) -> GeneratedCohort:
    """Simulate `spec.num_encounters` encounters and their ground-truth manifest.

    Raises:
        GenerationError: when the prevalence target cannot be met through the
            label link.
    """
    spec.validate()
    truth = _resolved(spec)
    rng = np.random.default_rng(spec.seed)
    stays = _stay_lengths(spec, rng)

    simulated = [_simulate_encounter(i, stay, spec, truth, rng) for i, stay in enumerate(stays)]
    scores = np.array([score for _, score, _ in simulated])

    link: dict[str, float] = {}
    if spec.label_mode == "logistic":
        intercept = _calibrate_intercept(scores, spec.prevalence)
        labels = (rng.uniform(size=len(scores)) < expit(intercept + scores)).astype(int)
        link["intercept"] = intercept
    else:
        threshold = _threshold_for(scores, spec.prevalence)
        labels = (scores > threshold).astype(int)
        link["threshold"] = threshold

    records = []
    onsets: dict[str, float] = {}
    discharges: dict[str, float] = {}
    for (record, _, onset), label in zip(simulated, labels):
        discharges[record.id] = record.event_time
        if label:
            onsets[record.id] = onset
            record = _cut_at_onset(record, onset)
        records.append(replace(record, label=int(label)))
    factor = truth["task_factor"]
    manifest = {
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "task_factor": factor.tolist(),
        "task_covariance": (factor @ factor.T).tolist(),
        "noise_vars": truth["noise_vars"].tolist(),
        "lengthscales": truth["lengthscales"].tolist(),
        "obs_intensity": truth["obs_intensity"].tolist(),
        "missing_prob": truth["missing_prob"].tolist(),
        "link_coefficients": truth["link_coefficients"].tolist(),
        "baseline_coefficients": truth["baseline_coefficients"].tolist(),
        "label_mode": spec.label_mode,
        **link,
        "onset_hours": onsets,
        "discharge_hours": discharges,
        "prevalence": float(labels.mean()),
    }
    cohort = GeneratedCohort(records, manifest)
    manifest["observation_counts"] = cohort.observation_counts(spec.num_vars)
    logger.info(
        "generated %d encounters, prevalence %.3f (target %.3f)",
        len(records),
        manifest["prevalence"],
        spec.prevalence,
    )
    return cohort
