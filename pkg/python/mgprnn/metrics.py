"""Discrimination metrics, horizon sweeps and a configurable threshold scorer."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from mgprnn.data import EncounterRecord, truncate_to_horizon
from mgprnn.exceptions import ConfigError, InvalidInputError, MetricUndefinedError

__all__ = [
    "ScoredCohort",
    "OperatingPoint",
    "ScoreRange",
    "ThresholdScoreTable",
    "auroc",
    "aupr",
    "precision_at_sensitivity",
    "threshold_score",
    "threshold_scorer",
    "horizon_sweep",
    "write_sweep_csv",
    "precision_column",
]

logger = logging.getLogger(__name__)

Scorer = Callable[[EncounterRecord], float]


@dataclass(frozen=True)
class ScoredCohort:
    ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray
    horizon: float = 0.0

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if not (len(self.ids) == scores.size == labels.size):
            raise InvalidInputError("ids, scores and labels must have equal lengths")
        if not np.all(np.isfinite(scores)):
            raise InvalidInputError("scores must be finite")
        if not np.all((labels == 0) | (labels == 1)):
            raise InvalidInputError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_lists(
        cls,
        scores: Sequence[float],
        labels: Sequence[int],
        ids: Sequence[str] | None = None,
        horizon: float = 0.0,
    ) -> "ScoredCohort":
        if ids is None:
            ids = [str(i) for i in range(len(scores))]
        return cls(tuple(ids), np.asarray(scores), np.asarray(labels), horizon)

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def num_negative(self) -> int:
        return int(self.labels.size - self.labels.sum())

    def __len__(self) -> int:
        return self.labels.size


def auroc(sc: ScoredCohort) -> float:
    """Probability a random positive outranks a random negative, ties counted 1/2."""
    n_pos, n_neg = sc.num_positive, sc.num_negative
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(f"AU-ROC needs both classes, got {n_pos} positive and {n_neg} negative")
    ranks = rankdata(sc.scores, method="average")
    u = ranks[sc.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pr_steps(sc: ScoredCohort) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative TP/FP counts at each distinct threshold, highest first."""
    order = np.argsort(-sc.scores, kind="mergesort")
    scores = sc.scores[order]
    labels = sc.labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1 - labels)
    group_end = np.r_[np.flatnonzero(np.diff(scores) != 0.0), scores.size - 1]
    return scores[group_end], tp[group_end], fp[group_end], group_end


def aupr(sc: ScoredCohort) -> float:
    """Average precision: sum over distinct thresholds of precision times recall gained."""
    n_pos = sc.num_positive
    if n_pos == 0:
        raise MetricUndefinedError("AU-PR needs at least one positive")
    _, tp, fp, _ = _pr_steps(sc)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


class OperatingPoint(NamedTuple):
    precision: float
    threshold: float
    sensitivity: float
    all_positive: bool


def precision_at_sensitivity(sc: ScoredCohort, target_sens: float = 0.85) -> OperatingPoint:
    """Precision at the largest threshold whose sensitivity reaches `target_sens`.

    Items scoring at or above the threshold are predicted positive.
    `all_positive` flags the case where only flagging every item reaches the
    target, in which case the precision equals the prevalence.
    """
    if not 0.0 <= target_sens <= 1.0:
        raise InvalidInputError(f"target sensitivity must lie in [0, 1], got {target_sens}")
    n_pos = sc.num_positive
    if n_pos == 0:
        raise MetricUndefinedError("precision at sensitivity needs at least one positive")
    thresholds, tp, fp, _ = _pr_steps(sc)
    sensitivity = tp / n_pos
    k = int(np.flatnonzero(sensitivity >= target_sens - 1e-12)[0])
    all_positive = k == len(thresholds) - 1
    return OperatingPoint(
        precision=float(tp[k] / (tp[k] + fp[k])),
        threshold=float(thresholds[k]),
        sensitivity=float(sensitivity[k]),
        all_positive=bool(all_positive),
    )


@dataclass(frozen=True)
class ScoreRange:
    """Half-open value range [lower, upper) worth `points`."""

    lower: float
    upper: float
    points: int

    def contains(self, value: float) -> bool:
        return self.lower <= value < self.upper


@dataclass(frozen=True)
class ThresholdScoreTable:
    """Per-variable point ranges summed into an early-warning score.

    Ranges of each variable must tile the real line without gaps or overlaps.
    Values are compared in the units the records carry (standardized after
    `load_cohort`).
    """

    ranges: Mapping[int, tuple[ScoreRange, ...]]
    trigger: int

    def __post_init__(self) -> None:
        for var, ranges in self.ranges.items():
            if not ranges:
                raise ConfigError(f"score table: variable {var} has no ranges")
            ordered = sorted(ranges, key=lambda r: r.lower)
            if ordered[0].lower != -math.inf or ordered[-1].upper != math.inf:
                raise ConfigError(f"score table: ranges of variable {var} do not cover the real line")
            for r in ordered:
                if r.points < 0 or r.upper <= r.lower:
                    raise ConfigError(f"score table: invalid range {r} for variable {var}")
            for left, right in zip(ordered, ordered[1:]):
                if left.upper > right.lower:
                    raise ConfigError(f"score table: overlapping ranges {left} and {right} for variable {var}")
                if left.upper < right.lower:
                    raise ConfigError(f"score table: gap between {left} and {right} for variable {var}")
            object.__setattr__(self, "ranges", {**self.ranges, var: tuple(ordered)})

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ThresholdScoreTable":
        """``{"trigger": n, "variables": {"0": [[lower, upper, points], ...]}}``; null bounds are infinite."""
        try:
            ranges = {
                int(var): tuple(
                    ScoreRange(
                        -math.inf if lo is None else float(lo),
                        math.inf if hi is None else float(hi),
                        int(points),
                    )
                    for lo, hi, points in entries
                )
                for var, entries in data["variables"].items()
            }
            return cls(ranges, int(data.get("trigger", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid score table: {exc}") from exc

    @property
    def max_points(self) -> int:
        return sum(max(r.points for r in ranges) for ranges in self.ranges.values())

    def points_for(self, variable: int, value: float) -> int:
        for r in self.ranges[variable]:
            if r.contains(value):
                return r.points
        return 0


def threshold_score(enc: EncounterRecord, table: ThresholdScoreTable, at_time: float) -> int:
    """Sum of points for the latest value of each table variable at or before `at_time`."""
    latest: dict[int, float] = {}
    for t, m, v in enc.obs:
        if t > at_time:
            break
        if m in table.ranges:
            latest[m] = v
    return sum(table.points_for(m, v) for m, v in latest.items())


def threshold_scorer(table: ThresholdScoreTable) -> Scorer:
    """Scorer giving the table score at the end of the visible data, scaled to [0, 1]."""
    scale = table.max_points or 1

    def score(enc: EncounterRecord) -> float:
        return threshold_score(enc, table, enc.observed_until) / scale

    return score


def precision_column(target_sens: float) -> str:
    return f"precision_at_{int(round(target_sens * 100)):03d}"


def _sweep_row(records, scorer, horizon, target_sens) -> dict[str, Any]:
    truncated = [t for t in (truncate_to_horizon(enc, horizon) for enc in records) if t is not None]
    excluded = len(records) - len(truncated)
    logger.debug("horizon %sh: %d encounters, %d excluded", horizon, len(truncated), excluded)
    row: dict[str, Any] = {
        "horizon_hours": horizon,
        "n_encounters": len(truncated),
        "n_positive": sum(enc.label for enc in truncated),
        "auroc": None,
        "aupr": None,
        precision_column(target_sens): None,
        "n_excluded": excluded,
        "flagged": False,
    }
    sc = ScoredCohort(
        tuple(enc.id for enc in truncated),
        np.array([scorer(enc) for enc in truncated]),
        np.array([enc.label for enc in truncated]),
        horizon,
    )
    if sc.num_positive == 0 or sc.num_negative == 0:
        logger.warning("horizon %sh leaves a single-class cohort; metrics undefined", horizon)
        row["flagged"] = True
        return row
    row["auroc"] = auroc(sc)
    row["aupr"] = aupr(sc)
    row[precision_column(target_sens)] = precision_at_sensitivity(sc, target_sens).precision
    return row


def horizon_sweep(
    records: Sequence[EncounterRecord],
    scorer: Scorer,
    horizons: Sequence[float] = tuple(float(h) for h in range(13)),
    *,
    target_sens: float = 0.85,
    threads: int = 1,
) -> pd.DataFrame:
    """Metrics per prediction horizon, excluding encounters shorter than the horizon."""
    records = list(records)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda h: _sweep_row(records, scorer, float(h), target_sens), horizons))
    else:
        rows = [_sweep_row(records, scorer, float(h), target_sens) for h in horizons]
    return pd.DataFrame(rows)


def write_sweep_csv(table: pd.DataFrame, path: str | Path, target_sens: float = 0.85) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["horizon_hours", "n_encounters", "n_positive", "auroc", "aupr", precision_column(target_sens)]
    table[columns].to_csv(path, index=False)
    return path
