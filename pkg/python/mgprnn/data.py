"""Encounter records, cohort files, standardization and horizon truncation.

A cohort file is JSON lines, one encounter per line with exactly the fields
``id``, ``baseline``, ``obs`` (``[t, m, v]`` triples), ``meds``
(``[t, class_bits]`` pairs), ``label`` and ``event_time``. Times are hours since
admission.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from mgprnn.exceptions import DataError, ParseError, ValidationError

__all__ = [
    "SPLITS",
    "EncounterRecord",
    "StandardizationStats",
    "Cohort",
    "split_of",
    "parse_record",
    "read_cohort_file",
    "load_cohort",
    "save_cohort",
    "truncate_to_horizon",
    "truncate_at",
    "hourly_impute",
]

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
RECORD_FIELDS = ("id", "baseline", "obs", "meds", "label", "event_time")

Observation = tuple[float, int, float]
Administration = tuple[float, tuple[int, ...]]


@dataclass(frozen=True)
class EncounterRecord:
    """One encounter's irregular time series and label.

    `cutoff` is the last visible time when the record was truncated (None for
    a full record); `horizon` is the number of hours it hides before
    `event_time`.
    """

    id: str
    baseline: tuple[float, ...]
    obs: tuple[Observation, ...]
    meds: tuple[Administration, ...]
    label: int
    event_time: float
    cutoff: float | None = None

    @property
    def observed_until(self) -> float:
        return self.event_time if self.cutoff is None else self.cutoff

    @property
    def horizon(self) -> float:
        return self.event_time - self.observed_until

    @property
    def num_grid(self) -> int:
        return math.floor(self.observed_until) + 1

    def grid_times(self) -> np.ndarray:
        """Hourly reference grid 0, 1, ..., floor(observed_until)."""
        return np.arange(self.num_grid, dtype=np.float64)

    @property
    def num_baseline(self) -> int:
        return len(self.baseline)

    @cached_property
    def obs_times(self) -> np.ndarray:
        return np.array([o[0] for o in self.obs], dtype=np.float64)

    @cached_property
    def obs_vars(self) -> np.ndarray:
        return np.array([o[1] for o in self.obs], dtype=np.intp)

    @cached_property
    def obs_values(self) -> np.ndarray:
        return np.array([o[2] for o in self.obs], dtype=np.float64)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "baseline": list(self.baseline),
            "obs": [[t, m, v] for t, m, v in self.obs],
            "meds": [[t, list(bits)] for t, bits in self.meds],
            "label": self.label,
            "event_time": self.event_time,
        }


def _number(value: Any, what: str, line_number: int | None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{what} must be a number, got {value!r}", line_number)
    out = float(value)
    if not math.isfinite(out):
        raise ValidationError(_at(line_number, f"{what} must be finite"))
    return out


def _at(line_number: int | None, message: str) -> str:
    return message if line_number is None else f"line {line_number}: {message}"


def parse_record(data: Any, line_number: int | None = None) -> EncounterRecord:
    """Validate one decoded JSON object and build a canonical record.

    Observations after `event_time` are dropped, duplicates at the same
    (time, variable) are averaged and the result is sorted by (time, variable).
    """
    if not isinstance(data, dict):
        raise ParseError("encounter must be a JSON object", line_number)
    missing = [name for name in RECORD_FIELDS if name not in data]
    if missing:
        raise ParseError(f"missing fields {missing}", line_number)
    unknown = sorted(set(data) - set(RECORD_FIELDS))
    if unknown:
        raise ParseError(f"unknown fields {unknown}", line_number)

    enc_id = data["id"]
    if not isinstance(enc_id, str) or not enc_id:
        raise ParseError("id must be a non-empty string", line_number)
    label = data["label"]
    if label not in (0, 1) or isinstance(label, bool):
        raise ValidationError(_at(line_number, f"label must be 0 or 1, got {label!r}"))
    event_time = _number(data["event_time"], "event_time", line_number)
    if event_time < 0.0:
        raise ValidationError(_at(line_number, f"negative event_time {event_time}"))
    if not isinstance(data["baseline"], list):
        raise ParseError("baseline must be an array", line_number)
    baseline = tuple(_number(b, "baseline entry", line_number) for b in data["baseline"])

    if not isinstance(data["obs"], list):
        raise ParseError("obs must be an array", line_number)
    grouped: dict[tuple[float, int], list[float]] = defaultdict(list)
    for entry in data["obs"]:
        if not isinstance(entry, list) or len(entry) != 3:
            raise ParseError(f"observation must be [t, m, v], got {entry!r}", line_number)
        t = _number(entry[0], "observation time", line_number)
        m = entry[1]
        if isinstance(m, bool) or not isinstance(m, int):
            raise ParseError(f"variable index must be an integer, got {m!r}", line_number)
        v = _number(entry[2], "observation value", line_number)
        if t < 0.0:
            raise ValidationError(_at(line_number, f"negative observation time {t}"))
        if m < 0:
            raise ValidationError(_at(line_number, f"negative variable index {m}"))
        if t <= event_time:
            grouped[(t, m)].append(v)
    obs = tuple(
        (t, m, vals[0] if len(vals) == 1 else float(np.mean(vals)))
        for (t, m), vals in sorted(grouped.items())
    )

    if not isinstance(data["meds"], list):
        raise ParseError("meds must be an array", line_number)
    meds = []
    for entry in data["meds"]:
        if not isinstance(entry, list) or len(entry) != 2 or not isinstance(entry[1], list):
            raise ParseError(f"medication must be [t, class_bits], got {entry!r}", line_number)
        t = _number(entry[0], "medication time", line_number)
        if t < 0.0:
            raise ValidationError(_at(line_number, f"negative medication time {t}"))
        bits = tuple(entry[1])
        if any(b not in (0, 1) or isinstance(b, bool) for b in bits):
            raise ValidationError(_at(line_number, f"class_bits must be 0/1, got {entry[1]!r}"))
        if t <= event_time:
            meds.append((t, bits))
    meds.sort(key=lambda item: item[0])

    return EncounterRecord(
        id=enc_id,
        baseline=baseline,
        obs=obs,
        meds=tuple(meds),
        label=int(label),
        event_time=event_time,
    )


def read_cohort_file(path: str | Path) -> list[EncounterRecord]:
    """Parse a cohort file as stored, without transforms or standardization."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"cohort file not found: {path}")
    records = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line_number) from exc
            record = parse_record(data, line_number)
            if record.id in seen:
                raise ValidationError(f"line {line_number}: duplicate encounter id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    logger.debug("read %d encounters from %s", len(records), path)
    return records


def save_cohort(records: Iterable[EncounterRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict()))
            fh.write("\n")


def split_of(encounter_id: str) -> str:
    """80/10/10 train/valid/test assignment from a hash of the id."""
    bucket = int(hashlib.sha256(encounter_id.encode("utf-8")).hexdigest(), 16) % 10
    if bucket < 8:
        return "train"
    return "valid" if bucket == 8 else "test"


@dataclass(frozen=True)
class StandardizationStats:
    """Per-variable centering and scaling, applied after the log transform.

    Variables listed in `dropped` had zero variance or no observations in the
    training split; their observations are removed.
    """

    means: tuple[float, ...]
    stds: tuple[float, ...]
    log_transform: tuple[int, ...] = ()
    dropped: tuple[int, ...] = ()

    @property
    def num_vars(self) -> int:
        return len(self.means)

    @classmethod
    def compute(
        cls,
        records: Sequence[EncounterRecord],
        num_vars: int,
        log_transform: Sequence[int] = (),
    ) -> "StandardizationStats":
        log_vars = tuple(sorted(set(log_transform)))
        values: dict[int, list[float]] = defaultdict(list)
        for record in records:
            for _, m, v in _log_transformed(record, log_vars).obs:
                values[m].append(v)
        means, stds, dropped = [], [], []
        for m in range(num_vars):
            arr = np.asarray(values.get(m, []), dtype=np.float64)
            std = float(arr.std()) if arr.size else 0.0
            if std <= 0.0:
                logger.warning("dropping variable %d: zero variance in training split", m)
                dropped.append(m)
                means.append(0.0)
                stds.append(1.0)
            else:
                means.append(float(arr.mean()))
                stds.append(std)
        return cls(tuple(means), tuple(stds), log_vars, tuple(dropped))

    def apply(self, record: EncounterRecord) -> EncounterRecord:
        record = _log_transformed(record, self.log_transform)
        dropped = set(self.dropped)
        obs = []
        for t, m, v in record.obs:
            if m >= self.num_vars:
                raise ValidationError(
                    f"encounter {record.id}: variable {m} outside 0..{self.num_vars - 1}"
                )
            if m not in dropped:
                obs.append((t, m, (v - self.means[m]) / self.stds[m]))
        return replace(record, obs=tuple(obs))

    def to_dict(self) -> dict[str, Any]:
        return {
            "means": list(self.means),
            "stds": list(self.stds),
            "log_transform": list(self.log_transform),
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StandardizationStats":
        try:
            return cls(
                means=tuple(float(x) for x in data["means"]),
                stds=tuple(float(x) for x in data["stds"]),
                log_transform=tuple(int(x) for x in data.get("log_transform", ())),
                dropped=tuple(int(x) for x in data.get("dropped", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid standardization stats: {exc}") from exc


def _log_transformed(record: EncounterRecord, log_vars: Sequence[int]) -> EncounterRecord:
    if not log_vars:
        return record
    targets = set(log_vars)
    obs = []
    for t, m, v in record.obs:
        if m in targets:
            if v <= 0.0:
                raise ValidationError(
                    f"encounter {record.id}: variable {m} has non-positive value {v} "
                    "under log transform"
                )
            v = math.log(v)
        obs.append((t, m, v))
    return replace(record, obs=tuple(obs))


@dataclass(frozen=True)
class Cohort:
    """Standardized records with their split assignment."""

    records: tuple[EncounterRecord, ...]
    stats: StandardizationStats
    num_meds: int
    splits: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def num_vars(self) -> int:
        return self.stats.num_vars

    @property
    def num_baseline(self) -> int:
        return self.records[0].num_baseline if self.records else 0

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[EncounterRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [self.records[i] for i in self.splits.get(name, ())]


def _infer_num_vars(records: Sequence[EncounterRecord]) -> int:
    return max((int(r.obs_vars.max()) + 1 for r in records if r.obs), default=0)


def _infer_num_meds(records: Sequence[EncounterRecord]) -> int:
    widths = {len(bits) for r in records for _, bits in r.meds}
    if len(widths) > 1:
        raise ValidationError(f"inconsistent medication vector lengths {sorted(widths)}")
    return widths.pop() if widths else 0


def load_cohort(
    path: str | Path,
    *,
    num_vars: int | None = None,
    num_meds: int | None = None,
    log_transform: Sequence[int] = (),
    stats: StandardizationStats | None = None,
) -> Cohort:
    """Read, validate, split and standardize a cohort file.

    Statistics come from the training split unless `stats` is given (e.g. the
    statistics stored with a trained model).
    """
    raw = read_cohort_file(path)
    widths = {r.num_baseline for r in raw}
    if len(widths) > 1:
        raise ValidationError(f"inconsistent baseline lengths {sorted(widths)}")
    inferred_meds = _infer_num_meds(raw)
    if num_meds is None:
        num_meds = inferred_meds
    elif raw and inferred_meds not in (0, num_meds):
        raise ValidationError(f"medication vectors have length {inferred_meds}, expected {num_meds}")

    splits: dict[str, list[int]] = {name: [] for name in SPLITS}
    for i, record in enumerate(raw):
        splits[split_of(record.id)].append(i)

    if stats is None:
        if num_vars is None:
            num_vars = _infer_num_vars(raw)
        train = [raw[i] for i in splits["train"]]
        stats = StandardizationStats.compute(train, num_vars, log_transform)
    records = tuple(stats.apply(r) for r in raw)
    logger.info(
        "loaded %d encounters (%s)",
        len(records),
        ", ".join(f"{name}={len(idx)}" for name, idx in splits.items()),
    )
    return Cohort(
        records=records,
        stats=stats,
        num_meds=num_meds,
        splits={name: tuple(idx) for name, idx in splits.items()},
    )


def truncate_to_horizon(enc: EncounterRecord, horizon_hours: float) -> EncounterRecord | None:
    """Hide everything after ``event_time - horizon_hours``.

    Returns None when the horizon is negative or longer than the encounter;
    such encounters are excluded at that horizon.
    """
    if horizon_hours < 0.0 or horizon_hours > enc.event_time:
        return None
    return truncate_at(enc, enc.event_time - horizon_hours)


def truncate_at(enc: EncounterRecord, cutoff: float) -> EncounterRecord:
    """Keep observations and medications with time <= `cutoff`."""
    cutoff = float(min(cutoff, enc.event_time))
    return replace(
        enc,
        obs=tuple(o for o in enc.obs if o[0] <= cutoff),
        meds=tuple(m for m in enc.meds if m[0] <= cutoff),
        cutoff=cutoff,
    )


def hourly_impute(enc: EncounterRecord, stats: StandardizationStats | int) -> np.ndarray:
    """M x X matrix of hourly window means with last-observation-carried-forward.

    Window h covers [h, h + 1). Hours before a variable's first observation
    hold the standardized population mean, 0.
    """
    num_vars = stats if isinstance(stats, int) else stats.num_vars
    num_grid = enc.num_grid
    if not enc.obs:
        return np.zeros((num_vars, num_grid))
    frame = pd.DataFrame(
        {
            "var": enc.obs_vars,
            "hour": np.floor(enc.obs_times).astype(np.int64),
            "value": enc.obs_values,
        }
    )
    binned = frame.groupby(["var", "hour"])["value"].mean().unstack("hour")
    binned = binned.reindex(index=range(num_vars), columns=range(num_grid))
    return binned.ffill(axis=1).fillna(0.0).to_numpy(dtype=np.float64)
