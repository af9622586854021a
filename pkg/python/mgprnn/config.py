"""Run configuration: dataclasses loaded from JSON with unknown keys rejected.

`RunConfig.from_dict` accepts the nested layout::

    {"train": {...}, "synthetic": {...}, "bench": {...}, "paths": {...},
     "horizons": [...], "score_table": {...}}

and `to_dict` returns the fully resolved configuration that every command
writes next to its outputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from mgprnn.exceptions import ConfigError

__all__ = [
    "VARIANTS",
    "TrainConfig",
    "SyntheticSpec",
    "BenchConfig",
    "PathsConfig",
    "RunConfig",
    "parse_horizons",
    "load_run_config",
]

logger = logging.getLogger(__name__)

VARIANTS = ("mgp-rnn", "mgp-rnn-mean", "gp-rnn-shared", "gp-rnn-indep", "raw-rnn", "plr")
LABEL_MODES = ("logistic", "threshold")

T = TypeVar("T")


def _from_mapping(cls: type[T], data: Any, section: str) -> T:
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _to_plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _to_plain(v) for k, v in value.items()}
    return value


def _require(condition: bool, section: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{section}: {message}")


@dataclass
class TrainConfig:
    """Optimization and model-size settings shared by every variant."""

    learning_rate: float = 0.001
    minibatch_size: int = 100
    mc_samples_train: int = 10
    mc_samples_test: int = 25
    l2_lambda: float = 1e-4
    max_epochs: int = 20
    patience: int = 2
    krylov_k: int = 32
    cg_tol: float = 1e-8
    cg_max_iter: int = 200
    seed: int = 0
    model_variant: str = "mgp-rnn"
    rnn_hidden: int = 64
    rnn_layers: int = 2
    grad_clip_norm: float = 5.0
    init_lengthscale: float | list[float] = 4.0
    init_noise: float = 0.1
    plr_lambdas: list[float] = field(default_factory=lambda: [1e-3, 1e-2, 1e-1])
    threads: int = 1
    log_transform: list[int] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Any) -> "TrainConfig":
        cfg = _from_mapping(cls, data, "train")
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def validate(self) -> None:
        s = "train"
        _require(self.learning_rate >= 0.0, s, "learning_rate must be nonnegative")
        _require(self.l2_lambda >= 0.0, s, "l2_lambda must be nonnegative")
        for name in (
            "minibatch_size",
            "mc_samples_train",
            "mc_samples_test",
            "max_epochs",
            "patience",
            "krylov_k",
            "cg_max_iter",
            "rnn_hidden",
            "rnn_layers",
            "threads",
        ):
            value = getattr(self, name)
            _require(isinstance(value, int) and value >= 1, s, f"{name} must be a positive integer")
        _require(isinstance(self.seed, int) and self.seed >= 0, s, "seed must be a nonnegative integer")
        _require(self.cg_tol > 0.0, s, "cg_tol must be positive")
        _require(self.grad_clip_norm > 0.0, s, "grad_clip_norm must be positive")
        _require(self.init_noise > 0.0, s, "init_noise must be positive")
        scales = self.init_lengthscale if isinstance(self.init_lengthscale, list) else [self.init_lengthscale]
        _require(all(x > 0.0 for x in scales), s, "init_lengthscale must be positive")
        _require(len(self.plr_lambdas) > 0 and all(x > 0.0 for x in self.plr_lambdas), s, "plr_lambdas must be positive")
        _require(self.model_variant in VARIANTS, s, f"model_variant must be one of {list(VARIANTS)}")


@dataclass
class SyntheticSpec:
    """Ground truth and sampling settings for a generated cohort.

    Unset per-variable lists take defaults: unit-variance task covariance with
    every variable correlated to variable 0, noise variance 0.1, observation
    intensities spaced geometrically from 2/h down to 0.02/h, no thinning, and
    a link on the late-window means of variables 0 and 1.

    Every encounter draws an onset between `onset_lead_hours[0]` and
    `onset_lead_hours[1]` hours before discharge, never earlier than half the
    stay. The label link reads the window ending at that onset; positives are
    cut there, negatives run on to discharge.
    """

    num_vars: int = 6
    num_baseline: int = 4
    num_meds: int = 2
    num_encounters: int = 1000
    task_factor: list[list[float]] | None = None
    noise_vars: list[float] | None = None
    lengthscale: float | list[float] = 6.0
    mean_los_hours: float = 120.0
    los_dispersion: float = 0.9
    min_los_hours: float = 2.0
    obs_intensity: list[float] | None = None
    missing_prob: list[float] | None = None
    med_intensity: float = 0.05
    label_mode: str = "logistic"
    link_coefficients: list[float] | None = None
    baseline_coefficients: list[float] | None = None
    summary_window_hours: float = 12.0
    onset_lead_hours: list[float] = field(default_factory=lambda: [1.0, 24.0])
    prevalence: float = 0.214
    fine_grid_hours: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Any) -> "SyntheticSpec":
        spec = _from_mapping(cls, data, "synthetic")
        spec.validate()
        return spec

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def validate(self) -> None:
        s = "synthetic"
        m = self.num_vars
        _require(m >= 1, s, "num_vars must be positive")
        _require(self.num_baseline >= 0 and self.num_meds >= 0, s, "num_baseline and num_meds must be nonnegative")
        _require(self.num_encounters >= 1, s, "num_encounters must be positive")
        _require(isinstance(self.seed, int) and self.seed >= 0, s, "seed must be a nonnegative integer")
        _require(0.0 < self.prevalence < 1.0, s, "prevalence must lie in (0, 1)")
        _require(self.mean_los_hours > 0.0 and self.los_dispersion >= 0.0, s, "length of stay must be positive")
        _require(0.0 <= self.min_los_hours < self.mean_los_hours, s, "min_los_hours must be below mean_los_hours")
        _require(self.med_intensity >= 0.0, s, "med_intensity must be nonnegative")
        _require(self.summary_window_hours > 0.0, s, "summary_window_hours must be positive")
        _require(
            isinstance(self.onset_lead_hours, list)
            and len(self.onset_lead_hours) == 2
            and 0.0 < self.onset_lead_hours[0] <= self.onset_lead_hours[1],
            s,
            "onset_lead_hours must be [min, max] with 0 < min <= max",
        )
        _require(self.fine_grid_hours > 0.0, s, "fine_grid_hours must be positive")
        _require(self.label_mode in LABEL_MODES, s, f"label_mode must be one of {list(LABEL_MODES)}")
        scales = self.lengthscale if isinstance(self.lengthscale, list) else [self.lengthscale]
        _require(all(x > 0.0 for x in scales), s, "lengthscale must be positive")
        if isinstance(self.lengthscale, list):
            _require(len(self.lengthscale) == m, s, f"lengthscale list needs {m} entries")
        for name, length in (
            ("noise_vars", m),
            ("obs_intensity", m),
            ("missing_prob", m),
            ("link_coefficients", m),
            ("baseline_coefficients", self.num_baseline),
        ):
            value = getattr(self, name)
            if value is not None:
                _require(len(value) == length, s, f"{name} needs {length} entries, got {len(value)}")
        if self.task_factor is not None:
            _require(
                len(self.task_factor) == m and all(len(row) == m for row in self.task_factor),
                s,
                f"task_factor must be {m}x{m}",
            )
        if self.noise_vars is not None:
            _require(all(x > 0.0 for x in self.noise_vars), s, "noise_vars must be positive")
        if self.obs_intensity is not None:
            _require(all(x >= 0.0 for x in self.obs_intensity), s, "obs_intensity must be nonnegative")
        if self.missing_prob is not None:
            _require(all(0.0 <= x <= 1.0 for x in self.missing_prob), s, "missing_prob must lie in [0, 1]")


@dataclass
class BenchConfig:
    """Lanczos versus dense square-root sampling timings."""

    sizes: list[int] = field(default_factory=lambda: [50, 200, 800, 3200])
    krylov_dims: list[int] = field(default_factory=lambda: [8, 16, 32])
    num_vars: int = 5
    dense_cap: int = 1000
    full_rank_max: int = 64
    repeats: int = 1
    lengthscale: float = 4.0

    @classmethod
    def from_dict(cls, data: Any) -> "BenchConfig":
        cfg = _from_mapping(cls, data, "bench")
        s = "bench"
        _require(all(n >= cfg.num_vars and n % cfg.num_vars == 0 for n in cfg.sizes), s,
                 f"sizes must be positive multiples of num_vars={cfg.num_vars}")
        _require(all(k >= 1 for k in cfg.krylov_dims), s, "krylov_dims must be positive")
        _require(cfg.repeats >= 1 and cfg.dense_cap >= 1, s, "repeats and dense_cap must be positive")
        _require(cfg.lengthscale > 0.0, s, "lengthscale must be positive")
        return cfg


@dataclass
class PathsConfig:
    """Locations; relative cohort and checkpoint paths resolve under `output_dir`."""

    cohort: str = "cohort.jsonl"
    checkpoint: str = "checkpoint.json"
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, data: Any) -> "PathsConfig":
        return _from_mapping(cls, data, "paths")

    def resolve(self, name: str) -> Path:
        path = Path(getattr(self, name))
        return path if path.is_absolute() else Path(self.output_dir) / path


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    horizons: list[float] = field(default_factory=lambda: [float(h) for h in range(13)])
    score_table: dict[str, Any] | None = None

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config root must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        horizons = data.get("horizons")
        cfg = cls(
            train=TrainConfig.from_dict(data.get("train")),
            synthetic=SyntheticSpec.from_dict(data.get("synthetic")),
            bench=BenchConfig.from_dict(data.get("bench")),
            paths=PathsConfig.from_dict(data.get("paths")),
            score_table=data.get("score_table"),
        )
        if horizons is not None:
            cfg.horizons = _check_horizons(horizons)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def validate(self) -> None:
        self.train.validate()
        self.synthetic.validate()
        self.horizons = _check_horizons(self.horizons)

    def write_resolved(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _check_horizons(horizons: Any) -> list[float]:
    if not isinstance(horizons, Sequence) or isinstance(horizons, str) or not horizons:
        raise ConfigError("horizons must be a non-empty list of hours")
    out = []
    for h in horizons:
        if isinstance(h, bool) or not isinstance(h, (int, float)) or h < 0:
            raise ConfigError(f"horizons must be nonnegative numbers, got {h!r}")
        out.append(float(h))
    return out


def parse_horizons(text: str) -> list[float]:
    """``"0..12"`` (inclusive integer range) or a comma-separated list."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(part) for part in text.split("..", 1))
            if hi < lo:
                raise ConfigError(f"empty horizon range {text!r}")
            return [float(h) for h in range(lo, hi + 1)]
        return _check_horizons([float(part) for part in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"invalid horizons {text!r}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    logger.debug("loaded config %s", path)
    return RunConfig.from_dict(data)
