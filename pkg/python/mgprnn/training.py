"""End-to-end training of MGP-RNN classifiers and their baselines.

The objective for one encounter is the Monte Carlo estimate of the expected
cross-entropy under the GP posterior,
``(1/S) sum_s bce(rnn(D_s), o)`` with ``D_s`` built from the reparameterized
latent sample ``z_s = mu + Sigma^{1/2} xi_s``. Each encounter's loss is
recorded on its own tape, so gradients reach the GP hyperparameters through
the Lanczos and CG iterations as well as the RNN weights. Minibatch gradients
are averaged in encounter-id order and applied with ADAM.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from mgprnn import autodiff as ad
from mgprnn.config import TrainConfig
from mgprnn.data import EncounterRecord, StandardizationStats, truncate_at
from mgprnn.exceptions import ConfigError, NumericalError, TrainingError
from mgprnn.features import assemble_inputs, plr_features, raw_inputs, static_inputs
from mgprnn.metrics import ScoredCohort, auroc
from mgprnn.mgp import (
    BoundHyperparams,
    MgpHyperparams,
    MgpMode,
    check_centered,
    posterior_moments,
    sample_latents,
)
from mgprnn.rnn import PROB_EPS, RnnParams, bce_loss, rnn_forward

__all__ = [
    "ModelVariant",
    "PlrParams",
    "Model",
    "BoundModel",
    "AdamState",
    "EpochRecord",
    "FitResult",
    "encounter_rng",
    "mc_expected_loss",
    "encounter_loss",
    "loss_and_gradients",
    "adam_step",
    "clip_gradients",
    "fit",
    "risk_score",
    "risk_score_trajectory",
    "make_scorer",
]

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ModelVariant(str, Enum):
    MGP_RNN = "mgp-rnn"
    MGP_RNN_MEAN = "mgp-rnn-mean"
    GP_RNN_SHARED = "gp-rnn-shared"
    GP_RNN_INDEP = "gp-rnn-indep"
    RAW_RNN = "raw-rnn"
    PLR = "plr"

    @property
    def mgp_mode(self) -> MgpMode | None:
        return _MGP_MODES.get(self)

    @property
    def uses_mgp(self) -> bool:
        return self.mgp_mode is not None

    @property
    def uses_rnn(self) -> bool:
        return self is not ModelVariant.PLR


_MGP_MODES = {
    ModelVariant.MGP_RNN: MgpMode.MULTITASK,
    ModelVariant.MGP_RNN_MEAN: MgpMode.MULTITASK,
    ModelVariant.GP_RNN_SHARED: MgpMode.INDEPENDENT_SHARED,
    ModelVariant.GP_RNN_INDEP: MgpMode.INDEPENDENT_PER_VARIABLE,
}


@dataclass
class PlrParams:
    """L2-penalized logistic regression on the imputed feature snapshot."""

    weights: np.ndarray
    bias: float
    l2_lambda: float

    PREFIX = "plr."

    def to_params(self) -> dict[str, np.ndarray]:
        return {self.PREFIX + "weights": self.weights, self.PREFIX + "bias": np.asarray(self.bias)}

    def with_params(self, params: Mapping[str, np.ndarray]) -> "PlrParams":
        return PlrParams(
            np.asarray(params[self.PREFIX + "weights"], dtype=np.float64),
            float(params[self.PREFIX + "bias"]),
            self.l2_lambda,
        )

    def predict(self, features: np.ndarray) -> np.ndarray:
        return expit(features @ self.weights + self.bias)


@dataclass(frozen=True)
class BoundModel:
    variant: "ModelVariant"
    num_vars: int
    num_meds: int
    hyperparams: BoundHyperparams | None
    rnn: RnnParams | None


@dataclass
class Model:
    """Parameters of one classifier variant and the data dimensions it expects."""

    variant: ModelVariant
    num_vars: int
    num_baseline: int
    num_meds: int
    hyperparams: MgpHyperparams | None = None
    rnn: RnnParams | None = None
    plr: PlrParams | None = None
    stats: StandardizationStats | None = None

    def __post_init__(self) -> None:
        self.variant = ModelVariant(self.variant)

    @property
    def input_dim(self) -> int:
        return self.num_vars + self.num_baseline + self.num_meds

    @classmethod
    def initialize(
        cls,
        variant: ModelVariant | str,
        num_vars: int,
        num_baseline: int,
        num_meds: int,
        cfg: TrainConfig,
        stats: StandardizationStats | None = None,
    ) -> "Model":
        variant = ModelVariant(variant)
        model = cls(variant, num_vars, num_baseline, num_meds, stats=stats)
        if variant.uses_mgp:
            model.hyperparams = MgpHyperparams.initial(
                num_vars, variant.mgp_mode, cfg.init_lengthscale, cfg.init_noise
            )
        if variant.uses_rnn:
            model.rnn = RnnParams.init(
                model.input_dim, cfg.rnn_hidden, cfg.rnn_layers, rng=encounter_rng(cfg.seed, "init")
            )
        else:
            model.plr = PlrParams(np.zeros(model.input_dim), 0.0, cfg.plr_lambdas[0])
        return model

    def params(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for part in (self.hyperparams, self.rnn, self.plr):
            if part is not None:
                params.update(part.to_params())
        return params

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        return replace(
            self,
            hyperparams=self.hyperparams.with_params(params) if self.hyperparams else None,
            rnn=self.rnn.with_params(params) if self.rnn else None,
            plr=self.plr.with_params(params) if self.plr else None,
        )

    def bind(self, tape: ad.Tape | None = None) -> BoundModel:
        hp = self.hyperparams.bind(tape) if self.hyperparams else None
        rnn = self.rnn
        if rnn is not None and tape is not None:
            rnn = rnn.bind(tape)
        return BoundModel(self.variant, self.num_vars, self.num_meds, hp, rnn)


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def encounter_rng(*keys: int | str) -> np.random.Generator:
    """Generator seeded by a tuple of integers and strings, independent of call order."""
    entropy = [k if isinstance(k, int) else _stable_hash(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _mgp_probabilities(
    enc: EncounterRecord,
    hp: MgpHyperparams | BoundHyperparams,
    rnn: RnnParams,
    num_samples: int,
    krylov_k: int | None,
    seed: Any,
    *,
    xi: np.ndarray | None = None,
    use_mean: bool = False,
    cg_tol: float = 1e-8,
    cg_max_iter: int = 200,
) -> Any:
    grid = enc.grid_times()
    post = posterior_moments(enc, grid, hp, cg_tol=cg_tol, cg_max_iter=cg_max_iter)
    if use_mean:
        latents = ad.reshape(post.mean, (1, post.num_vars, post.num_grid))
    else:
        latents = sample_latents(post, num_samples, krylov_k, seed, xi=xi)
    num_meds = rnn.input_dim - post.num_vars - enc.num_baseline
    seq = assemble_inputs(latents, static_inputs(enc, len(grid), num_meds))
    return rnn_forward(rnn, seq)


def mc_expected_loss(
    enc: EncounterRecord,
    hp: MgpHyperparams | BoundHyperparams,
    rnn: RnnParams,
    num_samples: int,
    krylov_k: int | None = None,
    seed: Any = None,
    *,
    xi: np.ndarray | None = None,
    use_mean: bool = False,
    cg_tol: float = 1e-8,
    cg_max_iter: int = 200,
) -> Any:
    """Monte Carlo estimate of the expected cross-entropy for one encounter.

    With bound (tape) hyperparameters and RNN weights the result is a scalar
    `Var` whose backward pass reaches both. `use_mean` replaces the samples by
    the posterior mean.
    """
    probs = _mgp_probabilities(
        enc,
        hp,
        rnn,
        num_samples,
        krylov_k,
        seed,
        xi=xi,
        use_mean=use_mean,
        cg_tol=cg_tol,
        cg_max_iter=cg_max_iter,
    )
    return _mean_bce(probs, enc.label)


def _mean_bce(probs: Any, label: int) -> Any:
    count = ad.value_of(probs).shape[0]
    return ad.div(ad.reduce_sum(bce_loss(probs, label)), float(count))


def _probabilities(bound: BoundModel, enc: EncounterRecord, cfg: TrainConfig, num_samples: int, seed: Any) -> Any:
    if bound.variant is ModelVariant.RAW_RNN:
        seq = raw_inputs(enc, bound.num_vars, bound.num_meds)
        return rnn_forward(bound.rnn, ad.reshape(seq, (1,) + seq.shape))
    return _mgp_probabilities(
        enc,
        bound.hyperparams,
        bound.rnn,
        num_samples,
        cfg.krylov_k,
        seed,
        use_mean=bound.variant is ModelVariant.MGP_RNN_MEAN,
        cg_tol=cfg.cg_tol,
        cg_max_iter=cfg.cg_max_iter,
    )


def encounter_loss(bound: BoundModel, enc: EncounterRecord, cfg: TrainConfig, seed: Any) -> Any:
    """Training loss of one encounter for any RNN-based variant."""
    if not bound.variant.uses_rnn:
        raise ConfigError(f"{bound.variant.value} is not trained by gradient descent")
    if bound.variant is ModelVariant.RAW_RNN:
        return _mean_bce(_probabilities(bound, enc, cfg, 1, seed), enc.label)
    return mc_expected_loss(
        enc,
        bound.hyperparams,
        bound.rnn,
        cfg.mc_samples_train,
        cfg.krylov_k,
        seed,
        use_mean=bound.variant is ModelVariant.MGP_RNN_MEAN,
        cg_tol=cfg.cg_tol,
        cg_max_iter=cfg.cg_max_iter,
    )


def loss_and_gradients(
    model: Model, enc: EncounterRecord, cfg: TrainConfig, seed: Any
) -> tuple[float, dict[str, np.ndarray]]:
    tape = ad.Tape()
    loss = encounter_loss(model.bind(tape), enc, cfg, seed)
    try:
        grads = tape.backward(loss).named()
    except FloatingPointError as exc:
        raise NumericalError(f"backward pass failed: {exc}", encounter_id=enc.id) from exc
    return float(ad.value_of(loss)), grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected ADAM update. Parameters without a gradient are left unchanged.

    Raises:
        TrainingError: if a gradient has non-finite entries; names the parameter.
    """
    for name, g in grads.items():
        if name not in params:
            raise TrainingError(f"gradient for unknown parameter {name}", parameter=name)
        if np.shape(g) != np.shape(params[name]):
            raise TrainingError(
                f"gradient shape {np.shape(g)} does not match parameter {name} {np.shape(params[name])}",
                parameter=name,
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", parameter=name)

    step = state.step + 1
    new_params = dict(params)
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, g in grads.items():
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, step)


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale to global norm `max_norm` when above it; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_auroc: float | None
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class FitResult:
    model: Model
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def _evaluate(
    model: Model, records: Sequence[EncounterRecord], cfg: TrainConfig, pool: ThreadPoolExecutor | None
) -> tuple[float, float | None]:
    """Mean Monte Carlo loss and AU-ROC of mean probabilities, with fixed draws."""
    bound = model.bind()

    def work(enc: EncounterRecord) -> tuple[float, float]:
        probs = np.atleast_1d(
            _probabilities(bound, enc, cfg, cfg.mc_samples_train, encounter_rng(cfg.seed, "valid", enc.id))
        )
        return float(np.mean(bce_loss(probs, enc.label))), float(np.mean(probs))

    results = list(pool.map(work, records)) if pool else [work(enc) for enc in records]
    losses = [loss for loss, _ in results]
    sc = ScoredCohort(
        tuple(enc.id for enc in records),
        np.array([score for _, score in results]),
        np.array([enc.label for enc in records]),
    )
    score = auroc(sc) if sc.num_positive and sc.num_negative else None
    return float(np.mean(losses)), score


def _minibatch_gradients(model, batch, cfg, epoch, index, pool):
    def work(enc: EncounterRecord):
        try:
            loss, grads = loss_and_gradients(model, enc, cfg, encounter_rng(cfg.seed, epoch, index, enc.id))
        except NumericalError as exc:
            raise exc.with_encounter(enc.id)
        return enc.id, loss, grads

    results = list(pool.map(work, batch)) if pool else [work(enc) for enc in batch]
    results.sort(key=lambda item: item[0])
    total = {name: np.zeros_like(value) for name, value in model.params().items()}
    loss_sum = 0.0
    for _, loss, grads in results:
        loss_sum += loss
        for name, g in grads.items():
            total[name] += g
    n = float(len(batch))
    return loss_sum / n, {name: g / n for name, g in total.items()}


def _infer_dims(records: Sequence[EncounterRecord], stats, num_vars, num_meds) -> tuple[int, int, int]:
    if num_vars is None:
        num_vars = stats.num_vars if stats else max(
            (int(enc.obs_vars.max()) + 1 for enc in records if enc.obs), default=0
        )
    if num_meds is None:
        num_meds = max((len(bits) for enc in records for _, bits in enc.meds), default=0)
    return num_vars, records[0].num_baseline, num_meds


def fit(
    train: Sequence[EncounterRecord],
    valid: Sequence[EncounterRecord],
    cfg: TrainConfig,
    *,
    model: Model | None = None,
    stats: StandardizationStats | None = None,
    num_vars: int | None = None,
    num_meds: int | None = None,
) -> FitResult:
    """Train `cfg.model_variant` with early stopping on validation loss.

    Returns the parameters from the epoch with the lowest validation loss and
    one `EpochRecord` per epoch run.

    Raises:
        ConfigError: if either cohort is empty or they share encounter ids.
    """
    cfg.validate()
    if not train or not valid:
        raise ConfigError("fit needs non-empty training and validation cohorts")
    shared = {enc.id for enc in train} & {enc.id for enc in valid}
    if shared:
        raise ConfigError(f"training and validation cohorts share encounter ids {sorted(shared)[:5]}")
    train = sorted(train, key=lambda enc: enc.id)
    valid = sorted(valid, key=lambda enc: enc.id)

    if model is None:
        dims = _infer_dims(list(train) + list(valid), stats, num_vars, num_meds)
        model = Model.initialize(cfg.model_variant, *dims, cfg, stats=stats)
    if model.variant is ModelVariant.PLR:
        return _fit_plr(model, train, valid, cfg)
    if model.variant.uses_mgp:
        check_centered(train, model.num_vars)

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        return _fit_rnn(model, train, valid, cfg, pool)
    finally:
        if pool is not None:
            pool.shutdown()


def _fit_rnn(model, train, valid, cfg, pool) -> FitResult:
    params = model.params()
    state = AdamState.zeros(params)
    best_params = params
    best_loss = np.inf
    best_epoch = 0
    stale = 0
    log: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = encounter_rng(cfg.seed, "shuffle", epoch).permutation(len(train))
        batch_losses = []
        for index, start in enumerate(range(0, len(train), cfg.minibatch_size)):
            batch = [train[i] for i in order[start : start + cfg.minibatch_size]]
            loss, grads = _minibatch_gradients(model, batch, cfg, epoch, index, pool)
            penalty = 0.0
            for name, value in params.items():
                if RnnParams.is_weight(name):
                    penalty += float(np.sum(value * value))
                    grads[name] = grads[name] + 2.0 * cfg.l2_lambda * value
            batch_losses.append(loss + cfg.l2_lambda * penalty)
            grads, norm = clip_gradients(grads, cfg.grad_clip_norm)
            if norm > cfg.grad_clip_norm:
                logger.warning(
                    "epoch %d batch %d: gradient norm %.3f clipped to %.3f", epoch, index, norm, cfg.grad_clip_norm
                )
            params, state = adam_step(params, grads, state, cfg.learning_rate)
            model = model.with_params(params)

        valid_loss, valid_auroc = _evaluate(model, valid, cfg, pool)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            valid_loss=valid_loss,
            valid_auroc=valid_auroc,
            seconds=time.perf_counter() - started,
        )
        log.append(record)
        logger.info(
            "epoch %d: train_loss=%.5f valid_loss=%.5f valid_auroc=%s (%.1fs)",
            epoch,
            record.train_loss,
            record.valid_loss,
            "n/a" if valid_auroc is None else f"{valid_auroc:.4f}",
            record.seconds,
        )
        if valid_loss < best_loss:
            best_loss, best_params, best_epoch, stale = valid_loss, params, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early stopping after epoch %d; best epoch %d", epoch, best_epoch)
                break
    return FitResult(model.with_params(best_params), log, best_epoch)


def _logistic_fit(features: np.ndarray, labels: np.ndarray, l2_lambda: float) -> tuple[np.ndarray, float]:
    n, d = features.shape

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = theta[:d], theta[d]
        z = features @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - labels * z) + l2_lambda * float(w @ w)
        residual = (expit(z) - labels) / n
        grad = np.append(features.T @ residual + 2.0 * l2_lambda * w, residual.sum())
        return float(loss), grad

    result = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B")
    if not result.success:
        logger.warning("logistic regression (lambda=%g) stopped early: %s", l2_lambda, result.message)
    return result.x[:d], float(result.x[d])


def _fit_plr(model: Model, train, valid, cfg: TrainConfig) -> FitResult:
    def design(records):
        return np.stack([plr_features(enc, model.num_vars, model.num_meds) for enc in records])

    x_train, y_train = design(train), np.array([enc.label for enc in train], dtype=np.float64)
    x_valid, y_valid = design(valid), np.array([enc.label for enc in valid], dtype=np.float64)
    log: list[EpochRecord] = []
    best: tuple[float, PlrParams, int] | None = None
    for epoch, lam in enumerate(cfg.plr_lambdas, start=1):
        started = time.perf_counter()
        weights, bias = _logistic_fit(x_train, y_train, lam)
        params = PlrParams(weights, bias, lam)
        train_p = np.clip(params.predict(x_train), PROB_EPS, 1.0 - PROB_EPS)
        valid_p = np.clip(params.predict(x_valid), PROB_EPS, 1.0 - PROB_EPS)
        train_loss = float(np.mean(-(y_train * np.log(train_p) + (1 - y_train) * np.log(1 - train_p))))
        valid_loss = float(np.mean(-(y_valid * np.log(valid_p) + (1 - y_valid) * np.log(1 - valid_p))))
        sc = ScoredCohort(tuple(enc.id for enc in valid), valid_p, y_valid)
        valid_auroc = auroc(sc) if sc.num_positive and sc.num_negative else None
        log.append(EpochRecord(epoch, train_loss, valid_loss, valid_auroc, time.perf_counter() - started))
        logger.info("plr lambda=%g: valid_loss=%.5f", lam, valid_loss)
        if best is None or valid_loss < best[0]:
            best = (valid_loss, params, epoch)
    return FitResult(replace(model, plr=best[1]), log, best[2])


def risk_score(
    enc: EncounterRecord,
    model: Model,
    num_samples: int = 25,
    krylov_k: int | None = None,
    seed: Any = 0,
    *,
    cg_tol: float = 1e-8,
    cg_max_iter: int = 200,
) -> float:
    """Expected classifier output for one (possibly truncated) encounter.

    mgp-rnn and the gp-rnn baselines average over `num_samples` posterior
    draws; mgp-rnn-mean runs once on the posterior mean; raw-rnn and plr use
    the hourly imputed features.
    """
    if model.variant is ModelVariant.PLR:
        return float(model.plr.predict(plr_features(enc, model.num_vars, model.num_meds)))
    if model.variant is ModelVariant.RAW_RNN:
        return float(rnn_forward(model.rnn, raw_inputs(enc, model.num_vars, model.num_meds)))
    probs = _mgp_probabilities(
        enc,
        model.hyperparams,
        model.rnn,
        num_samples,
        krylov_k,
        seed,
        use_mean=model.variant is ModelVariant.MGP_RNN_MEAN,
        cg_tol=cg_tol,
        cg_max_iter=cg_max_iter,
    )
    return float(np.mean(probs))


def make_scorer(model: Model, cfg: TrainConfig):
    """Scorer for sweeps: draws depend only on the seed, encounter id and horizon."""

    def score(enc: EncounterRecord) -> float:
        rng = encounter_rng(cfg.seed, "score", f"{enc.id}@{enc.horizon!r}")
        return risk_score(
            enc,
            model,
            cfg.mc_samples_test,
            cfg.krylov_k,
            rng,
            cg_tol=cfg.cg_tol,
            cg_max_iter=cfg.cg_max_iter,
        )

    return score


def risk_score_trajectory(enc: EncounterRecord, model: Model, cfg: TrainConfig) -> list[tuple[float, float]]:
    """Risk score refreshed at every hour of the stay, using only data up to that hour."""
    scorer = make_scorer(model, cfg)
    trajectory = []
    for hour in range(int(np.floor(enc.event_time)) + 1):
        trajectory.append((float(hour), scorer(truncate_at(enc, float(hour)))))
    return trajectory
