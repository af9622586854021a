"""JSON checkpoints: named tensors plus the metadata to rebuild a `Model`."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from mgprnn.data import StandardizationStats
from mgprnn.exceptions import DataError
from mgprnn.mgp import MgpHyperparams
from mgprnn.rnn import RnnParams
from mgprnn.training import Model, ModelVariant, PlrParams

__all__ = ["CHECKPOINT_VERSION", "save_checkpoint", "load_checkpoint", "checkpoint_to_dict", "checkpoint_from_dict"]

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def checkpoint_to_dict(model: Model) -> dict[str, Any]:
    tensors = [
        {"name": name, "shape": list(np.shape(value)), "values": np.asarray(value, dtype=np.float64).ravel().tolist()}
        for name, value in sorted(model.params().items())
    ]
    return {
        "version": CHECKPOINT_VERSION,
        "variant": model.variant.value,
        "mgp_mode": model.hyperparams.mode.value if model.hyperparams else None,
        "dims": {
            "num_vars": model.num_vars,
            "num_baseline": model.num_baseline,
            "num_meds": model.num_meds,
            "rnn_hidden": model.rnn.hidden if model.rnn else None,
            "rnn_layers": len(model.rnn.layers) if model.rnn else None,
        },
        "plr_lambda": model.plr.l2_lambda if model.plr else None,
        "stats": model.stats.to_dict() if model.stats else None,
        "tensors": tensors,
    }


def checkpoint_from_dict(data: dict[str, Any]) -> Model:
    """Rebuild a model, checking the version and every tensor's shape."""
    if not isinstance(data, dict) or "version" not in data:
        raise DataError("checkpoint has no version field")
    if data["version"] != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {data['version']!r}")
    try:
        variant = ModelVariant(data["variant"])
        dims = data["dims"]
        tensors = {
            t["name"]: np.asarray(t["values"], dtype=np.float64).reshape(t["shape"])
            for t in data["tensors"]
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc

    model = Model(
        variant,
        int(dims["num_vars"]),
        int(dims["num_baseline"]),
        int(dims["num_meds"]),
        stats=StandardizationStats.from_dict(data["stats"]) if data.get("stats") else None,
    )
    try:
        if variant.uses_mgp:
            num_vars = model.num_vars
            prefix = MgpHyperparams.PREFIX
            model.hyperparams = MgpHyperparams(
                task_factor=tensors.get(prefix + "task_factor", np.eye(num_vars)),
                log_noise=tensors[prefix + "log_noise"],
                log_lengthscale=tensors[prefix + "log_lengthscale"],
                mode=data["mgp_mode"],
            )
        if variant.uses_rnn:
            model.rnn = RnnParams.from_params(tensors, int(dims["rnn_layers"]))
            expected = RnnParams.zeros(model.input_dim, int(dims["rnn_hidden"]), int(dims["rnn_layers"]))
            for name, value in expected.to_params().items():
                if tensors[name].shape != value.shape:
                    raise DataError(f"tensor {name} has shape {tensors[name].shape}, expected {value.shape}")
        else:
            model.plr = PlrParams(
                tensors[PlrParams.PREFIX + "weights"],
                float(tensors[PlrParams.PREFIX + "bias"]),
                float(data["plr_lambda"]),
            )
    except KeyError as exc:
        raise DataError(f"checkpoint is missing tensor {exc}") from exc
    except ValueError as exc:
        raise DataError(f"invalid checkpoint tensors: {exc}") from exc
    return model


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_to_dict(model)) + "\n", encoding="utf-8")
    logger.info("wrote checkpoint %s", path)
    return path


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc
    return checkpoint_from_dict(data)
