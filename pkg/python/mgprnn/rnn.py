"""Stacked LSTM classifier over per-hour input columns."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

import numpy as np

from mgprnn import autodiff as ad
from mgprnn.exceptions import ShapeError

__all__ = [
    "PROB_EPS",
    "LstmLayer",
    "RnnParams",
    "lstm_step",
    "rnn_forward",
    "bce_loss",
]

PROB_EPS = 1e-12
INIT_SCALE = 0.1
FORGET_BIAS = 1.0


@dataclass
class LstmLayer:
    """Gate blocks are laid out (i, f, g, o) along the last axis of every tensor."""

    w_input: Any
    w_recurrent: Any
    bias: Any

    @property
    def hidden(self) -> int:
        return ad.value_of(self.w_recurrent).shape[0]

    @property
    def input_dim(self) -> int:
        return ad.value_of(self.w_input).shape[0]


@dataclass
class RnnParams:
    layers: list[LstmLayer]
    head_w: Any
    head_b: Any

    PREFIX = "rnn."

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    @classmethod
    def init(
        cls,
        input_dim: int,
        hidden: int = 64,
        num_layers: int = 2,
        rng: np.random.Generator | int | None = None,
    ) -> "RnnParams":
        """uniform(-0.1, 0.1) weights, zero biases except forget gates at 1.0."""
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        layers = []
        width = input_dim
        for _ in range(num_layers):
            bias = np.zeros(4 * hidden)
            bias[hidden : 2 * hidden] = FORGET_BIAS
            layers.append(
                LstmLayer(
                    w_input=rng.uniform(-INIT_SCALE, INIT_SCALE, (width, 4 * hidden)),
                    w_recurrent=rng.uniform(-INIT_SCALE, INIT_SCALE, (hidden, 4 * hidden)),
                    bias=bias,
                )
            )
            width = hidden
        return cls(layers, rng.uniform(-INIT_SCALE, INIT_SCALE, hidden), np.zeros(()))

    @classmethod
    def zeros(cls, input_dim: int, hidden: int = 64, num_layers: int = 2) -> "RnnParams":
        layers = []
        width = input_dim
        for _ in range(num_layers):
            layers.append(
                LstmLayer(np.zeros((width, 4 * hidden)), np.zeros((hidden, 4 * hidden)), np.zeros(4 * hidden))
            )
            width = hidden
        return cls(layers, np.zeros(hidden), np.zeros(()))

    def to_params(self) -> dict[str, Any]:
        params = {}
        for n, layer in enumerate(self.layers):
            params[f"{self.PREFIX}layer{n}.w_input"] = layer.w_input
            params[f"{self.PREFIX}layer{n}.w_recurrent"] = layer.w_recurrent
            params[f"{self.PREFIX}layer{n}.bias"] = layer.bias
        params[f"{self.PREFIX}head.w"] = self.head_w
        params[f"{self.PREFIX}head.b"] = self.head_b
        return params

    @classmethod
    def from_params(cls, params: Mapping[str, Any], num_layers: int) -> "RnnParams":
        layers = [
            LstmLayer(
                params[f"{cls.PREFIX}layer{n}.w_input"],
                params[f"{cls.PREFIX}layer{n}.w_recurrent"],
                params[f"{cls.PREFIX}layer{n}.bias"],
            )
            for n in range(num_layers)
        ]
        return cls(layers, params[f"{cls.PREFIX}head.w"], params[f"{cls.PREFIX}head.b"])

    def with_params(self, params: Mapping[str, Any]) -> "RnnParams":
        return RnnParams.from_params(params, len(self.layers))

    def bind(self, tape: ad.Tape) -> "RnnParams":
        bound = {name: tape.leaf(value, name=name) for name, value in self.to_params().items()}
        return RnnParams.from_params(bound, len(self.layers))

    @staticmethod
    def is_weight(name: str) -> bool:
        """Parameters subject to L2 regularization (every RNN tensor)."""
        return name.startswith(RnnParams.PREFIX)


def _gate(gates: Any, block: int, hidden: int) -> Any:
    cols = slice(block * hidden, (block + 1) * hidden)
    if ad.value_of(gates).ndim == 1:
        return ad.getitem(gates, cols)
    return ad.getitem(gates, (slice(None), cols))


def lstm_step(layer: LstmLayer, x_t: Any, h_prev: Any, c_prev: Any) -> tuple[Any, Any]:
    """One LSTM cell update for a single input (D,) or a batch (S, D)."""
    x_shape = ad.value_of(x_t).shape
    if x_shape[-1] != layer.input_dim:
        raise ShapeError(f"lstm_step: input width {x_shape[-1]} != layer input {layer.input_dim}")
    hidden = layer.hidden
    gates = ad.add(
        ad.add(ad.matmul(x_t, layer.w_input), ad.matmul(h_prev, layer.w_recurrent)),
        layer.bias,
    )
    i = ad.sigmoid(_gate(gates, 0, hidden))
    f = ad.sigmoid(_gate(gates, 1, hidden))
    g = ad.tanh(_gate(gates, 2, hidden))
    o = ad.sigmoid(_gate(gates, 3, hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def rnn_forward(params: RnnParams, seq: Any, length: int | None = None) -> Any:
    """Probability from the top layer's final hidden state.

    `seq` is (D, X) or a batch (S, D, X). Only the first `length` columns are
    consumed (all of them by default), so padded buffers give the same result.
    """
    shape = ad.value_of(seq).shape
    if len(shape) not in (2, 3):
        raise ShapeError(f"rnn_forward expects (D, X) or (S, D, X), got {shape}")
    batched = len(shape) == 3
    batch = shape[0] if batched else 1
    width, capacity = shape[-2], shape[-1]
    if width != params.input_dim:
        raise ShapeError(f"rnn_forward: input width {width} != model input {params.input_dim}")
    steps = capacity if length is None else length
    if not 1 <= steps <= capacity:
        raise ShapeError(f"rnn_forward: length {steps} outside 1..{capacity}")
    seq = seq if batched else ad.reshape(seq, (1, width, capacity))

    state = [(np.zeros((batch, layer.hidden)), np.zeros((batch, layer.hidden))) for layer in params.layers]
    for t in range(steps):
        x = ad.getitem(seq, (slice(None), slice(None), t))
        for n, layer in enumerate(params.layers):
            h, c = lstm_step(layer, x, *state[n])
            state[n] = (h, c)
            x = h
    logits = ad.add(ad.matmul(state[-1][0], params.head_w), params.head_b)
    probs = ad.sigmoid(logits)
    return probs if batched else ad.getitem(probs, 0)


def bce_loss(p: Any, o: int | float) -> Any:
    """Binary cross-entropy with p clipped to [1e-12, 1 - 1e-12]."""
    p = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(float(o), ad.log(p))
    neg = ad.mul(1.0 - float(o), ad.log(ad.sub(1.0, p)))
    return ad.neg(ad.add(pos, neg))
