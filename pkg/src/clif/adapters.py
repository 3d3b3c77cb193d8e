"""Trainable prediction model: two-layer residual adapters woven between the
frozen encoder layers, a residual head adapter, and dot-product label scoring.

Adapter weights live in a single flat parameter vector of length P; the
structured view (per-layer down/up projections plus the head) is a set of
slice-and-reshape graph nodes over it. The same unflatten path serves both
directly trained adapters (flat vector is a leaf parameter) and generated
ones (flat vector is a hypernetwork output), so gradients flow either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoder import FrozenEncoder
from .numcore import Tensor


@dataclass(frozen=True)
class AdapterShape:
    dim: int
    num_layers: int
    adapter_hidden: int = 16
    head_hidden: int = 16

    def __post_init__(self):
        if min(self.dim, self.num_layers, self.adapter_hidden, self.head_hidden) <= 0:
            raise ValueError("adapter dimensions must be positive")

    def segments(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) table defining the flat layout."""
        d, r, hh = self.dim, self.adapter_hidden, self.head_hidden
        table: list[tuple[str, tuple[int, ...]]] = []
        for layer in range(self.num_layers):
            table += [
                (f"layer{layer}.down_w", (d, r)),
                (f"layer{layer}.down_b", (r,)),
                (f"layer{layer}.up_w", (r, d)),
                (f"layer{layer}.up_b", (d,)),
            ]
        table += [
            ("head.down_w", (d, hh)),
            ("head.down_b", (hh,)),
            ("head.up_w", (hh, d)),
            ("head.up_b", (d,)),
        ]
        return table

    @property
    def param_count(self) -> int:
        d, r, hh, n = self.dim, self.adapter_hidden, self.head_hidden, self.num_layers
        return n * (d * r + r + r * d + d) + (d * hh + hh + hh * d + d)

    def zero_flat(self) -> np.ndarray:
        return np.zeros(self.param_count)

    def init_flat(self, rng: np.random.Generator) -> np.ndarray:
        """Identity-preserving trainable init: random down projections, zero
        up projections and biases (the residual output starts exactly at the
        frozen activation but gradients reach every piece)."""
        flat = np.zeros(self.param_count)
        offset = 0
        for name, shape in self.segments():
            size = int(np.prod(shape))
            if name.endswith("down_w"):
                flat[offset : offset + size] = rng.normal(
                    0.0, 1.0 / math.sqrt(self.dim), size=size
                )
            offset += size
        return flat


class AdapterWeights:
    """Structured view over a flat weight vector (leaf or generated)."""

    def __init__(self, shape: AdapterShape, flat: Tensor):
        if flat.data.shape != (shape.param_count,):
            raise ValueError(
                f"flat adapter vector must have length {shape.param_count}, "
                f"got shape {flat.shape}"
            )
        self.shape = shape
        self.flat = flat
        pieces = {}
        offset = 0
        for name, piece_shape in shape.segments():
            size = int(np.prod(piece_shape))
            pieces[name] = nc.reshape(nc.slice_1d(flat, offset, offset + size), piece_shape)
            offset += size
        self._pieces = pieces

    def piece(self, name: str) -> Tensor:
        return self._pieces[name]

    def layer(self, index: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        p = self._pieces
        return (
            p[f"layer{index}.down_w"],
            p[f"layer{index}.down_b"],
            p[f"layer{index}.up_w"],
            p[f"layer{index}.up_b"],
        )

    def head(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        p = self._pieces
        return (p["head.down_w"], p["head.down_b"], p["head.up_w"], p["head.up_b"])

    @property
    def flat_data(self) -> np.ndarray:
        return self.flat.data

    @staticmethod
    def flatten(shape: AdapterShape, pieces: dict[str, np.ndarray]) -> np.ndarray:
        """Inverse of the structured view; flatten(unflatten(v)) == v."""
        parts = []
        for name, piece_shape in shape.segments():
            arr = np.asarray(pieces[name], dtype=np.float64)
            if arr.shape != piece_shape:
                raise ValueError(f"piece {name} has shape {arr.shape}, want {piece_shape}")
            parts.append(arr.ravel())
        return np.concatenate(parts)


@dataclass
class Prediction:
    scores: np.ndarray
    predicted_index: int
    correct: bool | None = None


def _residual_mlp(h: Tensor, down_w, down_b, up_w, up_b) -> Tensor:
    mid = nc.relu(nc.add(nc.matmul(h, down_w), down_b))
    return nc.add(nc.add(h, nc.matmul(mid, up_w)), up_b)


class AdapterModel:
    """Frozen encoder + adapters + label scoring.

    Batched throughout: rows are examples. Frozen layer weights enter the
    graph as constants, so gradients flow only into adapter weights (and
    through them into whatever produced the flat vector).
    """

    def __init__(self, encoder: FrozenEncoder, shape: AdapterShape):
        if shape.dim != encoder.config.dim or shape.num_layers != encoder.config.num_layers:
            raise ValueError("adapter shape does not match encoder config")
        self.encoder = encoder
        self.shape = shape
        # row-convention copies of the frozen layers: h_next = h + tanh(h @ W_T + b)
        self._frozen = [
            (nc.constant(np.ascontiguousarray(w.T)), nc.constant(b))
            for w, b in zip(encoder.layer_weights, encoder.layer_biases)
        ]
        self._scale = 1.0 / math.sqrt(shape.dim)

    def h0_batch(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.encoder.encode(t)[0] for t in texts])

    def frozen_final_batch(self, texts: list[str]) -> np.ndarray:
        """Frozen encoder output rows computed through the same batched
        arithmetic as adapt_batch; with all-zero adapter weights the adapted
        output equals this bitwise."""
        h = self.h0_batch(texts)
        for w_t, b in self._frozen:
            h = h + np.tanh(h @ w_t.data + b.data)
        return h

    def label_matrix(self, labels: list[str]) -> np.ndarray:
        if not labels:
            raise ValueError("label set must be non-empty")
        return np.stack([self.encoder.embed_label(y) for y in labels])

    def adapt_batch(self, h0: Tensor, weights: AdapterWeights) -> Tensor:
        """Run the adapted network from h_0 rows to the final adapted rows."""
        h = h0
        for layer, (w_t, b) in enumerate(self._frozen):
            h = nc.add(h, nc.tanh(nc.add(nc.matmul(h, w_t), b)))
            h = _residual_mlp(h, *weights.layer(layer))
        return _residual_mlp(h, *weights.head())

    def score_batch(self, texts: list[str], label_mat: np.ndarray, weights: AdapterWeights) -> Tensor:
        adapted = self.adapt_batch(nc.constant(self.h0_batch(texts)), weights)
        return nc.scale(nc.matmul(adapted, nc.constant(label_mat.T)), self._scale)

    def score_labels(self, text: str, labels: list[str], weights: AdapterWeights) -> Prediction:
        scores = self.score_batch([text], self.label_matrix(labels), weights).data[0]
        return Prediction(scores=scores, predicted_index=int(np.argmax(scores)))

    def batch_loss(self, texts: list[str], targets, label_mat: np.ndarray, weights: AdapterWeights) -> Tensor:
        """Mean softmax cross-entropy of the batch under one weight set."""
        scores = self.score_batch(texts, label_mat, weights)
        return nc.softmax_cross_entropy(scores, np.asarray(targets, dtype=np.int64))

    def example_loss(self, text: str, target_index: int, labels: list[str], weights: AdapterWeights) -> Tensor:
        return self.batch_loss([text], [target_index], self.label_matrix(labels), weights)

    def predict_batch(self, texts: list[str], label_mat: np.ndarray, weights: AdapterWeights) -> np.ndarray:
        """Predicted label indices; argmax with lowest-index tie-break."""
        return np.argmax(self.score_batch(texts, label_mat, weights).data, axis=1)


HYPERNET_HIDDEN_DEFAULT = 32


def count_parameters(
    shape: AdapterShape,
    mode: str,
    encoder_config=None,
    hypernet_hidden: int = HYPERNET_HIDDEN_DEFAULT,
) -> tuple[int, int]:
    """(trainable, total) parameter counts for a model configuration.

    direct mode trains the flat adapter vector itself; hypernet mode trains
    the generator (input layer dim->hidden plus output layer hidden->P, both
    with biases). total adds the frozen encoder weights when a config is
    given.
    """
    p = shape.param_count
    if mode == "direct":
        trainable = p
    elif mode == "hypernet":
        trainable = (shape.dim + 1) * hypernet_hidden + (hypernet_hidden + 1) * p
    else:
        raise ValueError(f"unknown parameter mode: {mode!r}")
    frozen = encoder_config.weight_count if encoder_config is not None else 0
    return trainable, trainable + frozen
