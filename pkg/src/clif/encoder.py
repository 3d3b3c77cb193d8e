"""Frozen text featurizer: hashed bag-of-words embeddings followed by seeded
random residual tanh blocks.

Everything here is a pure function of (config, seed, text). No optimizer
ever touches these weights; encode() results are cached per text and reused
across epochs, which is safe precisely because the encoder is frozen.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .numcore import rng_for

_TOKEN_RE = re.compile(r"[a-z0-9]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

LABEL_SEPARATOR = " [LABEL] "


def fnv1a_64(token: str) -> int:
    """FNV-1a 64-bit hash of the token's UTF-8 bytes."""
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class EncoderConfig:
    hash_buckets: int = 4096
    dim: int = 64
    num_layers: int = 2
    encoder_seed: int = 7340032

    def __post_init__(self):
        if self.hash_buckets <= 0 or self.dim <= 0 or self.num_layers <= 0:
            raise ValueError("encoder dimensions must be positive")

    @property
    def weight_count(self) -> int:
        """Frozen parameter count: embedding table plus per-layer W and b."""
        d = self.dim
        return self.hash_buckets * d + self.num_layers * (d * d + d)


class FrozenEncoder:
    """Deterministic layer-activation producer.

    h_0 is the mean of token embeddings (zero vector for empty text);
    h_{l+1} = h_l + tanh(W_l h_l + b_l). encode() returns all of h_0..h_L.
    Embedding entries are N(0, 1/sqrt(d)); W_l and b_l entries are N(0, 1/d),
    which keeps activations O(1) through the residual blocks.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        self.config = config
        d = config.dim
        seed = config.encoder_seed
        emb_rng = rng_for(seed, "embedding")
        self.embedding = emb_rng.normal(0.0, 1.0 / np.sqrt(d), size=(config.hash_buckets, d))
        self.layer_weights = []
        self.layer_biases = []
        for layer in range(config.num_layers):
            w_rng = rng_for(seed, "layer", layer)
            self.layer_weights.append(w_rng.normal(0.0, 1.0 / d, size=(d, d)))
            self.layer_biases.append(w_rng.normal(0.0, 1.0 / d, size=d))
        for arr in (self.embedding, *self.layer_weights, *self.layer_biases):
            arr.flags.writeable = False
        self._encode_cache: dict[str, tuple[np.ndarray, ...]] = {}

    def tokenize(self, text: str) -> list[int]:
        """Lowercase, split on non-alphanumeric runs, FNV-1a hash to buckets."""
        return [
            fnv1a_64(tok) % self.config.hash_buckets
            for tok in _TOKEN_RE.findall(text.lower())
        ]

    def encode(self, text: str) -> tuple[np.ndarray, ...]:
        """All layer activations h_0..h_L for the text (read-only, cached)."""
        cached = self._encode_cache.get(text)
        if cached is not None:
            return cached
        indices = self.tokenize(text)
        if indices:
            h = self.embedding[indices].mean(axis=0)
        else:
            h = np.zeros(self.config.dim)
        activations = [h]
        for w, b in zip(self.layer_weights, self.layer_biases):
            h = h + np.tanh(w @ h + b)
            activations.append(h)
        for a in activations:
            a.flags.writeable = False
        result = tuple(activations)
        self._encode_cache[text] = result
        return result

    def represent_example(self, text: str, label: str) -> np.ndarray:
        """Example-level representation: final activation of text + label."""
        return self.encode(text + LABEL_SEPARATOR + label)[-1]

    def embed_label(self, label: str) -> np.ndarray:
        """Scoring target for a candidate label string."""
        return self.encode(label)[-1]

    def weight_checksum(self) -> str:
        """Digest of every frozen weight; unchanged by any training run."""
        h = hashlib.sha256()
        h.update(self.embedding.tobytes())
        for w, b in zip(self.layer_weights, self.layer_biases):
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()
