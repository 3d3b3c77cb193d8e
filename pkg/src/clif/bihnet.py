"""Bi-level task representations, the adapter-generating hypernetwork, the
representation memory, and the drift regularizer.

A task is summarized twice: z_h averages the example representations of the
whole dataset, z_f averages a small sample of them, standing in for the task
as it will appear at few-shot time. The hypernetwork maps either vector to a
full flat adapter weight vector. The memory keeps (name, z_h, weight
snapshot) per seen task and never stores raw examples; the drift penalty
anchors the currently generated weights for a sampled prior task to the
snapshot taken at the last task boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import serialize
from .adapters import AdapterShape, AdapterWeights
from .encoder import FrozenEncoder
from .numcore import ParamStore, Tensor, rng_for

HYPERNET_HIDDEN = 32


@dataclass(frozen=True)
class RegConfig:
    reg_strength: float = 0.01
    prior_sample_count: int = 1

    def __post_init__(self):
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be non-negative")
        if self.prior_sample_count < 1:
            raise ValueError("prior_sample_count must be positive")


@dataclass
class TaskRepresentation:
    z_h: np.ndarray
    z_f: np.ndarray
    sample_size: int


def compute_task_representation(
    encoder: FrozenEncoder,
    examples: list[tuple[str, str]],
    k: int,
    sample_seed: int,
) -> TaskRepresentation:
    """Mean example representation over all examples (z_h) and over a
    without-replacement sample of min(k, n) of them (z_f).

    Sampled indices are sorted before averaging so that k >= n reproduces
    z_h bitwise.
    """
    if not examples:
        raise ValueError("cannot represent an empty dataset")
    if k < 1:
        raise ValueError("sample size must be >= 1")
    reps = np.stack([encoder.represent_example(x, y) for x, y in examples])
    n = len(examples)
    k = min(k, n)
    if k == n:
        idx = np.arange(n)
    else:
        idx = np.sort(rng_for(sample_seed, "task-rep-sample").choice(n, size=k, replace=False))
    return TaskRepresentation(
        z_h=reps.mean(axis=0), z_f=reps[idx].mean(axis=0), sample_size=k
    )


class HyperNetwork:
    """Two-layer MLP from a task representation to the flat adapter vector.

    tanh hidden of width 32; the output layer starts at scale 1e-2 so
    freshly generated adapters are near zero and the adapted model starts
    next to the frozen encoder output.
    """

    def __init__(
        self,
        store: ParamStore,
        shape: AdapterShape,
        seed: int,
        hidden: int = HYPERNET_HIDDEN,
        prefix: str = "hnet",
    ):
        self.shape = shape
        self.hidden = hidden
        self.prefix = prefix
        d, p = shape.dim, shape.param_count
        self.w1 = store.add(f"{prefix}.w1", rng_for(seed, prefix, "w1").normal(0.0, 1.0 / np.sqrt(d), size=(hidden, d)))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = store.add(f"{prefix}.w2", rng_for(seed, prefix, "w2").normal(0.0, 1e-2, size=(p, hidden)))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(p))

    @property
    def param_count(self) -> int:
        d, h, p = self.shape.dim, self.hidden, self.shape.param_count
        return (d + 1) * h + (h + 1) * p

    def generate_flat(self, z) -> Tensor:
        """Flat adapter vector of length P as a graph node."""
        zt = z if isinstance(z, Tensor) else nc.constant(np.asarray(z, dtype=np.float64))
        if zt.data.shape != (self.shape.dim,):
            raise ValueError(f"task representation must have dim {self.shape.dim}, got {zt.shape}")
        hidden = nc.tanh(nc.add(nc.matmul(self.w1, zt), self.b1))
        return nc.add(nc.matmul(self.w2, hidden), self.b2)

    def generate(self, z) -> AdapterWeights:
        return AdapterWeights(self.shape, self.generate_flat(z))


class RepresentationMemory:
    """Ordered per-task store of (name, z_h, generated-weight snapshot).

    Contains no raw training examples. Snapshots are recomputed for every
    stored task at each task boundary; an entry's initial snapshot is the
    generation at store time, which the next boundary overwrites.
    """

    def __init__(self, dim: int, weight_len: int):
        self.dim = dim
        self.weight_len = weight_len
        self._names: list[str] = []
        self._z: dict[str, np.ndarray] = {}
        self._snapshots: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._names)

    def names(self) -> list[str]:
        return list(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._z

    def z_for(self, name: str) -> np.ndarray:
        return self._z[name]

    def snapshot_for(self, name: str) -> np.ndarray:
        return self._snapshots[name]

    def store(self, name: str, z_h: np.ndarray, hnet: HyperNetwork) -> None:
        if name in self._z:
            raise ValueError(f"task {name!r} already stored")
        if z_h.shape != (self.dim,):
            raise ValueError(f"z_h must have dim {self.dim}")
        self._names.append(name)
        self._z[name] = np.array(z_h)
        self._snapshots[name] = hnet.generate_flat(z_h).data.copy()

    def snapshot_all(self, hnet: HyperNetwork) -> None:
        """Boundary hook: regenerate every stored task's weight snapshot
        with the current hypernetwork, overwriting previous snapshots."""
        for name in self._names:
            self._snapshots[name] = hnet.generate_flat(self._z[name]).data.copy()

    def to_bytes(self) -> bytes:
        return serialize.write_memory_bytes(
            self.dim,
            self.weight_len,
            ((n, self._z[n], self._snapshots[n]) for n in self._names),
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RepresentationMemory":
        dim, weight_len, entries = serialize.read_memory_bytes(blob)
        mem = cls(dim, weight_len)
        for name, z, snapshot in entries:
            mem._names.append(name)
            mem._z[name] = z
            mem._snapshots[name] = snapshot
        return mem

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RepresentationMemory":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def regularization_term(
    hnet: HyperNetwork,
    memory: RepresentationMemory,
    step_seed: int,
    sample_count: int = 1,
) -> Tensor | None:
    """Mean squared L2 distance between currently generated weights and the
    boundary snapshots of sampled prior tasks; None when the memory is empty
    (the penalty is zero and the graph is skipped).

    Only high-resource representations participate: z_f never reaches here.
    """
    if len(memory) == 0:
        return None
    names = memory.names()
    take = min(sample_count, len(names))
    if take == len(names):
        chosen = names
    else:
        rng = rng_for(step_seed, "reg-sample")
        chosen = [names[i] for i in rng.choice(len(names), size=take, replace=False)]
    terms = [
        nc.squared_distance(
            hnet.generate_flat(memory.z_for(name)),
            nc.constant(memory.snapshot_for(name)),
        )
        for name in chosen
    ]
    penalty = terms[0] if len(terms) == 1 else nc.add_n(terms)
    return nc.scale(penalty, 1.0 / len(terms)) if len(terms) > 1 else penalty


def bilevel_loss(model, hnet: HyperNetwork, rep: TaskRepresentation, texts, targets, label_mat, include_fewshot: bool = True) -> Tensor:
    """Prediction loss under high-resource adapters plus (optionally) the
    same batch's loss under few-shot-sampled adapters, equally weighted.

    When z_f equals z_h (the sample covered the whole dataset) the second
    pass would be bitwise identical, so the single loss is scaled by 2
    instead; values and gradients are unchanged (x + x == 2x in IEEE).
    """
    loss = model.batch_loss(texts, targets, label_mat, hnet.generate(rep.z_h))
    if include_fewshot:
        if rep.z_f is rep.z_h or np.array_equal(rep.z_f, rep.z_h):
            return nc.scale(loss, 2.0)
        loss = nc.add(loss, model.batch_loss(texts, targets, label_mat, hnet.generate(rep.z_f)))
    return loss
