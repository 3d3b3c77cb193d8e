"""Training algorithms behind one learner interface.

Every learner supports train-on-stream (before/train/after per task),
evaluate, and fewshot_adapt. Direct learners train the flat adapter vector;
hypernetwork learners train the generator and condition on task
representations. "Single" learners restart from a fresh initialization for
every upstream task and also adapt few-shot episodes from that fresh
initialization, which makes them the zero-knowledge reference points.

Determinism: every stochastic stream (init, shuffling, few-shot sampling,
replay draws, regularizer sampling) is keyed by purpose, so disabling one
feature never shifts the random draws of another. That is what makes the
degeneracy equivalences (EWC at lambda 0 vs vanilla, etc.) hold bitwise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .adapters import AdapterModel, AdapterShape, AdapterWeights
from .bihnet import (
    HyperNetwork,
    RegConfig,
    RepresentationMemory,
    TaskRepresentation,
    bilevel_loss,
    compute_task_representation,
    regularization_term,
)
from .datagen import Episode, Task
from .encoder import FrozenEncoder
from .numcore import Adam, ParamStore, rng_for, stable_seed
from . import serialize


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "vanilla"
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 3
    fewshot_epochs: int = 400
    replay_interval: int = 100
    ewc_lambda: float = 0.01
    ewc_decay: float = 1.0
    mbpa_neighbors: int = 8
    mbpa_local_steps: int = 5
    reg: RegConfig = field(default_factory=RegConfig)
    bilevel: bool = True  # False drops the few-shot representation loss term
    fewshot_finetune: str = "hypernet"  # or "adapter": tune generated weights directly
    upstream_sample_size: int = 10  # K for the few-shot task representation

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "max_epochs", "patience", "mbpa_neighbors",
                     "upstream_sample_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        # zero disables the corresponding mechanism (degeneracy contracts)
        if min(self.replay_interval, self.mbpa_local_steps, self.fewshot_epochs) < 0:
            raise ValueError("replay_interval, mbpa_local_steps, fewshot_epochs must be >= 0")
        if self.ewc_lambda < 0 or self.ewc_decay < 0:
            raise ValueError("ewc_lambda and ewc_decay must be >= 0")
        if self.fewshot_finetune not in ("hypernet", "adapter"):
            raise ValueError("fewshot_finetune must be 'hypernet' or 'adapter'")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    val_acc: float
    epoch: int

    def to_bytes(self) -> bytes:
        blocks = dict(self.params)
        blocks["meta.validation_accuracy"] = np.array([self.val_acc])
        blocks["meta.epoch"] = np.array([float(self.epoch)])
        return serialize.write_params_bytes(blocks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        blocks = serialize.read_params_bytes(blob)
        val_acc = float(blocks.pop("meta.validation_accuracy")[0])
        epoch = int(blocks.pop("meta.epoch")[0])
        return cls(params=blocks, val_acc=val_acc, epoch=epoch)


@dataclass
class FisherState:
    fisher: dict[str, np.ndarray] = field(default_factory=dict)
    anchors: dict[str, np.ndarray] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.fisher)


def ewc_penalty(state: FisherState, store: ParamStore, lam: float):
    """(lam/2) * sum_i F_i (theta_i - theta*_i)^2 as a graph node; None when
    nothing has been consolidated yet."""
    if not state or lam == 0.0:
        return None
    terms = []
    for name, fisher in state.fisher.items():
        diff = nc.sub(store[name], nc.constant(state.anchors[name]))
        terms.append(nc.tensor_sum(nc.mul(nc.constant(fisher), nc.mul(diff, diff))))
    total = terms[0] if len(terms) == 1 else nc.add_n(terms)
    return nc.scale(total, lam / 2.0)


class ExampleMemory:
    """Every training example of every seen task, with representation keys
    for nearest-neighbor retrieval."""

    def __init__(self, encoder: FrozenEncoder):
        self.encoder = encoder
        self.texts: list[str] = []
        self.targets: list[int] = []
        self.task_names: list[str] = []
        self._keys: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.texts)

    def key_for(self, text: str) -> np.ndarray:
        return self.encoder.encode(text)[-1]

    def store_task(self, task: Task) -> None:
        for text, target in task.train:
            self.texts.append(text)
            self.targets.append(target)
            self.task_names.append(task.name)
            self._keys.append(self.key_for(text))

    def neighbors(self, text: str, count: int) -> list[int]:
        keys = np.stack(self._keys)
        dist = np.linalg.norm(keys - self.key_for(text), axis=1)
        return list(np.argsort(dist, kind="stable")[:count])

    def sample_batch(self, size: int, rng) -> list[int]:
        size = min(size, len(self.texts))
        return list(rng.choice(len(self.texts), size=size, replace=False))


class WeightsPredictor:
    """Frozen prediction head over a fixed flat adapter vector."""

    def __init__(self, model: AdapterModel, labels: list[str], flat: np.ndarray):
        self.model = model
        self.labels = labels
        self._label_mat = model.label_matrix(labels)
        self._weights = AdapterWeights(model.shape, nc.constant(flat.copy()))

    def predict_batch(self, texts: list[str]) -> np.ndarray:
        return self.model.predict_batch(texts, self._label_mat, self._weights)

    def evaluate(self, examples: list[tuple[str, int]]) -> float:
        texts = [t for t, _ in examples]
        targets = np.asarray([y for _, y in examples])
        return float(np.mean(self.predict_batch(texts) == targets))


class MajorityPredictor:
    def __init__(self, index: int):
        self.index = index

    def predict_batch(self, texts: list[str]) -> np.ndarray:
        return np.full(len(texts), self.index, dtype=np.int64)

    def evaluate(self, examples: list[tuple[str, int]]) -> float:
        targets = np.asarray([y for _, y in examples])
        return float(np.mean(targets == self.index))


def majority_index(examples: list[tuple[str, int]]) -> int:
    """Most frequent label index; ties break toward the lowest index."""
    if not examples:
        raise ValueError("majority of an empty example list")
    counts = np.bincount([y for _, y in examples])
    return int(np.argmax(counts))


# ---------------------------------------------------------------------------
# learner base


class Learner:
    algorithm = "base"
    joint_stream = False  # True: train_stream is one joint phase (MTL)

    def __init__(self, config: LearnerConfig, encoder: FrozenEncoder,
                 shape: AdapterShape, seed: int):
        self.config = config
        self.encoder = encoder
        self.shape = shape
        self.seed = seed
        self.model = AdapterModel(encoder, shape)
        self.store = ParamStore()
        self.global_step = 0
        self._init_params()

    # -- hooks -------------------------------------------------------------
    def _init_params(self) -> None:
        pass

    def before_task(self, task: Task) -> None:
        pass

    def after_task(self, task: Task) -> None:
        pass

    def train_task(self, task: Task) -> None:
        raise NotImplementedError

    def train_stream(self, tasks: list[Task]) -> None:
        for task in tasks:
            self.before_task(task)
            self.train_task(task)
            self.after_task(task)

    def evaluate(self, task: Task, split: str = "test") -> float:
        raise NotImplementedError

    def fewshot_adapt(self, episode: Episode):
        raise NotImplementedError

    # -- shared machinery ----------------------------------------------------
    def trainable_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.store.names()):
            h.update(name.encode())
            h.update(self.store[name].data.tobytes())
        return h.hexdigest()

    def _epoch_batches(self, examples, epoch: int, task_name: str, extra=()):
        rng = rng_for(self.seed, "shuffle", task_name, epoch, *extra)
        order = rng.permutation(len(examples))
        bs = self.config.batch_size
        for start in range(0, len(examples), bs):
            chunk = [examples[i] for i in order[start : start + bs]]
            yield [t for t, _ in chunk], [y for _, y in chunk]

    def _run_early_stopped(self, task: Task, step_fn, val_fn) -> Checkpoint:
        """Shuffled mini-batch epochs with patience-based early stopping;
        restores and returns the best checkpoint."""
        if not task.train:
            raise ValueError(f"task {task.name}: empty train split")
        cfg = self.config
        best = Checkpoint(params=self.store.state_dict(), val_acc=-np.inf, epoch=0)
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            for texts, targets in self._epoch_batches(task.train, epoch, task.name):
                step_fn(texts, targets, epoch)
            acc = val_fn()
            if acc > best.val_acc:
                best = Checkpoint(params=self.store.state_dict(), val_acc=acc, epoch=epoch)
                stale = 0
            else:
                stale += 1
            if stale >= cfg.patience:
                break
        self.store.load_state_dict(best.params)
        return best


# ---------------------------------------------------------------------------
# direct adapter learners


class VanillaLearner(Learner):
    """Sequential mini-batch training of the flat adapter vector."""

    algorithm = "vanilla"

    def _init_params(self) -> None:
        self.store.add("adapter.flat", self.shape.init_flat(rng_for(self.seed, "init", "adapter")))

    def _weights(self) -> AdapterWeights:
        return AdapterWeights(self.shape, self.store["adapter.flat"])

    def _task_loss(self, texts, targets, label_mat):
        return self.model.batch_loss(texts, targets, label_mat, self._weights())

    def _loss_with_penalties(self, texts, targets, label_mat):
        return self._task_loss(texts, targets, label_mat)

    def _post_step(self, opt: Adam) -> None:
        pass

    def train_task(self, task: Task) -> None:
        label_mat = self.model.label_matrix(task.labels)
        opt = Adam(self.store, lr=self.config.learning_rate)

        def step(texts, targets, epoch):
            loss = self._loss_with_penalties(texts, targets, label_mat)
            loss.backward()
            opt.step()
            self.global_step += 1
            self._post_step(opt)

        self._run_early_stopped(task, step, lambda: self.evaluate(task, "validation"))

    def evaluate(self, task: Task, split: str = "test") -> float:
        examples = task.splits()[split]
        texts = [t for t, _ in examples]
        targets = np.asarray([y for _, y in examples])
        preds = self.model.predict_batch(texts, self.model.label_matrix(task.labels), self._weights())
        return float(np.mean(preds == targets))

    def _fewshot_start(self) -> np.ndarray:
        return self.store["adapter.flat"].data.copy()

    def fewshot_adapt(self, episode: Episode) -> WeightsPredictor:
        """Fine-tune a cloned adapter vector on the episode; the learner's
        own parameters are untouched."""
        if not episode.train:
            raise ValueError("empty few-shot episode")
        clone = ParamStore()
        clone.add("adapter.flat", self._fewshot_start())
        weights = AdapterWeights(self.shape, clone["adapter.flat"])
        label_mat = self.model.label_matrix(episode.labels)
        opt = Adam(clone, lr=self.config.learning_rate)
        for epoch in range(1, self.config.fewshot_epochs + 1):
            for texts, targets in self._epoch_batches(
                episode.train, epoch, episode.task_name, extra=("fewshot", episode.resample_seed)
            ):
                self.model.batch_loss(texts, targets, label_mat, weights).backward()
                opt.step()
        return WeightsPredictor(self.model, episode.labels, clone["adapter.flat"].data)


class AdapterSingleLearner(VanillaLearner):
    """Zero-knowledge reference: fresh adapters per upstream task, and
    few-shot adaptation always starts from the fresh initialization."""

    algorithm = "adapter-single"

    def before_task(self, task: Task) -> None:
        fresh = self.shape.init_flat(rng_for(self.seed, "init", "adapter"))
        self.store["adapter.flat"].data[...] = fresh

    def _fewshot_start(self) -> np.ndarray:
        return self.shape.init_flat(rng_for(self.seed, "init", "adapter"))


class EWCLearner(VanillaLearner):
    """Vanilla plus an online diagonal-Fisher quadratic penalty."""

    algorithm = "ewc"
    FISHER_SAMPLE_LIMIT = 256

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.fisher_state = FisherState()

    def _loss_with_penalties(self, texts, targets, label_mat):
        loss = self._task_loss(texts, targets, label_mat)
        penalty = ewc_penalty(self.fisher_state, self.store, self.config.ewc_lambda)
        return loss if penalty is None else nc.add(loss, penalty)

    def after_task(self, task: Task) -> None:
        """Consolidate: decay the running Fisher and add the empirical
        squared-gradient estimate over the first <=256 train examples."""
        label_mat = self.model.label_matrix(task.labels)
        sample = task.train[: self.FISHER_SAMPLE_LIMIT]
        sq_sums = {name: np.zeros_like(p.data) for name, p in self.store.items()}
        self.store.zero_grad()
        for text, target in sample:
            self.model.batch_loss([text], [target], label_mat, self._weights()).backward()
            for name, p in self.store.items():
                sq_sums[name] += p.grad * p.grad
                p.grad.fill(0.0)
        gamma = self.config.ewc_decay
        for name in sq_sums:
            estimate = sq_sums[name] / len(sample)
            if name in self.fisher_state.fisher:
                self.fisher_state.fisher[name] = gamma * self.fisher_state.fisher[name] + estimate
            else:
                self.fisher_state.fisher[name] = estimate
        self.fisher_state.anchors = self.store.state_dict()


class MbpaLearner(VanillaLearner):
    """Vanilla plus periodic replay from an all-example memory and local
    test-time adaptation on retrieved neighbors."""

    algorithm = "mbpa"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.memory = ExampleMemory(self.encoder)
        self._task_labels: dict[str, list[str]] = {}

    def after_task(self, task: Task) -> None:
        self.memory.store_task(task)
        self._task_labels[task.name] = list(task.labels)

    def _memory_loss(self, indices):
        """Mean loss over memory examples, each scored against its own
        task's label set."""
        by_task: dict[str, list[int]] = {}
        for i in indices:
            by_task.setdefault(self.memory.task_names[i], []).append(i)
        terms = []
        for name, idxs in sorted(by_task.items()):
            labels = self._task_labels[name]
            texts = [self.memory.texts[i] for i in idxs]
            targets = [self.memory.targets[i] for i in idxs]
            loss = self.model.batch_loss(texts, targets, self.model.label_matrix(labels),
                                         self._weights())
            terms.append(nc.scale(loss, len(idxs) / len(indices)))
        return terms[0] if len(terms) == 1 else nc.add_n(terms)

    def _post_step(self, opt: Adam) -> None:
        interval = self.config.replay_interval
        if interval <= 0 or len(self.memory) == 0 or self.global_step % interval != 0:
            return
        rng = rng_for(self.seed, "replay", self.global_step)
        self._memory_loss(self.memory.sample_batch(self.config.batch_size, rng)).backward()
        opt.step()

    def _adapted_flat(self, text: str) -> np.ndarray:
        """Locally adapted adapter vector for one query; global state is
        saved and restored around the local steps."""
        saved = self.store.state_dict()
        neighbor_idx = self.memory.neighbors(text, self.config.mbpa_neighbors)
        opt = Adam(self.store, lr=self.config.learning_rate)
        for _ in range(self.config.mbpa_local_steps):
            self._memory_loss(neighbor_idx).backward()
            opt.step()
        flat = self.store["adapter.flat"].data.copy()
        self.store.load_state_dict(saved)
        return flat

    def adapt_predict(self, text: str, labels: list[str]):
        """MbPA-style prediction; falls back to direct prediction when the
        memory is empty or local adaptation is disabled."""
        from .adapters import Prediction

        if len(self.memory) == 0 or self.config.mbpa_local_steps == 0:
            return self.model.score_labels(text, labels, self._weights())
        flat = self._adapted_flat(text)
        weights = AdapterWeights(self.shape, nc.constant(flat))
        scores = self.model.score_batch([text], self.model.label_matrix(labels), weights).data[0]
        return Prediction(scores=scores, predicted_index=int(np.argmax(scores)))

    def evaluate(self, task: Task, split: str = "test") -> float:
        if split != "test" or len(self.memory) == 0 or self.config.mbpa_local_steps == 0:
            return super().evaluate(task, split)
        examples = task.splits()[split]
        hits = 0
        for text, target in examples:
            hits += int(self.adapt_predict(text, task.labels).predicted_index == target)
        return hits / len(examples)


class MTLLearner(VanillaLearner):
    """Joint multi-task phase over the whole stream; batches never mix
    tasks, tasks are sampled proportionally to their train-split sizes."""

    algorithm = "mtl"
    joint_stream = True

    def train_stream(self, tasks: list[Task]) -> None:
        for task in tasks:
            self.before_task(task)
        self.train_joint(tasks)
        for task in tasks:
            self.after_task(task)

    def train_joint(self, tasks: list[Task]) -> None:
        cfg = self.config
        label_mats = {t.name: self.model.label_matrix(t.labels) for t in tasks}
        sizes = np.array([len(t.train) for t in tasks], dtype=np.float64)
        probs = sizes / sizes.sum()
        steps_per_epoch = max(1, int(np.ceil(sizes.sum() / cfg.batch_size)))
        opt = Adam(self.store, lr=cfg.learning_rate)
        best = Checkpoint(params=self.store.state_dict(), val_acc=-np.inf, epoch=0)
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            rng = rng_for(self.seed, "mtl-epoch", epoch)
            for _ in range(steps_per_epoch):
                task = tasks[int(rng.choice(len(tasks), p=probs))]
                idx = rng.choice(len(task.train), size=min(cfg.batch_size, len(task.train)),
                                 replace=False)
                chunk = [task.train[i] for i in idx]
                loss = self.model.batch_loss([t for t, _ in chunk], [y for _, y in chunk],
                                             label_mats[task.name], self._weights())
                loss.backward()
                opt.step()
                self.global_step += 1
            acc = float(np.mean([self.evaluate(t, "validation") for t in tasks]))
            if acc > best.val_acc:
                best = Checkpoint(params=self.store.state_dict(), val_acc=acc, epoch=epoch)
                stale = 0
            else:
                stale += 1
            if stale >= cfg.patience:
                break
        self.store.load_state_dict(best.params)

    def train_task(self, task: Task) -> None:
        self.train_joint([task])


# ---------------------------------------------------------------------------
# hypernetwork learners


class HyperLearnerBase(Learner):
    """Shared machinery: hypernetwork, representation memory, drift
    regularizer, and hypernetwork (or generated-adapter) few-shot tuning."""

    reg_strength_active = False
    single_per_task = False

    def _init_params(self) -> None:
        self.hnet = HyperNetwork(self.store, self.shape, seed=stable_seed(self.seed, "init"))
        self.memory = RepresentationMemory(self.shape.dim, self.shape.param_count)

    def _reg_strength(self) -> float:
        return self.config.reg.reg_strength if self.reg_strength_active else 0.0

    def _fresh_hnet_state(self) -> dict[str, np.ndarray]:
        scratch = ParamStore()
        HyperNetwork(scratch, self.shape, seed=stable_seed(self.seed, "init"))
        return scratch.state_dict()

    def before_task(self, task: Task) -> None:
        if self.single_per_task:
            self.store.load_state_dict(self._fresh_hnet_state())
        if self._reg_strength() > 0:
            self.memory.snapshot_all(self.hnet)

    def after_task(self, task: Task) -> None:
        rep = self._task_rep(task, epoch=0)
        self.memory.store(task.name, rep.z_h, self.hnet)

    def _rep_matrix(self, task: Task) -> np.ndarray:
        pairs = [(text, task.labels[y]) for text, y in task.train]
        return np.stack([self.encoder.represent_example(x, y) for x, y in pairs])

    def _task_rep(self, task: Task, epoch: int) -> TaskRepresentation:
        """z_h over the full train split; z_f resampled once per epoch."""
        reps = self._rep_cache if getattr(self, "_rep_task", None) == task.name else None
        if reps is None:
            reps = self._rep_matrix(task)
            self._rep_cache = reps
            self._rep_task = task.name
        n = reps.shape[0]
        k = min(self.config.upstream_sample_size, n)
        if k == n:
            idx = np.arange(n)
        else:
            rng = rng_for(self.seed, "zf", task.name, epoch)
            idx = np.sort(rng.choice(n, size=k, replace=False))
        return TaskRepresentation(z_h=reps.mean(axis=0), z_f=reps[idx].mean(axis=0),
                                  sample_size=k)

    def _step_loss(self, rep: TaskRepresentation, texts, targets, label_mat):
        loss = bilevel_loss(self.model, self.hnet, rep, texts, targets, label_mat,
                            include_fewshot=self.config.bilevel)
        strength = self._reg_strength()
        if strength > 0 and len(self.memory) > 0:
            penalty = regularization_term(
                self.hnet, self.memory, stable_seed(self.seed, "reg", self.global_step),
                sample_count=self.config.reg.prior_sample_count,
            )
            loss = nc.add(loss, nc.scale(penalty, strength))
        return loss

    def train_task(self, task: Task) -> None:
        label_mat = self.model.label_matrix(task.labels)
        opt = Adam(self.store, lr=self.config.learning_rate)
        rep_holder = {}

        def step(texts, targets, epoch):
            if rep_holder.get("epoch") != epoch:
                rep_holder["epoch"] = epoch
                rep_holder["rep"] = self._task_rep(task, epoch)
            self._step_loss(rep_holder["rep"], texts, targets, label_mat).backward()
            opt.step()
            self.global_step += 1

        self._run_early_stopped(task, step, lambda: self.evaluate(task, "validation"))

    def _eval_z(self, task: Task) -> np.ndarray:
        if task.name in self.memory:
            return self.memory.z_for(task.name)
        return self._task_rep(task, epoch=0).z_h

    def evaluate(self, task: Task, split: str = "test") -> float:
        examples = task.splits()[split]
        texts = [t for t, _ in examples]
        targets = np.asarray([y for _, y in examples])
        weights = self.hnet.generate(self._eval_z(task))
        preds = self.model.predict_batch(texts, self.model.label_matrix(task.labels), weights)
        return float(np.mean(preds == targets))

    # -- few-shot ------------------------------------------------------------
    def _fewshot_hnet_state(self) -> dict[str, np.ndarray]:
        if self.single_per_task:
            return self._fresh_hnet_state()
        return self.store.state_dict()

    def fewshot_adapt(self, episode: Episode) -> WeightsPredictor:
        """Clone the hypernetwork, represent the episode with K equal to its
        size (so z_h == z_f), fine-tune the clone on the episode loss, and
        return a frozen predictor. With fewshot_finetune="adapter" the
        generated flat vector is tuned directly instead."""
        if not episode.train:
            raise ValueError("empty few-shot episode")
        pairs = [(text, episode.labels[y]) for text, y in episode.train]
        rep = compute_task_representation(
            self.encoder, pairs, k=len(pairs),
            sample_seed=stable_seed(self.seed, "fewshot-rep", episode.resample_seed),
        )
        label_mat = self.model.label_matrix(episode.labels)

        if self.config.fewshot_finetune == "adapter":
            scratch = ParamStore()
            base = HyperNetwork(scratch, self.shape, seed=0)
            scratch.load_state_dict(self._fewshot_hnet_state())
            clone = ParamStore()
            clone.add("adapter.flat", base.generate_flat(rep.z_h).data.copy())
            weights = AdapterWeights(self.shape, clone["adapter.flat"])
            loss_fn = lambda texts, targets: self.model.batch_loss(
                texts, targets, label_mat, weights)
            final_flat = lambda: clone["adapter.flat"].data
        else:
            clone = ParamStore()
            tuned = HyperNetwork(clone, self.shape, seed=0)
            clone.load_state_dict(self._fewshot_hnet_state())
            loss_fn = lambda texts, targets: bilevel_loss(
                self.model, tuned, rep, texts, targets, label_mat,
                include_fewshot=self.config.bilevel)
            final_flat = lambda: tuned.generate_flat(rep.z_h).data

        opt = Adam(clone, lr=self.config.learning_rate)
        for epoch in range(1, self.config.fewshot_epochs + 1):
            for texts, targets in self._epoch_batches(
                episode.train, epoch, episode.task_name, extra=("fewshot", episode.resample_seed)
            ):
                loss_fn(texts, targets).backward()
                opt.step()
        return WeightsPredictor(self.model, episode.labels, final_flat().copy())


class BiHNetVanillaLearner(HyperLearnerBase):
    algorithm = "bihnet-vanilla"


class BiHNetRegLearner(HyperLearnerBase):
    algorithm = "bihnet-reg"
    reg_strength_active = True


class BiHNetSingleLearner(HyperLearnerBase):
    algorithm = "bihnet-single"
    single_per_task = True


class HNetRegLearner(HyperLearnerBase):
    """Drift-regularized hypernetwork conditioned on trainable per-task
    embeddings instead of context-predictor representations; no bi-level
    term (this is the trainable-embeddings ablation arm)."""

    algorithm = "hnet-reg"
    reg_strength_active = True

    def _embedding_param(self, name: str):
        key = f"emb.{name}"
        if key not in self.store:
            self.store.add(key, rng_for(self.seed, "emb", name).normal(0.0, 0.01, size=self.shape.dim))
        return self.store[key]

    def train_task(self, task: Task) -> None:
        emb = self._embedding_param(task.name)
        label_mat = self.model.label_matrix(task.labels)
        opt = Adam(self.store, lr=self.config.learning_rate)

        def step(texts, targets, epoch):
            loss = self.model.batch_loss(texts, targets, label_mat, self.hnet.generate(emb))
            strength = self._reg_strength()
            if strength > 0 and len(self.memory) > 0:
                penalty = regularization_term(
                    self.hnet, self.memory, stable_seed(self.seed, "reg", self.global_step),
                    sample_count=self.config.reg.prior_sample_count,
                )
                loss = nc.add(loss, nc.scale(penalty, strength))
            loss.backward()
            opt.step()
            self.global_step += 1

        self._run_early_stopped(task, step, lambda: self.evaluate(task, "validation"))

    def after_task(self, task: Task) -> None:
        self.memory.store(task.name, self.store[f"emb.{task.name}"].data.copy(), self.hnet)

    def _eval_z(self, task: Task) -> np.ndarray:
        if task.name in self.memory:
            return self.memory.z_for(task.name)
        if f"emb.{task.name}" in self.store:
            return self.store[f"emb.{task.name}"].data
        return rng_for(self.seed, "emb", task.name).normal(0.0, 0.01, size=self.shape.dim)

    def fewshot_adapt(self, episode: Episode) -> WeightsPredictor:
        """Fresh trainable embedding plus a hypernetwork clone, tuned
        jointly on the episode."""
        if not episode.train:
            raise ValueError("empty few-shot episode")
        label_mat = self.model.label_matrix(episode.labels)
        clone = ParamStore()
        tuned = HyperNetwork(clone, self.shape, seed=0)
        clone.load_state_dict({k: v for k, v in self.store.state_dict().items()
                               if k.startswith("hnet.")})
        emb = clone.add("emb.fewshot", rng_for(
            self.seed, "emb", "fewshot", episode.task_name, episode.resample_seed
        ).normal(0.0, 0.01, size=self.shape.dim))
        opt = Adam(clone, lr=self.config.learning_rate)
        for epoch in range(1, self.config.fewshot_epochs + 1):
            for texts, targets in self._epoch_batches(
                episode.train, epoch, episode.task_name, extra=("fewshot", episode.resample_seed)
            ):
                self.model.batch_loss(texts, targets, label_mat, tuned.generate(emb)).backward()
                opt.step()
        return WeightsPredictor(self.model, episode.labels,
                                tuned.generate_flat(emb.data).data.copy())


class MajorityLearner(Learner):
    """Predicts the most frequent training label of each task."""

    algorithm = "majority"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._majority: dict[str, int] = {}

    def train_task(self, task: Task) -> None:
        if not task.train:
            raise ValueError(f"task {task.name}: empty train split")
        self._majority[task.name] = majority_index(task.train)

    def evaluate(self, task: Task, split: str = "test") -> float:
        index = self._majority.get(task.name)
        if index is None:
            index = majority_index(task.train)
        return MajorityPredictor(index).evaluate(task.splits()[split])

    def fewshot_adapt(self, episode: Episode) -> MajorityPredictor:
        if not episode.train:
            raise ValueError("empty few-shot episode")
        return MajorityPredictor(majority_index(episode.train))


ALGORITHMS: dict[str, type[Learner]] = {
    cls.algorithm: cls
    for cls in (
        VanillaLearner,
        AdapterSingleLearner,
        EWCLearner,
        MbpaLearner,
        MTLLearner,
        BiHNetVanillaLearner,
        BiHNetRegLearner,
        BiHNetSingleLearner,
        HNetRegLearner,
        MajorityLearner,
    )
}


def build_learner(config: LearnerConfig, encoder: FrozenEncoder,
                  shape: AdapterShape, seed: int) -> Learner:
    try:
        cls = ALGORITHMS[config.algorithm]
    except KeyError:
        raise ValueError(
            f"unknown algorithm {config.algorithm!r}; expected one of {sorted(ALGORITHMS)}"
        ) from None
    return cls(config, encoder, shape, seed)
