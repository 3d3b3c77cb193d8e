"""Task universe: synthetic classification families, JSONL ingestion,
stratified splits, and k-shot episode sampling.

Three synthetic families cover the benchmark needs. keyword-topic tasks are
plain: each class owns a disjoint keyword set planted into filler text.
label-permuted tasks reuse one set of texts and permute which keyword group
maps to which label, so a sequential learner keeps repurposing the same
inputs for conflicting outputs. composition tasks label texts by pairs of
(primary, secondary) keyword groups, so upstream tasks that teach the two
dimensions separately carry transferable structure into few-shot tasks that
recombine them.

All generated words are checked for hash-bucket collisions (FNV-1a modulo
the default bucket count) against every other word and label in the family,
which keeps classes separable under the hashed encoder by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


from .encoder import fnv1a_64
from .numcore import rng_for

DEFAULT_BUCKETS = 4096

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


class DataError(ValueError):
    pass


@dataclass
class Task:
    name: str
    labels: list[str]
    train: list[tuple[str, int]]
    validation: list[tuple[str, int]]
    test: list[tuple[str, int]]
    provenance: str = ""

    def validate(self, allow_duplicates: bool = False) -> None:
        if len(self.labels) < 2:
            raise DataError(f"task {self.name}: needs at least 2 labels")
        for split_name, split in self.splits().items():
            if not split:
                raise DataError(f"task {self.name}: empty {split_name} split")
            for text, idx in split:
                if not 0 <= idx < len(self.labels):
                    raise DataError(f"task {self.name}: label index {idx} out of range")
        train_labels = {idx for _, idx in self.train}
        if train_labels != set(range(len(self.labels))):
            missing = sorted(set(range(len(self.labels))) - train_labels)
            raise DataError(f"task {self.name}: labels {missing} absent from train split")
        if not allow_duplicates:
            seen: dict[tuple[str, int], str] = {}
            for split_name, split in self.splits().items():
                for pair in split:
                    prev = seen.get(pair)
                    if prev is not None and prev != split_name:
                        raise DataError(
                            f"task {self.name}: example shared by {prev} and {split_name}"
                        )
                    seen[pair] = split_name

    def splits(self) -> dict[str, list[tuple[str, int]]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass
class Episode:
    task_name: str
    k: int
    resample_seed: int
    labels: list[str]
    train: list[tuple[str, int]]
    test: list[tuple[str, int]]
    clamped_labels: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class SyntheticFamilySpec:
    family: str  # keyword-topic | label-permuted | composition
    vocab_seed: int
    classes: int
    train_per_class: int = 200
    val_per_class: int = 50
    test_per_class: int = 100
    noise_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 0.5:
            raise DataError("noise rate must be in [0, 0.5) to keep tasks learnable")
        if self.classes < 2:
            raise DataError("need at least 2 classes")


class Vocabulary:
    """Seeded pseudo-word pools: named keyword groups plus shared fillers.

    Words are unique and occupy distinct hash buckets, also distinct from
    the buckets of every reserved label word.
    """

    def __init__(
        self,
        seed: int,
        groups: dict[str, int],
        filler_count: int = 48,
        reserved_labels: tuple[str, ...] = (),
        buckets: int = DEFAULT_BUCKETS,
    ):
        self.seed = seed
        rng = rng_for(seed, "vocabulary")
        used = set()
        for label in reserved_labels:
            b = fnv1a_64(label) % buckets
            if b in used:
                raise DataError(f"label word {label!r} collides in hash bucket {b}")
            used.add(b)

        def fresh_word() -> str:
            for _ in range(10_000):
                n_syll = int(rng.integers(2, 4))
                word = "".join(
                    _CONSONANTS[rng.integers(len(_CONSONANTS))]
                    + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syll)
                )
                b = fnv1a_64(word) % buckets
                if b not in used:
                    used.add(b)
                    return word
            raise DataError("could not find a collision-free word")

        self.groups = {name: [fresh_word() for _ in range(size)] for name, size in groups.items()}
        self.fillers = [fresh_word() for _ in range(filler_count)]

    def group(self, name: str) -> list[str]:
        try:
            return self.groups[name]
        except KeyError:
            raise DataError(f"unknown keyword group {name!r}") from None


def _make_text(rng, keywords: list[str], fillers: list[str], length_range=(9, 13)) -> str:
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    n_fill = max(0, length - len(keywords))
    words = list(keywords) + [fillers[i] for i in rng.integers(len(fillers), size=n_fill)]
    rng.shuffle(words)
    return " ".join(words)


def _dedup_texts(make_one, count, seen: set[str]):
    out = []
    for _ in range(count):
        for _ in range(1000):
            text = make_one()
            if text not in seen:
                seen.add(text)
                out.append(text)
                break
        else:
            raise DataError("could not generate enough distinct texts")
    return out


def _apply_noise(train: list[tuple[str, int]], n_labels: int, noise_rate: float, rng) -> None:
    if noise_rate <= 0:
        return
    n_flip = int(noise_rate * len(train))
    for i in rng.choice(len(train), size=n_flip, replace=False):
        text, idx = train[i]
        shift = int(rng.integers(1, n_labels))
        train[i] = (text, (idx + shift) % n_labels)


def make_keyword_topic_task(
    vocab: Vocabulary,
    name: str,
    groups: list[str],
    labels: list[str],
    spec: SyntheticFamilySpec,
    distractor_groups: list[str] | None = None,
    keywords_per_text: int = 2,
) -> Task:
    """One class per keyword group; texts plant class keywords among fillers
    and, when distractor groups are given, keywords from a random distractor
    group (which is what makes composition streams recombinable)."""
    if len(groups) != len(labels):
        raise DataError(f"task {name}: {len(groups)} groups vs {len(labels)} labels")
    rng = rng_for(vocab.seed, "task", name)
    seen: set[str] = set()
    splits = {}
    for split_name, per_class in (
        ("train", spec.train_per_class),
        ("validation", spec.val_per_class),
        ("test", spec.test_per_class),
    ):
        examples: list[tuple[str, int]] = []
        for class_idx, group in enumerate(groups):
            words = vocab.group(group)

            def one() -> str:
                kws = [words[i] for i in rng.integers(len(words), size=keywords_per_text)]
                if distractor_groups:
                    other = vocab.group(distractor_groups[rng.integers(len(distractor_groups))])
                    kws += [other[i] for i in rng.integers(len(other), size=keywords_per_text)]
                return _make_text(rng, kws, vocab.fillers)

            examples += [(t, class_idx) for t in _dedup_texts(one, per_class, seen)]
        splits[split_name] = examples
    _apply_noise(splits["train"], len(labels), spec.noise_rate, rng_for(vocab.seed, "noise", name))
    task = Task(name, list(labels), splits["train"], splits["validation"], splits["test"],
                provenance=f"keyword-topic:{vocab.seed}")
    task.validate()
    return task


def make_composition_task(
    vocab: Vocabulary,
    name: str,
    cells: list[tuple[str, str]],
    labels: list[str],
    spec: SyntheticFamilySpec,
    keywords_per_dim: int = 2,
) -> Task:
    """Each class is a pair of keyword groups; texts carry keywords from
    both, so the class is the conjunction of the two dimensions."""
    if len(cells) != len(labels):
        raise DataError(f"task {name}: {len(cells)} cells vs {len(labels)} labels")
    rng = rng_for(vocab.seed, "task", name)
    seen: set[str] = set()
    splits = {}
    for split_name, per_class in (
        ("train", spec.train_per_class),
        ("validation", spec.val_per_class),
        ("test", spec.test_per_class),
    ):
        examples: list[tuple[str, int]] = []
        for class_idx, (primary, secondary) in enumerate(cells):
            first, second = vocab.group(primary), vocab.group(secondary)

            def one() -> str:
                kws = [first[i] for i in rng.integers(len(first), size=keywords_per_dim)]
                kws += [second[i] for i in rng.integers(len(second), size=keywords_per_dim)]
                return _make_text(rng, kws, vocab.fillers)

            examples += [(t, class_idx) for t in _dedup_texts(one, per_class, seen)]
        splits[split_name] = examples
    _apply_noise(splits["train"], len(labels), spec.noise_rate, rng_for(vocab.seed, "noise", name))
    task = Task(name, list(labels), splits["train"], splits["validation"], splits["test"],
                provenance=f"composition:{vocab.seed}")
    task.validate()
    return task


def make_label_permuted_family(
    vocab: Vocabulary,
    base_name: str,
    groups: list[str] | list[list[str]],
    task_labels: list[list[str]],
    permutations: list[list[int]],
    spec: SyntheticFamilySpec,
    keywords_per_text: int = 2,
) -> list[Task]:
    """Tasks whose label assignments permute per task: the text cluster built
    from keyword group g is labeled task_labels[t][permutations[t][g]].

    With one shared group list the tasks share one set of texts, so the text
    marginal is identical across the family and only the outputs move. With
    per-task group lists (one list per task) every task gets fresh keyword
    clusters while reusing the same label words under permuted assignments,
    which keeps the task union learnable.
    """
    if len(task_labels) != len(permutations):
        raise DataError("need one label set per permutation")
    shared_groups = not groups or not isinstance(groups[0], list)
    task_groups = [list(groups)] * len(task_labels) if shared_groups else [list(g) for g in groups]
    if len(task_groups) != len(task_labels):
        raise DataError("need one group list per task")
    n_classes = len(task_groups[0])
    for tg, perm in zip(task_groups, permutations):
        if len(tg) != n_classes:
            raise DataError("all tasks must have the same class count")
        if sorted(perm) != list(range(n_classes)):
            raise DataError(f"invalid permutation {perm} for {n_classes} groups")

    def build_splits(group_list: list[str], stream_key: str):
        rng = rng_for(vocab.seed, "family", base_name, stream_key)
        seen: set[str] = set()
        splits: dict[str, list[tuple[str, int]]] = {}
        for split_name, per_class in (
            ("train", spec.train_per_class),
            ("validation", spec.val_per_class),
            ("test", spec.test_per_class),
        ):
            examples: list[tuple[str, int]] = []
            for group_idx, group in enumerate(group_list):
                words = vocab.group(group)

                def one() -> str:
                    kws = [words[i] for i in rng.integers(len(words), size=keywords_per_text)]
                    return _make_text(rng, kws, vocab.fillers)

                examples += [(t, group_idx) for t in _dedup_texts(one, per_class, seen)]
            splits[split_name] = examples
        return splits

    shared_splits = build_splits(task_groups[0], "shared") if shared_groups else None
    tasks = []
    for t, (labels, perm) in enumerate(zip(task_labels, permutations), start=1):
        if len(labels) != n_classes:
            raise DataError("label set size must match group count")
        name = f"{base_name}-{t}"
        splits = shared_splits if shared_groups else build_splits(task_groups[t - 1], name)
        relabeled = {
            split: [(text, perm[group_idx]) for text, group_idx in examples]
            for split, examples in splits.items()
        }
        _apply_noise(relabeled["train"], len(labels), spec.noise_rate,
                     rng_for(vocab.seed, "noise", name))
        task = Task(name, list(labels), relabeled["train"], relabeled["validation"],
                    relabeled["test"], provenance=f"label-permuted:{vocab.seed}")
        task.validate()
        tasks.append(task)
    return tasks


# ---------------------------------------------------------------------------
# JSONL ingestion


def load_jsonl(path, name: str, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Task:
    """Build a Task from a JSONL file of {"text": ..., "label": ...} lines.

    Labels are the sorted distinct label strings; the split is stratified
    per label with seeded shuffling. Duplicate lines are preserved.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3 or min(ratios) < 0:
        raise DataError("ratios must be three non-negative numbers summing to 1")
    by_label: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str) \
                    or not isinstance(obj.get("label"), str):
                raise DataError(f'{path}:{line_no}: expected string fields "text" and "label"')
            by_label.setdefault(obj["label"], []).append(obj["text"])
    if not by_label:
        raise DataError(f"{path}: no examples found")
    if len(by_label) < 2:
        raise DataError(f"{path}: a single-label task is invalid")
    labels = sorted(by_label)
    label_index = {y: i for i, y in enumerate(labels)}
    splits: dict[str, list[tuple[str, int]]] = {"train": [], "validation": [], "test": []}
    for y in labels:
        texts = list(by_label[y])
        rng_for(seed, "jsonl-split", name, y).shuffle(texts)
        n = len(texts)
        n_val = round(n * ratios[1])
        n_test = round(n * ratios[2])
        n_train = n - n_val - n_test
        if n_train <= 0:
            raise DataError(f"{path}: label {y!r} absent from the train split after stratification")
        idx = label_index[y]
        splits["train"] += [(t, idx) for t in texts[:n_train]]
        splits["validation"] += [(t, idx) for t in texts[n_train : n_train + n_val]]
        splits["test"] += [(t, idx) for t in texts[n_train + n_val :]]
    task = Task(name, labels, splits["train"], splits["validation"], splits["test"],
                provenance=f"jsonl:{path}")
    task.validate(allow_duplicates=True)
    return task


# ---------------------------------------------------------------------------
# episodes


def sample_episode(task: Task, k: int, resample_seed: int) -> Episode:
    """k training examples per class, without replacement; classes with
    fewer than k examples contribute everything and are recorded as
    clamped. The test split passes through unchanged."""
    if not task.train:
        raise DataError(f"task {task.name}: empty train split")
    if k < 1:
        raise DataError("k must be >= 1")
    per_class: dict[int, list[tuple[str, int]]] = {}
    for pair in task.train:
        per_class.setdefault(pair[1], []).append(pair)
    chosen: list[tuple[str, int]] = []
    clamped = []
    for class_idx in sorted(per_class):
        pool = per_class[class_idx]
        take = min(k, len(pool))
        if take < k:
            clamped.append(task.labels[class_idx])
        rng = rng_for(resample_seed, "episode", task.name, k, class_idx)
        chosen += [pool[i] for i in sorted(rng.choice(len(pool), size=take, replace=False))]
    return Episode(
        task_name=task.name, k=k, resample_seed=resample_seed, labels=list(task.labels),
        train=chosen, test=list(task.test), clamped_labels=clamped,
    )


# ---------------------------------------------------------------------------
# benchmark manifests


@dataclass
class Benchmark:
    name: str
    tasks: dict[str, Task]
    upstream: list[str]
    fewshot: list[str]
    stream_defaults: dict
    learner_defaults: dict = field(default_factory=dict)

    def task(self, name: str) -> Task:
        try:
            return self.tasks[name]
        except KeyError:
            raise DataError(f"benchmark {self.name}: unknown task {name!r}") from None


BUILTIN_MANIFESTS = ("clif-s", "clif-interfere")


def load_manifest(source) -> dict:
    """Accept a manifest dict, a path to a manifest JSON file, or the name
    of a shipped benchmark."""
    if isinstance(source, dict):
        return source
    source = str(source)
    if source in BUILTIN_MANIFESTS:
        from importlib import resources

        text = resources.files("clif.manifests").joinpath(f"{source}.json").read_text()
        return json.loads(text)
    try:
        with open(source, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(
            f"manifest {source!r} not found (not a file, not one of {BUILTIN_MANIFESTS})"
        ) from None


def _task_label_words(entry: dict) -> list[str]:
    if entry.get("family") == "label-permuted":
        return [w for labels in entry["task_labels"] for w in labels]
    return list(entry.get("labels", []))


def build_benchmark(source) -> Benchmark:
    """Materialize every task in the manifest deterministically and return
    the ordered upstream stream plus the few-shot task set."""
    manifest = load_manifest(source)
    for key in ("name", "tasks"):
        if key not in manifest:
            raise DataError(f"manifest missing required key {key!r}")
    defaults = dict(manifest.get("defaults", {}))
    vocab = None
    if "vocabulary" in manifest:
        vconf = manifest["vocabulary"]
        reserved = []
        for entry in manifest["tasks"]:
            reserved += _task_label_words(entry)
        vocab = Vocabulary(
            seed=vconf["seed"],
            groups={name: int(size) for name, size in vconf["groups"].items()},
            filler_count=int(vconf.get("filler_count", 48)),
            reserved_labels=tuple(dict.fromkeys(reserved)),
        )

    tasks: dict[str, Task] = {}
    roles: dict[str, str] = {}

    def register(task: Task, role: str) -> None:
        if task.name in tasks:
            raise DataError(f"task name collision: {task.name!r}")
        if role not in ("upstream", "fewshot"):
            raise DataError(f"task {task.name}: role must be upstream or fewshot")
        tasks[task.name] = task
        roles[task.name] = role

    def spec_for(entry: dict, classes: int) -> SyntheticFamilySpec:
        merged = {**defaults, **{k: entry[k] for k in
                                 ("train_per_class", "val_per_class", "test_per_class",
                                  "noise_rate") if k in entry}}
        return SyntheticFamilySpec(
            family=entry["family"], vocab_seed=vocab.seed, classes=classes, **merged
        )

    for entry in manifest["tasks"]:
        family = entry.get("family")
        role = entry.get("role", "upstream")
        if family == "keyword-topic":
            task = make_keyword_topic_task(
                vocab, entry["name"], entry["groups"], entry["labels"],
                spec_for(entry, len(entry["labels"])),
                distractor_groups=entry.get("distractor_groups"),
                keywords_per_text=int(entry.get("keywords_per_text", 2)),
            )
            register(task, role)
        elif family == "composition":
            task = make_composition_task(
                vocab, entry["name"], [tuple(c) for c in entry["cells"]], entry["labels"],
                spec_for(entry, len(entry["labels"])),
                keywords_per_dim=int(entry.get("keywords_per_dim", 2)),
            )
            register(task, role)
        elif family == "label-permuted":
            for task in make_label_permuted_family(
                vocab, entry["base_name"], entry["groups"], entry["task_labels"],
                entry["permutations"], spec_for(entry, len(entry["groups"])),
                keywords_per_text=int(entry.get("keywords_per_text", 2)),
            ):
                register(task, role)
        elif family == "jsonl":
            task = load_jsonl(
                entry["path"], entry["name"],
                ratios=tuple(entry.get("ratios", (0.8, 0.1, 0.1))),
                seed=int(entry.get("seed", 0)),
            )
            register(task, role)
        else:
            raise DataError(f"unknown task family {family!r}")

    upstream = [n for n in tasks if roles[n] == "upstream"]
    fewshot = [n for n in tasks if roles[n] == "fewshot"]
    if not upstream:
        raise DataError("benchmark has no upstream tasks")
    return Benchmark(
        name=manifest["name"],
        tasks=tasks,
        upstream=upstream,
        fewshot=fewshot,
        stream_defaults=dict(manifest.get("stream", {})),
        learner_defaults=dict(manifest.get("learner", {})),
    )
