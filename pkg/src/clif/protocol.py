"""Experiment protocol: sequential stream training with instant/final
evaluation, few-shot evaluation with episode resampling, task ordering,
seed repetition, and the derived metrics.

Accuracies are kept in [0, 1] internally; reports multiply by 100 for
display. Episode draws are keyed by (task, k, resample index) only, so every
algorithm and every seed sees the same episode partitions and comparisons
are paired.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterShape
from .datagen import Benchmark, Task, sample_episode
from .encoder import EncoderConfig, FrozenEncoder
from .learners import Learner, LearnerConfig, build_learner


@dataclass(frozen=True)
class StreamSpec:
    upstream: tuple[str, ...]
    fewshot: tuple[str, ...]
    # default | relevance_increasing | relevance_decreasing | explicit name tuple
    order: str | tuple[str, ...] = "default"
    seeds: tuple[int, ...] = (1, 2, 3)
    resamples: int = 5
    k: int = 16

    def __post_init__(self):
        if set(self.upstream) & set(self.fewshot):
            overlap = sorted(set(self.upstream) & set(self.fewshot))
            raise ValueError(f"upstream and few-shot task sets overlap: {overlap}")
        if len(self.seeds) < 1 or self.resamples < 1 or self.k < 1:
            raise ValueError("seeds, resamples, and k must all be >= 1")
        if not isinstance(self.order, str):
            if sorted(self.order) != sorted(self.upstream):
                raise ValueError("explicit order must be a permutation of the upstream tasks")


def spec_from_benchmark(benchmark: Benchmark, **overrides) -> StreamSpec:
    base = {
        "upstream": tuple(benchmark.upstream),
        "fewshot": tuple(benchmark.fewshot),
        "order": benchmark.stream_defaults.get("order", "default"),
        "resamples": benchmark.stream_defaults.get("resamples", 5),
        "k": benchmark.stream_defaults.get("k", 16),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if "seeds" in base:
        base["seeds"] = tuple(base["seeds"])
    if not isinstance(base["order"], str):
        base["order"] = tuple(base["order"])
    base["upstream"] = tuple(base["upstream"])
    base["fewshot"] = tuple(base["fewshot"])
    return StreamSpec(**base)


class AccuracyMatrix:
    """Lower-triangular accuracy table: row i holds the accuracies of tasks
    1..i measured right after training on task i. The diagonal is the
    instant accuracies; the last row is the final accuracies."""

    def __init__(self, task_names: list[str]):
        self.task_names = list(task_names)
        self.rows: list[list[float]] = []

    def add_row(self, accuracies: list[float]) -> None:
        if len(accuracies) != len(self.rows) + 1:
            raise ValueError(
                f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries, "
                f"got {len(accuracies)}"
            )
        self.rows.append([float(a) for a in accuracies])

    @property
    def complete(self) -> bool:
        return len(self.rows) == len(self.task_names)

    def instant(self) -> list[float]:
        return [row[i] for i, row in enumerate(self.rows)]

    def final(self) -> list[float]:
        return list(self.rows[-1])

    def to_json(self) -> dict:
        return {"tasks": self.task_names, "rows": self.rows}

    @classmethod
    def from_json(cls, obj: dict) -> "AccuracyMatrix":
        m = cls(obj["tasks"])
        for row in obj["rows"]:
            m.add_row(row)
        return m


@dataclass
class MetricsReport:
    instant_acc: float
    final_acc: float
    fewshot_acc: float | None
    forgetting: float
    delta_inst: float | None = None
    delta_fs: float | None = None
    per_task_instant: dict[str, float] = field(default_factory=dict)
    per_task_final: dict[str, float] = field(default_factory=dict)
    per_task_fewshot: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "instant_acc": self.instant_acc,
            "final_acc": self.final_acc,
            "fewshot_acc": self.fewshot_acc,
            "forgetting": self.forgetting,
            "delta_inst": self.delta_inst,
            "delta_fs": self.delta_fs,
            "per_task_instant": self.per_task_instant,
            "per_task_final": self.per_task_final,
            "per_task_fewshot": self.per_task_fewshot,
        }


def relative_improvement(value: float, reference: float) -> float:
    """(s - s') / s', the paper-style relative delta."""
    if reference == 0:
        raise ValueError("reference value must be nonzero")
    return (value - reference) / reference


def aggregate_metrics(
    matrix: AccuracyMatrix,
    fewshot_accuracies: dict[str, list[float]] | None = None,
    baseline: "MetricsReport | None" = None,
) -> MetricsReport:
    """Instant/final/few-shot means, forgetting, and (against a baseline
    report) the relative improvements."""
    if not matrix.complete:
        raise ValueError(
            f"matrix incomplete: {len(matrix.rows)} rows for {len(matrix.task_names)} tasks"
        )
    instant = matrix.instant()
    final = matrix.final()
    per_fs = {
        name: float(np.mean(values)) for name, values in (fewshot_accuracies or {}).items()
    }
    fewshot = float(np.mean(list(per_fs.values()))) if per_fs else None
    s_inst = float(np.mean(instant))
    s_final = float(np.mean(final))
    report = MetricsReport(
        instant_acc=s_inst,
        final_acc=s_final,
        fewshot_acc=fewshot,
        forgetting=s_inst - s_final,
        per_task_instant=dict(zip(matrix.task_names, instant)),
        per_task_final=dict(zip(matrix.task_names, final)),
        per_task_fewshot=per_fs,
    )
    if baseline is not None:
        report.delta_inst = relative_improvement(s_inst, baseline.instant_acc)
        if fewshot is not None and baseline.fewshot_acc is not None:
            report.delta_fs = relative_improvement(fewshot, baseline.fewshot_acc)
    return report


def best_baseline(reports: list[MetricsReport]) -> MetricsReport:
    """Combine baseline reports by taking the better (max) value per metric,
    mirroring the better-of-two baseline rule for delta columns."""
    if not reports:
        raise ValueError("need at least one baseline report")
    fs_values = [r.fewshot_acc for r in reports if r.fewshot_acc is not None]
    return MetricsReport(
        instant_acc=max(r.instant_acc for r in reports),
        final_acc=max(r.final_acc for r in reports),
        fewshot_acc=max(fs_values) if fs_values else None,
        forgetting=0.0,
    )


# ---------------------------------------------------------------------------
# stream execution


def run_stream(learner: Learner, tasks: list[Task]) -> AccuracyMatrix:
    """Train on the ordered tasks, filling matrix row i with test accuracies
    of tasks 1..i after task i. Joint learners (MTL) train once and are then
    measured at every checkpoint with the same final parameters."""
    matrix = AccuracyMatrix([t.name for t in tasks])
    if getattr(learner, "joint_stream", False):
        learner.train_stream(tasks)
        for i in range(len(tasks)):
            matrix.add_row([learner.evaluate(t) for t in tasks[: i + 1]])
        return matrix
    for i, task in enumerate(tasks):
        learner.before_task(task)
        learner.train_task(task)
        learner.after_task(task)
        matrix.add_row([learner.evaluate(t) for t in tasks[: i + 1]])
    return matrix


def evaluate_fewshot(
    learner: Learner,
    tasks: list[Task],
    k: int,
    resamples: int,
) -> dict[str, list[float]]:
    """Per few-shot task, adapt on `resamples` freshly sampled episodes and
    evaluate each on the fixed test split."""
    results: dict[str, list[float]] = {}
    for task in tasks:
        accs = []
        for resample in range(resamples):
            episode = sample_episode(task, k, resample_seed=resample)
            predictor = learner.fewshot_adapt(episode)
            accs.append(predictor.evaluate(episode.test))
        results[task.name] = accs
    return results


@dataclass
class SeedResult:
    seed: int
    matrix: AccuracyMatrix
    fewshot: dict[str, list[float]]
    report: MetricsReport
    curve: list[dict] | None = None


@dataclass
class ExperimentResult:
    spec: StreamSpec
    learner_config: LearnerConfig
    seeds: list[SeedResult]
    mean: dict[str, float | None] = field(default_factory=dict)
    std: dict[str, float | None] = field(default_factory=dict)

    def metric_values(self, name: str) -> list[float]:
        return [getattr(r.report, name) for r in self.seeds]


_METRIC_NAMES = ("instant_acc", "final_acc", "fewshot_acc", "forgetting")


def _aggregate_seeds(results: list[SeedResult]) -> tuple[dict, dict]:
    mean: dict[str, float | None] = {}
    std: dict[str, float | None] = {}
    for name in _METRIC_NAMES:
        values = [getattr(r.report, name) for r in results]
        if any(v is None for v in values):
            mean[name] = None
            std[name] = None
        else:
            mean[name] = float(np.mean(values))
            std[name] = float(np.std(values))  # population std across seeds
    return mean, std


def run_seed(
    benchmark: Benchmark,
    learner_config: LearnerConfig,
    spec: StreamSpec,
    seed: int,
    encoder_config: EncoderConfig = EncoderConfig(),
    fewshot_curve: bool = False,
) -> SeedResult:
    """One full pipeline pass: stream training, per-row evaluation, few-shot
    evaluation, metrics."""
    encoder = FrozenEncoder(encoder_config)
    shape = AdapterShape(dim=encoder_config.dim, num_layers=encoder_config.num_layers)
    learner = build_learner(learner_config, encoder, shape, seed)
    upstream = [benchmark.task(name) for name in order_upstream(benchmark, learner_config, spec, encoder_config)]
    fewshot_tasks = [benchmark.task(name) for name in spec.fewshot]

    matrix = AccuracyMatrix([t.name for t in upstream])
    curve: list[dict] | None = [] if fewshot_curve else None
    if getattr(learner, "joint_stream", False):
        learner.train_stream(upstream)
        for i in range(len(upstream)):
            matrix.add_row([learner.evaluate(t) for t in upstream[: i + 1]])
        if curve is not None:
            point = evaluate_fewshot(learner, fewshot_tasks, spec.k, spec.resamples)
            curve.append(_curve_point(upstream[-1].name, point))
    else:
        for i, task in enumerate(upstream):
            learner.before_task(task)
            learner.train_task(task)
            learner.after_task(task)
            matrix.add_row([learner.evaluate(t) for t in upstream[: i + 1]])
            if curve is not None:
                point = evaluate_fewshot(learner, fewshot_tasks, spec.k, spec.resamples)
                curve.append(_curve_point(task.name, point))

    fewshot = evaluate_fewshot(learner, fewshot_tasks, spec.k, spec.resamples)
    report = aggregate_metrics(matrix, fewshot)
    return SeedResult(seed=seed, matrix=matrix, fewshot=fewshot, report=report, curve=curve)


def _curve_point(after_task: str, fewshot: dict[str, list[float]]) -> dict:
    per_task = {name: float(np.mean(vals)) for name, vals in fewshot.items()}
    overall = float(np.mean(list(per_task.values()))) if per_task else None
    return {"after_task": after_task, "fewshot_acc": overall, "per_task": per_task}


def _run_seed_args(args) -> SeedResult:
    return run_seed(*args)


def run_experiment(
    benchmark: Benchmark,
    learner_config: LearnerConfig,
    spec: StreamSpec,
    encoder_config: EncoderConfig = EncoderConfig(),
    fewshot_curve: bool = False,
    parallel: int = 0,
) -> ExperimentResult:
    """Repeat the pipeline over spec.seeds and aggregate mean and population
    standard deviation per metric. With parallel > 1, seeds run in worker
    processes; results are identical to sequential execution."""
    job_args = [
        (benchmark, learner_config, spec, seed, encoder_config, fewshot_curve)
        for seed in spec.seeds
    ]
    if parallel and parallel > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(parallel, len(spec.seeds))) as pool:
            results = list(pool.map(_run_seed_args, job_args))
    else:
        results = [_run_seed_args(args) for args in job_args]
    mean, std = _aggregate_seeds(results)
    return ExperimentResult(
        spec=spec, learner_config=learner_config, seeds=results, mean=mean, std=std
    )


# ---------------------------------------------------------------------------
# task ordering


def relevance_scores(
    benchmark: Benchmark,
    learner_config: LearnerConfig,
    spec: StreamSpec,
    encoder_config: EncoderConfig = EncoderConfig(),
    seed: int | None = None,
) -> dict[str, float]:
    """Single-task transfer relevance: train a fresh learner on one upstream
    task alone and measure mean few-shot accuracy from it."""
    seed = spec.seeds[0] if seed is None else seed
    fewshot_tasks = [benchmark.task(name) for name in spec.fewshot]
    scores = {}
    for name in spec.upstream:
        encoder = FrozenEncoder(encoder_config)
        shape = AdapterShape(dim=encoder_config.dim, num_layers=encoder_config.num_layers)
        learner = build_learner(learner_config, encoder, shape, seed)
        learner.train_stream([benchmark.task(name)])
        fewshot = evaluate_fewshot(learner, fewshot_tasks, spec.k, spec.resamples)
        per_task = [float(np.mean(vals)) for vals in fewshot.values()]
        scores[name] = float(np.mean(per_task)) if per_task else 0.0
    return scores


def relevance_order(upstream: list[str], scores: dict[str, float], increasing: bool) -> list[str]:
    """Sort upstream tasks by relevance; ties break by task name."""
    return sorted(upstream, key=lambda n: (scores[n], n), reverse=not increasing)


def order_upstream(
    benchmark: Benchmark,
    learner_config: LearnerConfig,
    spec: StreamSpec,
    encoder_config: EncoderConfig = EncoderConfig(),
) -> list[str]:
    upstream = list(spec.upstream)
    if not isinstance(spec.order, str):
        return list(spec.order)
    if spec.order == "default":
        return upstream
    if spec.order in ("relevance_increasing", "relevance_decreasing"):
        scores = relevance_scores(benchmark, learner_config, spec, encoder_config)
        return relevance_order(upstream, scores, increasing=spec.order == "relevance_increasing")
    raise ValueError(f"unknown order tag {spec.order!r}")
