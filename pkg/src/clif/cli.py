"""Command-line tool: configure, run, and report experiments.

Commands:
  run        execute a run config (JSON) over its seeds, write record + CSV
  report     comparison table over one or more records, optional baselines
  curves     plot-ready CSV series from record curve data / k-series
  baselines  run the single-task reference algorithms for a benchmark

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Environment: CLIF_OUT_ROOT overrides the output root directory.

Run config schema (JSON object; unknown keys are rejected):
  run_id      string, unique within the output root        (required)
  benchmark   manifest path or builtin name                (required)
  algorithm   learner algorithm tag                        (required)
  seeds       list of ints            (default [1, 2, 3])
  out_dir     output root             (default "runs"; env/--out override)
  learner     LearnerConfig overrides (merged over manifest suggestions)
  stream      StreamSpec overrides: order, k, resamples
  encoder     EncoderConfig overrides: hash_buckets, dim, num_layers,
              encoder_seed
  fewshot_curve  bool: evaluate few-shot after every upstream task
  parallel    int: seed worker processes (default sequential)
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .bihnet import RegConfig
from .datagen import Benchmark, DataError, build_benchmark
from .encoder import EncoderConfig
from .learners import ALGORITHMS, LearnerConfig
from .protocol import (
    ExperimentResult,
    MetricsReport,
    best_baseline,
    run_experiment,
    spec_from_benchmark,
)


class ConfigError(ValueError):
    pass


METRICS_CSV_HEADER = [
    "run_id", "benchmark", "algorithm", "seeds", "k",
    "final_acc_mean", "final_acc_std",
    "instant_acc_mean", "instant_acc_std",
    "fewshot_acc_mean", "fewshot_acc_std",
    "forgetting_mean", "forgetting_std",
]

REPORT_HEADER = [
    "run_id", "algorithm", "final_acc", "instant_acc", "fewshot_acc",
    "delta_inst", "delta_fs",
]

_RUN_KEYS = {
    "run_id", "benchmark", "algorithm", "seeds", "out_dir", "learner",
    "stream", "encoder", "fewshot_curve", "parallel",
}
_STREAM_KEYS = {"order", "k", "resamples"}
_ENCODER_KEYS = {"hash_buckets", "dim", "num_layers", "encoder_seed"}


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def _fmt_pct(x: float | None) -> str:
    """Accuracy in [0,1] -> percentage with two decimals."""
    return "" if x is None else f"{100 * x:.2f}"


def _fmt_delta(x: float | None) -> str:
    return "" if x is None else f"{100 * x:+.1f}%"


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_run_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            config = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(config) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("run_id", "benchmark", "algorithm"):
        if key not in config:
            raise ConfigError(f"config missing required key {key!r}")
    if config["algorithm"] not in ALGORITHMS:
        raise ConfigError(
            f"unknown algorithm {config['algorithm']!r}; expected one of {sorted(ALGORITHMS)}"
        )
    for key, allowed in (("stream", _STREAM_KEYS), ("encoder", _ENCODER_KEYS)):
        extra = set(config.get(key, {})) - allowed
        if extra:
            raise ConfigError(f"unknown {key} override keys: {sorted(extra)}")
    learner_keys = set(LearnerConfig.__dataclass_fields__) - {"algorithm"}
    extra = set(config.get("learner", {})) - learner_keys
    if extra:
        raise ConfigError(f"unknown learner override keys: {sorted(extra)}")
    return config


def build_learner_config(algorithm: str, benchmark: Benchmark, overrides: dict) -> LearnerConfig:
    merged = {**benchmark.learner_defaults, **(overrides or {})}
    if "reg" in merged and isinstance(merged["reg"], dict):
        merged["reg"] = RegConfig(**merged["reg"])
    return LearnerConfig(algorithm=algorithm, **merged)


def out_root(config: dict, cli_out: str | None) -> Path:
    if cli_out:
        return Path(cli_out)
    env = os.environ.get("CLIF_OUT_ROOT")
    if env:
        return Path(env)
    return Path(config.get("out_dir", "runs"))


def execute_run(config: dict, cli_out: str | None = None,
                cli_seeds: list[int] | None = None,
                cli_parallel: int | None = None) -> Path:
    benchmark = build_benchmark(config["benchmark"])
    learner_config = build_learner_config(config["algorithm"], benchmark,
                                          config.get("learner", {}))
    seeds = tuple(cli_seeds or config.get("seeds", [1, 2, 3]))
    stream_over = dict(config.get("stream", {}))
    spec = spec_from_benchmark(benchmark, seeds=seeds, **stream_over)
    encoder_config = EncoderConfig(**config.get("encoder", {}))
    parallel = cli_parallel if cli_parallel is not None else int(config.get("parallel", 0))

    run_dir = out_root(config, cli_out) / config["run_id"]
    existing = run_dir / "record.json"
    if existing.exists():
        canonical = {k: config[k] for k in sorted(config)}
        try:
            previous = json.loads(existing.read_text())["config_hash"]
        except (json.JSONDecodeError, KeyError):
            previous = None
        if previous != config_hash(canonical):
            raise ConfigError(
                f"run id {config['run_id']!r} already exists in {run_dir.parent} "
                "with a different config; pick a new run id or output root"
            )

    started = time.time()
    result = run_experiment(
        benchmark, learner_config, spec,
        encoder_config=encoder_config,
        fewshot_curve=bool(config.get("fewshot_curve", False)),
        parallel=parallel,
    )
    wall = time.time() - started

    run_dir.mkdir(parents=True, exist_ok=True)
    record = make_record(config, benchmark, result, wall)
    with open(run_dir / "record.json", "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(run_dir / "metrics.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_CSV_HEADER)
        writer.writerow(metrics_csv_row(record))
    return run_dir


def make_record(config: dict, benchmark: Benchmark, result: ExperimentResult,
                wall_clock: float) -> dict:
    canonical_config = {k: config[k] for k in sorted(config)}
    return {
        "config": canonical_config,
        "config_hash": config_hash(canonical_config),
        "engine_version": __version__,
        "benchmark": benchmark.name,
        "algorithm": result.learner_config.algorithm,
        "stream": {
            "upstream": list(result.spec.upstream),
            "fewshot": list(result.spec.fewshot),
            "order": list(result.spec.order) if not isinstance(result.spec.order, str)
                     else result.spec.order,
            "k": result.spec.k,
            "resamples": result.spec.resamples,
            "seeds": list(result.spec.seeds),
        },
        "learner_config": _jsonable(asdict(result.learner_config)),
        "metrics": {
            "mean": result.mean,
            "std": result.std,
            "std_kind": "population",
        },
        "per_seed": [
            {
                "seed": r.seed,
                "matrix": r.matrix.to_json(),
                "fewshot": r.fewshot,
                "report": r.report.to_json(),
                "curve": r.curve,
            }
            for r in result.seeds
        ],
        "wall_clock_sec": round(wall_clock, 3),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def metrics_csv_row(record: dict) -> list[str]:
    mean, std = record["metrics"]["mean"], record["metrics"]["std"]
    return [
        record["config"]["run_id"],
        record["benchmark"],
        record["algorithm"],
        ";".join(str(s) for s in record["stream"]["seeds"]),
        str(record["stream"]["k"]),
        _fmt(mean["final_acc"]), _fmt(std["final_acc"]),
        _fmt(mean["instant_acc"]), _fmt(std["instant_acc"]),
        _fmt(mean["fewshot_acc"]), _fmt(std["fewshot_acc"]),
        _fmt(mean["forgetting"]), _fmt(std["forgetting"]),
    ]


# ---------------------------------------------------------------------------
# report / curves


def _record_report(record: dict) -> MetricsReport:
    mean = record["metrics"]["mean"]
    return MetricsReport(
        instant_acc=mean["instant_acc"],
        final_acc=mean["final_acc"],
        fewshot_acc=mean["fewshot_acc"],
        forgetting=mean["forgetting"] if mean["forgetting"] is not None else 0.0,
    )


def load_record(path: str) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "record.json"
    try:
        with open(p, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"record not found: {p}") from None


def build_report_rows(records: list[dict], baselines: list[dict]) -> list[dict]:
    reference = best_baseline([_record_report(b) for b in baselines]) if baselines else None
    rows = []
    for record in records:
        mean, std = record["metrics"]["mean"], record["metrics"]["std"]
        delta_inst = delta_fs = None
        if reference is not None and mean["instant_acc"] is not None:
            delta_inst = (mean["instant_acc"] - reference.instant_acc) / reference.instant_acc
        if (reference is not None and mean["fewshot_acc"] is not None
                and reference.fewshot_acc is not None):
            delta_fs = (mean["fewshot_acc"] - reference.fewshot_acc) / reference.fewshot_acc
        rows.append({
            "run_id": record["config"]["run_id"],
            "algorithm": record["algorithm"],
            "final_acc": _maybe_pm(mean["final_acc"], std["final_acc"]),
            "instant_acc": _maybe_pm(mean["instant_acc"], std["instant_acc"]),
            "fewshot_acc": _maybe_pm(mean["fewshot_acc"], std["fewshot_acc"]),
            "delta_inst": _fmt_delta(delta_inst),
            "delta_fs": _fmt_delta(delta_fs),
        })
    return rows


def _maybe_pm(mean: float | None, std: float | None) -> str:
    if mean is None:
        return ""
    return f"{100 * mean:.2f}±{100 * (std or 0.0):.2f}"


def render_table(rows: list[dict]) -> str:
    widths = {key: max(len(key), *(len(r[key]) for r in rows)) for key in REPORT_HEADER}
    lines = ["  ".join(key.ljust(widths[key]) for key in REPORT_HEADER)]
    for r in rows:
        lines.append("  ".join(r[key].ljust(widths[key]) for key in REPORT_HEADER))
    return "\n".join(lines)


def cmd_report(record_paths: list[str], baseline_paths: list[str],
               csv_out: str | None) -> str:
    records = [load_record(p) for p in record_paths]
    baselines = [load_record(p) for p in baseline_paths]
    if not baselines:
        print("warning: no --baseline records given; delta columns left empty",
              file=sys.stderr)
    rows = build_report_rows(records, baselines)
    table = render_table(rows)
    if csv_out:
        with open(csv_out, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=REPORT_HEADER)
            writer.writeheader()
            writer.writerows(rows)
    return table


def cmd_curves(record_paths: list[str], out_path: str | None) -> str:
    """Emit (upstream_index, mean fewshot acc, std) rows; with multiple
    records, also a (k, fewshot acc) series sorted by k."""
    records = [load_record(p) for p in record_paths]
    out = io.StringIO()
    writer = csv.writer(out)
    primary = records[0]
    per_seed_curves = [s.get("curve") for s in primary["per_seed"]]
    if any(c is None for c in per_seed_curves):
        raise ConfigError(
            "record has no few-shot curve data; rerun with \"fewshot_curve\": true"
        )
    writer.writerow(["upstream_index", "after_task", "fewshot_acc_mean", "fewshot_acc_std"])
    for i in range(len(per_seed_curves[0])):
        vals = [c[i]["fewshot_acc"] for c in per_seed_curves]
        writer.writerow([
            i + 1,
            per_seed_curves[0][i]["after_task"],
            _fmt(float(np.mean(vals))),
            _fmt(float(np.std(vals))),
        ])
    if len(records) > 1:
        writer.writerow([])
        writer.writerow(["k", "fewshot_acc_mean", "fewshot_acc_std"])
        series = sorted(
            (r["stream"]["k"], r["metrics"]["mean"]["fewshot_acc"],
             r["metrics"]["std"]["fewshot_acc"])
            for r in records
        )
        for k, mean, std in series:
            writer.writerow([k, _fmt(mean), _fmt(std)])
    text = out.getvalue()
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text


BASELINE_ALGORITHMS = ("adapter-single", "bihnet-single", "majority")


def cmd_baselines(benchmark_source: str, out: str | None, seeds: list[int] | None,
                  parallel: int | None) -> list[Path]:
    """Run the zero-knowledge reference algorithms used as delta baselines."""
    benchmark = build_benchmark(benchmark_source)
    paths = []
    for algorithm in BASELINE_ALGORITHMS:
        config = {
            "run_id": f"baseline-{algorithm}-{benchmark.name}",
            "benchmark": benchmark_source,
            "algorithm": algorithm,
        }
        paths.append(execute_run(config, cli_out=out, cli_seeds=seeds,
                                 cli_parallel=parallel))
    return paths


# ---------------------------------------------------------------------------
# argument parsing


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated int list, got {text!r}") from None


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clif",
        description="continual few-shot learning benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a run config")
    p_run.add_argument("--config", required=True, help="run config JSON path")
    p_run.add_argument("--out", help="output root directory")
    p_run.add_argument("--seeds", help='comma-separated seed list, e.g. "1,2,3"')
    p_run.add_argument("--parallel", type=int, help="seed worker processes")

    p_rep = sub.add_parser("report", help="comparison table from records")
    p_rep.add_argument("records", nargs="+", help="record.json paths or run dirs")
    p_rep.add_argument("--baseline", action="append", default=[],
                       help="baseline record (repeatable; best one is used)")
    p_rep.add_argument("--csv", help="also write the table as CSV")

    p_cur = sub.add_parser("curves", help="plot-ready CSV series from records")
    p_cur.add_argument("records", nargs="+", help="record.json paths or run dirs")
    p_cur.add_argument("--out", help="write CSV here instead of stdout")

    p_base = sub.add_parser("baselines", help="run single-task reference baselines")
    p_base.add_argument("--benchmark", required=True, help="manifest path or builtin name")
    p_base.add_argument("--out", help="output root directory")
    p_base.add_argument("--seeds", help="comma-separated seed list")
    p_base.add_argument("--parallel", type=int, help="seed worker processes")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = load_run_config(args.config)
            seeds = _parse_seeds(args.seeds) if args.seeds else None
            run_dir = execute_run(config, cli_out=args.out, cli_seeds=seeds,
                                  cli_parallel=args.parallel)
            print(f"wrote {run_dir / 'record.json'} and {run_dir / 'metrics.csv'}")
        elif args.command == "report":
            print(cmd_report(args.records, args.baseline, args.csv))
        elif args.command == "curves":
            text = cmd_curves(args.records, args.out)
            if args.out:
                print(f"wrote {args.out}")
            else:
                print(text, end="")
        elif args.command == "baselines":
            seeds = _parse_seeds(args.seeds) if args.seeds else None
            for path in cmd_baselines(args.benchmark, args.out, seeds, args.parallel):
                print(f"wrote {path / 'record.json'}")
    except (ConfigError, DataError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
