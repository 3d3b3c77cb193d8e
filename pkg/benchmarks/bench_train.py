"""End-to-end backend comparison: time a short hypernetwork training run
under each kernel backend.

The backend is fixed at import, so this script re-invokes itself in a
subprocess per backend with CLIF_KERNELS set.

    python3 benchmarks/bench_train.py [--steps 300]
"""

import argparse
import os
import subprocess
import sys
import time


def run_workload(steps: int) -> float:
    from clif.adapters import AdapterShape
    from clif.datagen import build_benchmark
    from clif.encoder import EncoderConfig, FrozenEncoder
    from clif.learners import LearnerConfig, build_learner

    bench = build_benchmark("clif-interfere")
    task = bench.task("permuted-1")
    encoder_config = EncoderConfig()
    shape = AdapterShape(dim=encoder_config.dim, num_layers=encoder_config.num_layers)
    epochs = max(1, steps // (len(task.train) // 32))
    config = LearnerConfig(algorithm="bihnet-reg", learning_rate=1e-2,
                           max_epochs=epochs, patience=epochs)
    learner = build_learner(config, FrozenEncoder(encoder_config), shape, seed=1)
    learner.before_task(task)
    started = time.perf_counter()
    learner.train_task(task)
    return time.perf_counter() - started


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--backend", help=argparse.SUPPRESS)  # subprocess marker
    args = parser.parse_args()

    if args.backend:
        import clif._kernels as kernels

        assert kernels.BACKEND == args.backend, f"wanted {args.backend}, got {kernels.BACKEND}"
        print(f"{run_workload(args.steps):.3f}")
        return

    times = {}
    for backend in ("python", "compiled"):
        env = dict(os.environ, CLIF_KERNELS=backend)
        proc = subprocess.run(
            [sys.executable, __file__, "--steps", str(args.steps), "--backend", backend],
            capture_output=True, text=True, env=env,
        )
        if proc.returncode != 0:
            print(f"{backend:>9s}: unavailable ({proc.stderr.strip().splitlines()[-1]})")
            continue
        times[backend] = float(proc.stdout.strip())
        print(f"{backend:>9s}: {times[backend]:.3f}s for ~{args.steps} training steps")
    if len(times) == 2:
        print(f"  speedup: {times['python'] / times['compiled']:.2f}x")


if __name__ == "__main__":
    main()
