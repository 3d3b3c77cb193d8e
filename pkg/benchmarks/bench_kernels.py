"""Micro-benchmark: compiled kernels vs the numpy fallback.

Runs each kernel on training-realistic shapes (the hypernetwork output layer
dominates, ~210k parameters) and prints per-call times and speedups.

    python3 benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from clif._kernels import pykernels

try:
    from clif._kernels import _core
except ImportError:
    _core = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_adam(impl, n, repeats):
    rng = np.random.default_rng(0)
    p = rng.normal(size=n)
    g = rng.normal(size=n)
    m = np.zeros(n)
    v = np.zeros(n)
    return timeit(lambda: impl.adam_update(p, g, m, v, 5, 1e-2, 0.9, 0.999, 1e-8), repeats)


def bench_tanh_grad(impl, shape, repeats):
    rng = np.random.default_rng(1)
    y = np.tanh(rng.normal(size=shape))
    g = rng.normal(size=shape)
    return timeit(lambda: impl.tanh_grad(y, g), repeats)


def bench_sq_dist(impl, n, repeats):
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=n), rng.normal(size=n)
    return timeit(lambda: impl.squared_distance(a, b), repeats)


def bench_softmax(impl, shape, repeats):
    rng = np.random.default_rng(3)
    scores = rng.normal(size=shape)
    targets = rng.integers(0, shape[1], size=shape[0])
    return timeit(lambda: impl.softmax_xent(scores, targets), repeats)


CASES = [
    ("adam_update 6.4k (adapter vector)", bench_adam, 6_384),
    ("adam_update 210k (hypernet output)", bench_adam, 210_672),
    ("tanh_grad 32x64 (batch activations)", bench_tanh_grad, (32, 64)),
    ("squared_distance 6.4k (drift penalty)", bench_sq_dist, 6_384),
    ("softmax_xent 32x4 (batch loss)", bench_softmax, (32, 4)),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    if _core is None:
        print("compiled backend not built (python setup.py build_ext --inplace); "
              "showing numpy fallback only\n")

    header = f"{'kernel':42s} {'python':>12s} {'compiled':>12s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, fn, arg in CASES:
        t_py = fn(pykernels, arg, args.repeats)
        if _core is not None:
            t_c = fn(_core, arg, args.repeats)
            print(f"{name:42s} {t_py * 1e6:10.1f}us {t_c * 1e6:10.1f}us {t_py / t_c:7.1f}x")
        else:
            print(f"{name:42s} {t_py * 1e6:10.1f}us {'-':>12s} {'-':>8s}")


if __name__ == "__main__":
    main()
