"""Time the numpy and numba variants of every hot kernel.

    python benchmarks/bench_kernels.py [--repeat 7] [--end-to-end]

Kernel timings run both variants in one process (numba compile time is
excluded by a warm-up call). ``--end-to-end`` also times one small training
run in two subprocesses, with and without TRACEGRAPH_DISABLE_NUMBA; the
numba side then includes loading the cached compiled kernels.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tracegraph import kernels


def cases(rng):
    for n_spans in (1_000, 100_000):
        codes = rng.integers(0, 30, size=n_spans)
        durations = rng.lognormal(8, 1, size=n_spans).astype(np.int64)
        yield f"group_latency_stats n={n_spans}", "group_latency_stats", (codes, durations, 30)
    for n_edges in (50, 5_000):
        index = rng.integers(0, 30, size=n_edges)
        values = rng.normal(size=(n_edges, 16))
        yield f"scatter_add_rows e={n_edges}", "scatter_add_rows", (index, values, 30)
    for n in (30, 3_000):
        x = rng.normal(size=(n, 32))
        gain, bias = np.ones((1, 32)), np.zeros((1, 32))
        yield f"layer_norm_forward n={n}", "layer_norm_forward", (x, gain, bias, 1e-5)
        _, xhat, inv_std, floored = kernels.layer_norm_forward_np(x, gain, bias, 1e-5)
        dy = rng.normal(size=x.shape)
        yield f"layer_norm_backward n={n}", "layer_norm_backward", (dy, xhat, inv_std, floored, gain)
    for n in (200, 100_000):
        yield f"average_ranks n={n}", "average_ranks", (rng.integers(0, n // 4, size=n).astype(float),)


def best_of(fn, args, repeat):
    t = timeit.Timer(lambda: fn(*args))
    number, _ = t.autorange()
    return min(t.repeat(repeat=repeat, number=number)) / number


def run_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':34s} {'numpy (us)':>12s} {'numba (us)':>12s} {'speedup':>8s}")
    for label, name, args in cases(rng):
        f_np = getattr(kernels, f"{name}_np")
        f_nb = getattr(kernels, f"{name}_nb")
        f_nb(*args)  # compile
        t_np = best_of(f_np, args, repeat)
        t_nb = best_of(f_nb, args, repeat)
        print(f"{label:34s} {t_np * 1e6:12.1f} {t_nb * 1e6:12.1f} {t_np / t_nb:8.2f}")


_E2E = """
import time
from tracegraph.detector import TrainConfig
from tracegraph.evaluation import BenchmarkSpec, make_corpus, prepare_graphs, fit_detector
spec = BenchmarkSpec(n_services=15, n_train=20, n_val=3, n_test=5, rate=100.0, train=TrainConfig(20, 0.1))
t0 = time.perf_counter()
corpus = make_corpus(spec, 0)
graphs, _ = prepare_graphs(spec, corpus.spans)
t1 = time.perf_counter()
fitted = fit_detector(spec, graphs, spec.train)
t2 = time.perf_counter()
print(f"{t1 - t0:.3f} {t2 - t1:.3f} {fitted.threshold!r}")
"""


def run_end_to_end():
    print()
    print(f"{'end-to-end':34s} {'corpus+graphs (s)':>18s} {'train (s)':>10s}")
    thresholds = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, TRACEGRAPH_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True, check=True)
        prep, fit, thr = out.stdout.split()
        thresholds[label] = thr
        print(f"{label:34s} {float(prep):18.3f} {float(fit):10.3f}")
    a, b = float(thresholds["numba"]), float(thresholds["numpy"])
    # backends sum in different orders, so agreement is to rounding, not bitwise
    print(f"threshold relative difference across backends: {abs(a - b) / abs(b):.1e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    run_kernels(args.repeat)
    if args.end_to_end:
        run_end_to_end()


if __name__ == "__main__":
    main()
