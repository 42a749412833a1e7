"""Compiled vs numpy kernels on workloads shaped like real training and extraction.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Prints the best wall time per kernel and backend, and the speedup.
"""
import argparse
import importlib
import time

import numpy as np

from malpipe import _pykernels, gbdt, kernels


def best_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def workloads(rng):
    n, f, nb = 20_000, 200, 255
    binned = rng.integers(0, nb, (f, n)).astype(np.uint8)
    rows = np.sort(rng.choice(n, n // 2, replace=False)).astype(np.intp)
    g, h = rng.normal(size=n), rng.uniform(0.05, 0.25, n)
    feats = np.arange(f, dtype=np.intp)
    n_bins = np.full(f, nb, dtype=np.intp)

    hist = np.zeros((f, nb, 3))
    hist[..., 0] = rng.normal(size=(f, nb))
    hist[..., 1] = rng.uniform(0, 2, (f, nb))
    hist[..., 2] = rng.integers(0, 40, (f, nb))

    # a depth-8 complete tree
    nodes = 2 ** 9 - 1
    internal = np.arange(nodes) < 2 ** 8 - 1
    feature = np.where(internal, rng.integers(0, f, nodes), -1).astype(np.intp)
    left = np.where(internal, 2 * np.arange(nodes) + 1, -1).astype(np.intp)
    right = np.where(internal, 2 * np.arange(nodes) + 2, -1).astype(np.intp)
    thr_bin = rng.integers(0, nb, nodes).astype(np.intp)
    thr_val = rng.normal(size=nodes)
    value = rng.normal(size=nodes)
    X = rng.normal(size=(n, f))

    data = rng.integers(0, 256, 2_000_000, dtype=np.uint8).tobytes()
    return {
        "build_histogram": lambda m: m.build_histogram(binned, rows, g, h, feats, nb),
        "find_best_split": lambda m: m.find_best_split(hist, n_bins, 1.0, 20.0),
        "predict_raw": lambda m: m.predict_raw(feature, thr_val, left, right, value, X),
        "predict_binned": lambda m: m.predict_binned(feature, thr_bin, left, right, value, binned),
        "byte_entropy_counts": lambda m: m.byte_entropy_counts(data, 2048, 1024),
    }


def end_to_end(repeat):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5000, 50))
    y = (X[:, :5].sum(1) > 0).astype(int)
    params = gbdt.TrainParams(iterations=30)
    names = ("build_histogram", "find_best_split", "predict_raw", "predict_binned")
    out = {}
    for label in ("python", "cython"):
        if label == "cython" and kernels.BACKEND != "cython":
            continue
        saved = {k: getattr(kernels, k) for k in names}
        if label == "python":
            for k in names:
                setattr(kernels, k, getattr(_pykernels, k))
        try:
            out[label] = best_time(lambda: gbdt.train(X, y, gbdt.BINARY, params), repeat)
        finally:
            for k, v in saved.items():
                setattr(kernels, k, v)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true", help="also time a 30-tree training run")
    args = ap.parse_args()
    try:
        compiled = importlib.import_module("malpipe._ckernels")
    except ImportError:
        compiled = None
        print("compiled extension not built; timing the numpy kernels only")

    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}")
    for name, run in workloads(rng).items():
        tp = best_time(lambda: run(_pykernels), args.repeat)
        if compiled is None:
            print(f"{name:22s} {tp:10.4f} {'-':>10s} {'-':>8s}")
            continue
        tc = best_time(lambda: run(compiled), args.repeat)
        print(f"{name:22s} {tp:10.4f} {tc:10.4f} {tp / tc:7.1f}x")
    if args.end_to_end:
        t = end_to_end(max(1, args.repeat // 2))
        line = "  ".join(f"{k} {v:.2f} s" for k, v in t.items())
        print(f"training 5000x50, 30 trees: {line}")


if __name__ == "__main__":
    main()
