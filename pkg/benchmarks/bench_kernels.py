"""Compare the compiled and numpy kernel backends on graph-sized workloads.

Run: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from graphteach._accel import pyref

try:
    from graphteach._accel import _fast
except ImportError:
    _fast = None


def bench(fn, *args, repeats=300):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    rng = np.random.default_rng(0)
    # the default teacher graph: 18 patches + 10 text nodes, 684 edges
    edges, nodes, heads, width = 684, 28, 2, 16
    scores = rng.normal(size=(edges, heads))
    seg = np.sort(rng.integers(0, nodes, size=edges)).astype(np.int64)
    grad = rng.normal(size=(edges, heads))
    vals = rng.normal(size=(edges, width))
    idx = rng.integers(0, nodes, size=edges).astype(np.int64)

    cases = [
        ("segment_softmax", lambda m: m.segment_softmax(scores, seg, nodes)),
        ("segment_softmax_backward",
         lambda m: m.segment_softmax_backward(
             pyref.segment_softmax(scores, seg, nodes), grad, seg, nodes)),
        ("segment_sum", lambda m: m.segment_sum(vals, seg, nodes)),
        ("scatter_add_rows",
         lambda m: m.scatter_add_rows(np.zeros((nodes, width)), idx, vals)),
    ]

    print(f"{'kernel':28s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for name, fn in cases:
        t_py = bench(lambda: fn(pyref))
        if _fast is None:
            print(f"{name:28s} {t_py * 1e6:9.1f}us {'n/a':>10s}")
            continue
        t_cy = bench(lambda: fn(_fast))
        print(f"{name:28s} {t_py * 1e6:9.1f}us {t_cy * 1e6:9.1f}us "
              f"{t_py / t_cy:7.1f}x")

    if _fast is not None:
        a = pyref.segment_softmax(scores, seg, nodes)
        b = _fast.segment_softmax(scores, seg, nodes)
        print(f"\nmax |numpy - cython| = {np.abs(a - b).max():.2e}")


if __name__ == "__main__":
    main()
