"""Time the compiled core against the numpy fallback on the two hot paths:
batch local fits and the Lepski candidate scan.

    python3 benchmarks/bench_backends.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from lpsactive import _backend
from lpsactive.lepski import adaptive_grid, grid_constants, lepski_select_many
from lpsactive.lps import Dataset, LpsModel, fit_many, unit_box

CASES = [(1, 1, 8192, 512), (3, 1, 8192, 512), (1, 2, 4096, 1024), (3, 2, 4096, 1024)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if "compiled" not in _backend.available():
        print("compiled core not built; only the fallback is available")
    print(f"{'task':<8}{'Q':>3}{'d':>3}{'n':>7}{'queries':>9}"
          f"{'compiled s':>12}{'python s':>11}{'speedup':>9}")
    for Q, d, n, k in CASES:
        rng = np.random.default_rng(0)
        X = rng.random((n, d))
        data = Dataset(X, np.sin(4 * X.sum(axis=1)) + 0.1 * rng.standard_normal(n), unit_box(d))
        queries = rng.random((k, d))
        C_sigma, C_s = grid_constants(n, Q, d, 0.02, 2 ** (2 / 3))
        grid = adaptive_grid(n, Q, d, C_sigma, C_s, np.sqrt(d))
        tasks = {
            "fit": lambda m: fit_many(queries, 0.08, data, m, strict=False),
            "lepski": lambda m: lepski_select_many(queries, data, 0.01, grid, 1.96, m,
                                                   strict=False),
        }
        for name, task in tasks.items():
            row = {}
            for backend in _backend.available():
                model = LpsModel(Q=Q, backend=backend)
                row[backend] = best_of(lambda: task(model), args.repeat)
            comp = row.get("compiled", float("nan"))
            py = row["python"]
            print(f"{name:<8}{Q:>3}{d:>3}{n:>7}{k:>9}{comp:>12.3f}{py:>11.3f}{py / comp:>9.1f}")


if __name__ == "__main__":
    main()
