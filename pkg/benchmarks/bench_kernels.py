"""Time each kernel on the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Sizes mirror one evaluation chunk (beam 100, cap 50) and one pretraining batch.
"""

import argparse
import time

import numpy as np

from fitcarl import kernels


def cases(rng):
    d = 100
    W = rng.normal(size=(2 * d, d, 2 * d))
    yield "tucker_mode12", kernels.tucker_mode12, (W, rng.normal(size=(64, 2 * d)), rng.normal(size=(64, d)))
    dt = rng.integers(-300, 300, 200_000)
    yield "time_scores", kernels.time_scores, (dt, rng.normal(size=d), rng.uniform(0, 1, d), rng.normal(size=d))
    lengths = rng.integers(0, 400, 2000)
    ptr = np.concatenate([[0], np.cumsum(lengths)])
    yield "segment_topk", kernels.segment_topk, (ptr, rng.random(ptr[-1]), 50)
    n_ent = 20_000
    cptr = np.concatenate([[0], np.cumsum(rng.integers(0, 4, n_ent))])
    yield "concept_counts", kernels.concept_counts, (rng.integers(0, 500, 400_000), rng.integers(0, n_ent, 400_000),
                                                       cptr, rng.integers(0, 300, cptr[-1]), 500, 300)
    E, R = rng.normal(size=(n_ent, d)) * 0.1, rng.normal(size=(500, d)) * 0.1
    b = 1024 * 11
    yield "complex_bce", kernels.complex_bce, (E, R, rng.integers(0, n_ent, b), rng.integers(0, 500, b),
                                               rng.integers(0, n_ent, b), (rng.random(b) < 0.1).astype(float))


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if kernels.NUMBA_AVAILABLE else [])
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn, fargs in cases(np.random.default_rng(0)):
        row = []
        for b in backends:
            kernels.set_backend(b)
            fn(*fargs)  # warm-up, includes JIT compile
            row.append(best_of(fn, fargs, args.repeat))
        line = f"{name:<16}" + "".join(f"{t * 1e3:>10.2f}ms" for t in row)
        if len(row) == 2:
            line += f"{row[0] / row[1]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
