"""Time the compiled and numpy kernel backends on DEC-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per (kernel, backend, shape) with the median wall time and the
speedup of the compiled backend over the fallback.
"""
import argparse
import time

import numpy as np

from metagraphloc import kernels

SHAPES = [(8, 30, 64, 15), (32, 30, 64, 15), (32, 120, 128, 15)]  # (batch, nodes, channels, k)


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<10} {'B,M,C,k':<18} " + " ".join(f"{n:>10}" for n in impls) + "   speedup")
    rng = np.random.default_rng(0)
    for b, m, c, k in SHAPES:
        p, q, g = (rng.normal(size=(b, m, c)) for _ in range(3))
        idx = np.sort(impls["python"].knn_indices(p, k), axis=-1)
        _, arg = impls["python"].edge_aggregate_forward(p, q, idx, 0.01, "max")
        cases = {
            "knn": lambda im: im.knn_indices(p, k),
            "fwd": lambda im: im.edge_aggregate_forward(p, q, idx, 0.01, "max"),
            "bwd": lambda im: im.edge_aggregate_backward(p, q, idx, 0.01, "max", arg, g),
        }
        for name, fn in cases.items():
            t = {n: median_time(lambda: fn(im), args.repeat) for n, im in impls.items()}
            speed = f"{t['python'] / t['cython']:8.2f}x" if "cython" in t else ""
            print(f"{name:<10} {f'{b},{m},{c},{k}':<18} " + " ".join(f"{v * 1e3:8.3f}ms" for v in t.values()) + "  " + speed)


if __name__ == "__main__":
    main()
