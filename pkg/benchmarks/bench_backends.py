"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_backends.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from fsmirl import _accel


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    # neighbour draws: 5000 nodes, mean degree 60, s = 10
    n, s = 5000, 10
    deg = rng.poisson(60, n)
    offsets = np.concatenate([[0], np.cumsum(deg)])
    targets = rng.integers(0, n, offsets[-1])
    weights = rng.random(offsets[-1])
    nodes = rng.permutation(n)
    u = rng.random((n, s))
    yield ("draw_neighbors", lambda f: f(offsets, targets, weights, nodes, u))

    Z = rng.normal(size=(500, 32))
    bw = np.ones(32)
    pairs = np.array([(i, j) for i in range(32) for j in range(i + 1, 32)])[:64]
    yield ("hsic_pairs", lambda f: f(Z, bw, pairs))
    yield ("hsic_pairs_grad", lambda f: f(Z, bw, pairs))

    z = rng.normal(size=500)
    yield ("pair_median", lambda f: f(z))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, call in cases(rng):
        nb = getattr(_accel, name + "_nb")
        npy = getattr(_accel, name + "_np")
        t_nb = best_of(lambda: call(nb), args.repeat)
        t_np = best_of(lambda: call(npy), args.repeat)
        print(f"{name:<18}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
