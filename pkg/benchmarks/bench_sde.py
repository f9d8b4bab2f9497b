"""Benchmark the wipe simulation kernels: numba JIT vs the numpy fallback.

Times full wipes (drift + diffusion + absorption + contact gating) across
particle counts and prints one table row per (backend, particle count).
The two backends are bit-identical; this script only compares speed.

Usage:
    python3 benchmarks/bench_sde.py [--repeats 20] [--length 0.5]
"""

import argparse
import time

import numpy as np

from tablewipe._kernels import get_backend
from tablewipe.sde import ParticleCloud, SdeParams, TableGeometry, WipeAction, simulate_wipe


def make_cloud(n: int, seed: int = 5) -> ParticleCloud:
    rng = np.random.default_rng(seed)
    return ParticleCloud(
        rng.uniform(0, 1, n), rng.uniform(0, 1, n), np.zeros(n, dtype=np.uint8)
    )


def time_backend(backend: str, n: int, action: WipeAction, repeats: int) -> tuple[float, float]:
    table = TableGeometry()
    params = SdeParams(alpha=1e-2, lam=2.0)
    simulate_wipe(make_cloud(n), action, table, params, np.random.default_rng(0), backend=backend)
    times = []
    for k in range(repeats):
        cloud = make_cloud(n)
        rng = np.random.default_rng(k)
        t0 = time.perf_counter()
        simulate_wipe(cloud, action, table, params, rng, backend=backend)
        times.append(time.perf_counter() - t0)
    arr = np.array(times)
    return float(arr.min()), float(np.median(arr))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--length", type=float, default=0.5, help="wipe length in metres")
    ap.add_argument(
        "--particles", type=int, nargs="+", default=[100, 1000, 10000], help="cloud sizes"
    )
    args = ap.parse_args()

    backends = ["numpy"]
    try:
        get_backend("numba")
        import numba  # noqa: F401  (fallback silently degrades, so probe explicitly)

        backends.insert(0, "numba")
    except ImportError:
        print("numba not installed; benchmarking the numpy fallback only")

    action = WipeAction(0.25, 0.5, 0.0, args.length)
    print(f"wipe length {args.length} m, {args.repeats} repeats per cell")
    print(f"{'backend':<8} {'particles':>9} {'min ms':>10} {'median ms':>10}")
    rows = {}
    for backend in backends:
        for n in args.particles:
            best, med = time_backend(backend, n, action, args.repeats)
            rows[(backend, n)] = best
            print(f"{backend:<8} {n:>9} {best * 1e3:>10.3f} {med * 1e3:>10.3f}")
    if "numba" in backends:
        for n in args.particles:
            speedup = rows[("numpy", n)] / rows[("numba", n)]
            print(f"numba speedup at {n} particles: {speedup:.1f}x")


if __name__ == "__main__":
    main()
