"""Benchmark the numba and numpy backends on the two hot kernels.

Usage:
    python benchmarks/bench_kernels.py [--sizes 1000,5000,20000] [--reps 5]

Prints one row per (kernel, backend, size) with the best wall time over
the repetitions. The numba path pays its JIT cost on a warmup call that
is excluded from timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fleetslam import backend


def _clouds(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    src = rng.uniform(0.0, 60.0, size=(n, 2))
    tgt = src + rng.normal(0.0, 0.3, size=(n, 2))
    return src, tgt


def bench_nn(name: str, sizes: list[int], reps: int) -> None:
    rng = np.random.default_rng(12345)
    for n in sizes:
        src, tgt = _clouds(n, rng)
        backend.nn_within(src[:64], tgt[:64], 2.0)  # warmup / JIT
        best = min(
            _timed(lambda: backend.nn_within(src, tgt, 2.0))
            for _ in range(reps))
        print(f"nn_within    {name:6s} n={n:<7d} {1e3 * best:9.3f} ms")


def bench_radius(name: str, sizes: list[int], reps: int) -> None:
    rng = np.random.default_rng(54321)
    for n in sizes:
        pts = rng.uniform(0.0, 60.0, size=(n, 2))
        backend.radius_csr(pts[:64], 1.5)  # warmup / JIT
        best = min(
            _timed(lambda: backend.radius_csr(pts, 1.5))
            for _ in range(reps))
        print(f"radius_csr   {name:6s} n={n:<7d} {1e3 * best:9.3f} ms")


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="1000,5000,20000")
    parser.add_argument("--reps", type=int, default=5)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    for name in ("numpy", "numba"):
        try:
            backend.set_backend(name)
        except (ImportError, RuntimeError) as exc:
            print(f"skipping {name}: {exc}")
            continue
        active = backend.active_backend()
        if active != name:
            print(f"skipping {name}: backend fell back to {active}")
            continue
        bench_nn(name, sizes, args.reps)
        bench_radius(name, sizes, args.reps)
    backend.set_backend("auto")


if __name__ == "__main__":
    main()
