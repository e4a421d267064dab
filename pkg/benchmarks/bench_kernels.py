"""Benchmark the numba kernels against the pure-numpy fallback.

Runs both backends directly (independent of SMMREC_BACKEND) on the two
hot kernels: the contextual-position attention term (forward+backward)
and the scatter-add used by embedding/gather gradients.

    python benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from smmrec import _kernels_numba as nb
from smmrec import kernels


def _time(fn, repeats):
    fn()  # warmup (JIT compile for the numba side)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_cope(repeats, n_slices=64, seq=30, dim=64, p_max=30, dtype=np.float32):
    rng = np.random.default_rng(0)
    q = rng.normal(size=(n_slices, seq, dim)).astype(dtype)
    k = rng.normal(size=(n_slices, seq, dim)).astype(dtype)
    table = rng.normal(size=(p_max + 1, dim)).astype(dtype)
    mask = np.ones((n_slices, seq, seq), dtype=bool)
    d = rng.normal(size=(n_slices, seq, seq)).astype(dtype)

    rows = []
    for name, fwd, bwd in (
        ("numpy", kernels.cope_forward_numpy, kernels.cope_backward_numpy),
        ("numba", nb.cope_forward, nb.cope_backward),
    ):
        saved = fwd(q, k, table, mask)
        t_fwd = _time(lambda: fwd(q, k, table, mask), repeats)
        t_bwd = _time(lambda: bwd(d, q, k, table, mask, *saved[1:]), repeats)
        rows.append((f"cope_forward[{name}]", t_fwd))
        rows.append((f"cope_backward[{name}]", t_bwd))
    return rows


def bench_scatter(repeats, rows_out=5000, n=120_000, dim=64, dtype=np.float32):
    rng = np.random.default_rng(1)
    idx = rng.integers(0, rows_out, size=n)
    vals = rng.normal(size=(n, dim)).astype(dtype)
    out = np.zeros((rows_out, dim), dtype=dtype)

    results = []
    for name, fn in (
        ("numpy", kernels.scatter_add_rows_numpy),
        ("numba", nb.scatter_add_rows),
    ):
        results.append((f"scatter_add[{name}]", _time(lambda: fn(out, idx, vals), repeats)))
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    print(f"active backend for the library: {kernels.backend_name()}")
    rows = bench_cope(args.repeats) + bench_scatter(args.repeats)
    width = max(len(name) for name, _ in rows)
    print(f"{'kernel':<{width}}  best of {args.repeats} (ms)")
    for name, t in rows:
        print(f"{name:<{width}}  {1000 * t:10.3f}")

    pairs = {}
    for name, t in rows:
        base, backend = name[:-1].split("[")
        pairs.setdefault(base, {})[backend] = t
    for base, t in pairs.items():
        if {"numpy", "numba"} <= t.keys():
            print(f"{base}: numba speedup x{t['numpy'] / t['numba']:.2f}")


if __name__ == "__main__":
    main()
