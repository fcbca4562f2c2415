"""Time each hot kernel in its numba and pure-numpy flavour.

    python3 benchmarks/bench_kernels.py [--keys 100000] [--repeat 5]

The numba column excludes compilation (one warm-up call per kernel).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from rebalance_lab import _kernels as K


def _best(fn, args_fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        args = args_fn()
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n_keys: int, n: int = 15):
    rng = np.random.default_rng(0)
    keys = rng.integers(0, 2**63 - 1, n_keys, dtype=np.int64).astype(np.uint64)
    dest = rng.integers(0, n, n_keys).astype(np.int64)
    cost = rng.integers(1, 1000, n_keys).astype(np.int64)
    vals = np.sort(rng.integers(1, 5000, n_keys))[::-1].astype(np.int64)
    top = 1 << int(vals[0]).bit_length()
    pa = rng.integers(0, n_keys, 4096)
    pb = rng.integers(0, n_keys, 4096)
    base = np.bincount(dest, cost, n).astype(np.int64)

    def fl_args():
        return (cost.copy(), cost.copy(), cost.copy(), dest, base.copy(), base, pa, pb,
                float(base.mean()), 1e9)

    return [
        ("hash_mod", "hash_mod", lambda: (keys, n)),
        ("instance_loads", "instance_loads", lambda: (dest, cost, n)),
        ("hlhe_scan", "hlhe_scan", lambda: (vals, 3, top, 0)),
        ("fluctuate_block", "fluctuate_block", fl_args),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--keys", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba not importable; nothing to compare")
        return 1
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, attr, args_fn in cases(a.keys):
        py = getattr(K, attr + "_py")
        nb = getattr(K, attr + "_nb")
        nb(*args_fn())  # compile
        t_py = _best(py, args_fn, a.repeat)
        t_nb = _best(nb, args_fn, a.repeat)
        print(f"{name:<18}{t_py * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_py / max(t_nb, 1e-9):>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
