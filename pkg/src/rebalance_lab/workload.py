"""Synthetic Zipf workloads with controlled interval-to-interval fluctuation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import AssignmentFunction, WorkloadSnapshot
from .errors import InvalidInput, Unreachable

SWAP_FACTOR = 100
_BLOCK = 4096


@dataclass(frozen=True)
class GeneratorConfig:
    key_count: int = 10_000
    skew: float = 0.85
    fluctuation: float = 1.0
    tuples_per_interval: int = 10_000_000
    cost_per_tuple: int = 1
    mem_per_tuple: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.key_count < 1:
            raise InvalidInput("key_count must be >= 1")
        if self.skew < 0:
            raise InvalidInput("skew must be >= 0")
        if self.fluctuation < 0:
            raise InvalidInput("fluctuation must be >= 0")
        if min(self.tuples_per_interval, self.cost_per_tuple, self.mem_per_tuple) < 0:
            raise InvalidInput("totals must be >= 0")


def zipf_frequencies(key_count: int, skew: float, total: int) -> np.ndarray:
    """Rank-ordered counts proportional to ``rank**-skew`` summing to ``total``."""
    w = np.arange(1, key_count + 1, dtype=np.float64) ** -float(skew)
    exact = w / w.sum() * total
    base = np.floor(exact).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        # largest remainder first, lower rank wins ties
        frac = exact - base
        order = np.lexsort((np.arange(key_count), -frac))
        base[order[:short]] += 1
    return base


def key_ids(key_count: int, seed: int) -> np.ndarray:
    """Distinct pseudo-random 63-bit key ids, sorted."""
    rng = np.random.default_rng([seed, 0x6B6579])
    ids = np.unique(rng.integers(0, 2**63 - 1, key_count, dtype=np.int64))
    while ids.size < key_count:
        more = rng.integers(0, 2**63 - 1, key_count - ids.size, dtype=np.int64)
        ids = np.unique(np.concatenate([ids, more]))
    return ids.astype(np.uint64)


def zipf_interval(cfg: GeneratorConfig, interval: int = 0) -> WorkloadSnapshot:
    """Fresh Zipf snapshot; the rank-to-key mapping depends only on the seed."""
    keys = key_ids(cfg.key_count, cfg.seed)
    freq_by_rank = zipf_frequencies(cfg.key_count, cfg.skew, cfg.tuples_per_interval)
    perm = np.random.default_rng([cfg.seed, 0x72616E6B]).permutation(cfg.key_count)
    freq = np.empty(cfg.key_count, dtype=np.int64)
    freq[perm] = freq_by_rank
    return WorkloadSnapshot(
        interval=interval,
        keys=keys,
        frequency=freq,
        cost=freq * cfg.cost_per_tuple,
        mem_history=(freq * cfg.mem_per_tuple).reshape(-1, 1),
    )


def displacement(before: np.ndarray, after: np.ndarray) -> float:
    """max over instances of ``|L_after - L_before| / mean``."""
    mean = float(np.mean(before))
    if mean <= 0:
        return 0.0
    return float(np.max(np.abs(after - before))) / mean


def fluctuate(prev: WorkloadSnapshot, f: float, assignment: AssignmentFunction, seed: int,
              window: int | None = None, max_swaps: int | None = None) -> WorkloadSnapshot:
    """Next interval's snapshot, produced by swapping statistics of random key pairs.

    Pairs whose keys sit on the same instance are skipped.  Swapping stops as
    soon as some instance's load has moved by ``f`` times the mean.  The
    swapped memory value is appended to the history, which keeps ``window``
    columns (default: the previous depth, at least one).
    """
    if f < 0:
        raise InvalidInput("f must be >= 0")
    if len(prev) == 0:
        raise InvalidInput("snapshot is empty")
    depth = max(prev.depth, 1) if window is None else window
    if depth < 1:
        raise InvalidInput("window must be >= 1")
    cost = prev.cost.copy()
    freq = prev.frequency.copy()
    last = prev.mem_history[:, -1].copy() if prev.depth else np.zeros(len(prev), dtype=np.int64)

    if f > 0:
        n = assignment.n_downstream
        dest = assignment.assign(prev.keys)
        base = _kernels.instance_loads(dest, cost, n)
        loads = base.copy()
        mean = float(base.sum()) / n
        if n == 1 or mean <= 0:
            raise Unreachable("no cross-instance swap can move the load")
        cap = SWAP_FACTOR * len(prev) if max_swaps is None else max_swaps
        rng = np.random.default_rng([seed, prev.interval])
        used = 0
        reached = False
        while used < cap and not reached:
            size = min(_BLOCK, cap - used)
            pa = rng.integers(0, len(prev), size)
            pb = rng.integers(0, len(prev), size)
            k, reached = _kernels.fluctuate_block(cost, last, freq, dest, loads, base, pa, pb,
                                                  mean, float(f))
            used += int(k)
        if not reached:
            raise Unreachable(f"displacement {f} not reached after {cap} swaps")

    hist = np.concatenate([prev.mem_history, last.reshape(-1, 1)], axis=1)[:, -depth:]
    return WorkloadSnapshot(prev.interval + 1, prev.keys, freq, cost, hist)
