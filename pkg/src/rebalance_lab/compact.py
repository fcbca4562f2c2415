"""Compact statistics: HLHE discretization and planning over aggregated records.

Keys are grouped by ``(current, hashed, cost_level, mem_level)`` and each
group carries per-instance counts of where its keys are headed.  The planner
replays the key-level three-phase algorithm on these counts one unit at a time,
which is exact when the discretizers are lossless (``r = 0``).
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .balance import (
    FIT_EPS,
    HIGHEST_COST,
    ITERATION_FACTOR,
    SMALLEST_MEMORY,
    SelectionCriterion,
    derive_table,
)
from .core import AssignmentFunction, MigrationPlan, RoutingTable, WorkloadSnapshot, hash_keys
from .errors import CapacityInfeasible, CountMismatch, InvalidInput, NonTermination, OutOfRange


# --------------------------------------------------------------------------
# discretization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelSeries:
    levels: tuple
    r: int
    R: int
    s: int

    @property
    def top(self) -> int:
        return self.levels[0]

    @property
    def m(self) -> int:
        return len(self.levels)


def build_levels(x_max, r: int) -> LevelSeries:
    """Linear levels ``s*R, ..., R`` followed by ``R/2, ..., 1``."""
    if x_max < 1:
        raise InvalidInput("x_max must be >= 1")
    if r < 0:
        raise InvalidInput("r must be >= 0")
    big = 1 << r
    s = int(x_max // big)
    linear = [j * big for j in range(s, 0, -1)]
    expo = [1 << j for j in range(r - 1, -1, -1)]
    return LevelSeries(tuple(linear + expo), r, big, s)


class Discretizer:
    """Greedy level assignment carrying the running deviation across calls."""

    def __init__(self, series: LevelSeries, accumulated_deviation: int = 0):
        self.series = series
        self.accumulated_deviation = accumulated_deviation

    @classmethod
    def for_values(cls, values, r: int) -> "Discretizer":
        x_max = int(np.max(values)) if len(values) else 1
        return cls(build_levels(max(x_max, 1), r))

    def reset(self):
        self.accumulated_deviation = 0

    def __call__(self, values) -> np.ndarray:
        return discretize(values, self)


def discretize(values, disc: Discretizer) -> np.ndarray:
    """Map a non-increasing sequence of values >= 1 onto the discretizer's levels."""
    arr = np.ascontiguousarray(values, dtype=np.int64)
    if arr.size == 0:
        return arr.copy()
    if arr.min() < 1:
        raise InvalidInput("values must be >= 1")
    if arr.size > 1 and (np.diff(arr) > 0).any():
        raise InvalidInput("values must be non-increasing")
    out, d = _kernels.hlhe_scan(arr, disc.series.r, disc.series.top, disc.accumulated_deviation)
    disc.accumulated_deviation = int(d)
    return out


def naive_piecewise(values, bins) -> np.ndarray:
    """Stateless binning; ``bins`` is a sequence of ``(lo, hi, representative)``."""
    out = np.empty(len(values), dtype=np.int64)
    for i, x in enumerate(values):
        for lo, hi, rep in bins:
            if lo <= x <= hi:
                out[i] = rep
                break
        else:
            raise OutOfRange(f"value {x} is not covered by any bin")
    return out


def levels_for(values, disc: Discretizer, keys=None) -> np.ndarray:
    """Discretize an unsorted array; zeros stay zero, ties visit in key order."""
    values = np.asarray(values, dtype=np.int64)
    out = np.zeros(values.shape[0], dtype=np.int64)
    pos = np.flatnonzero(values > 0)
    if pos.size:
        tie = keys[pos] if keys is not None else pos
        order = pos[np.lexsort((tie, -values[pos]))]
        out[order] = discretize(values[order], disc)
    return out


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class CompactRecord:
    """``count`` keys sharing (current, hashed, cost_level, mem_level), headed to ``next``."""

    current: int
    hashed: int
    cost_level: int
    mem_level: int
    next: int | None
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise InvalidInput("record count must be positive")

    @property
    def slot(self) -> tuple:
        return (self.next, self.current, self.hashed, self.cost_level, self.mem_level)


@dataclass(eq=False)
class CompactSpace:
    n_downstream: int
    counts: dict = field(default_factory=dict)
    key_cost_level: np.ndarray | None = None
    key_mem_level: np.ndarray | None = None
    window: int | None = None

    @classmethod
    def from_records(cls, n_downstream: int, records, **kw) -> "CompactSpace":
        sp = cls(n_downstream, **kw)
        for rec in records:
            sp.add(rec.next, rec.current, rec.hashed, rec.cost_level, rec.mem_level, rec.count)
        return sp

    def add(self, nxt, current, hashed, vc, vs, count=1):
        if count <= 0:
            return
        slot = (nxt, int(current), int(hashed), int(vc), int(vs))
        self.counts[slot] = self.counts.get(slot, 0) + int(count)

    @property
    def records(self) -> list:
        return sorted(
            (CompactRecord(cur, h, vc, vs, nxt, n) for (nxt, cur, h, vc, vs), n in self.counts.items()),
            key=lambda r: (r.current, r.hashed, r.cost_level, r.mem_level, -1 if r.next is None else r.next),
        )

    def normalize(self) -> "CompactSpace":
        return CompactSpace.from_records(self.n_downstream, self.records,
                                         key_cost_level=self.key_cost_level,
                                         key_mem_level=self.key_mem_level, window=self.window)

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def total_count(self) -> int:
        return sum(self.counts.values())

    def weighted_loads(self) -> np.ndarray:
        out = np.zeros(self.n_downstream, dtype=np.int64)
        for (nxt, _cur, _h, vc, _vs), n in self.counts.items():
            if nxt is not None:
                out[nxt] += vc * n
        return out

    def mark_nil(self, current, hashed, vc, vs, count, nxt):
        """Detach ``count`` keys headed to ``nxt`` into the Nil slot, merging as needed."""
        slot = (nxt, current, hashed, vc, vs)
        have = self.counts.get(slot, 0)
        if count > have:
            raise CountMismatch(f"only {have} keys in {slot}")
        if count == have:
            del self.counts[slot]
        else:
            self.counts[slot] = have - count
        self.add(None, current, hashed, vc, vs, count)


def space_bound(n_downstream: int, distinct_costs: int, distinct_mems: int) -> int:
    if min(n_downstream, distinct_costs, distinct_mems) < 1:
        raise InvalidInput("space_bound inputs must be >= 1")
    return (n_downstream + 1) * n_downstream * n_downstream * distinct_costs * distinct_mems


def compress(snap: WorkloadSnapshot, f: AssignmentFunction, disc_c: Discretizer | None = None,
             disc_s: Discretizer | None = None, r: int = 3, window: int | None = None) -> CompactSpace:
    """Aggregate a snapshot into records with ``next = current``.

    Missing discretizers are built from the snapshot maxima with exponent ``r``.
    """
    n = f.n_downstream
    mem = snap.windowed_mem if window is None else snap.windowed(window)
    if disc_c is None:
        disc_c = Discretizer.for_values(snap.cost, r)
    if disc_s is None:
        disc_s = Discretizer.for_values(mem, r)
    vc = levels_for(snap.cost, disc_c, snap.keys)
    vs = levels_for(mem, disc_s, snap.keys)
    cur = f.assign(snap.keys)
    h = hash_keys(snap.keys, n)
    sp = CompactSpace(n, key_cost_level=vc, key_mem_level=vs, window=window)
    if len(snap):
        rows = np.stack([cur, h, vc, vs], axis=1)
        uniq, cnt = np.unique(rows, axis=0, return_counts=True)
        for (c0, h0, a, b), k in zip(uniq.tolist(), cnt.tolist()):
            sp.counts[(c0, c0, h0, a, b)] = k
    return sp


# --------------------------------------------------------------------------
# planning over groups
# --------------------------------------------------------------------------

@dataclass(eq=False)
class CompactOutcome:
    space: CompactSpace
    loads: np.ndarray
    table_size: int
    iterations: int = 0
    back_moves_n: int = 0
    capacity_ok: bool = True
    algorithm: str = ""
    psi: SelectionCriterion = HIGHEST_COST
    fallbacks: int = 0

    @property
    def changed(self) -> int:
        return sum(n for (nxt, cur, *_), n in self.space.counts.items() if nxt != cur)


def _take(base, unit, avail, thr):
    """Units to take, in order, so that ``base - taken cost <= thr``; None if impossible."""
    cum = np.cumsum(unit * avail)
    ok = base - cum <= thr
    if not ok.any():
        return None
    j = int(np.argmax(ok))
    prev = base - (int(cum[j - 1]) if j else 0)
    u = int(unit[j])
    t = max(1, int(np.ceil((prev - thr) / u)))
    while prev - t * u > thr:
        t += 1
    while t > 1 and prev - (t - 1) * u <= thr:
        t -= 1
    take = np.zeros_like(avail)
    take[:j] = avail[:j]
    take[j] = t
    return take


class _Groups:
    def __init__(self, space: CompactSpace, psi: SelectionCriterion):
        start = {}
        for (_nxt, cur, h, vc, vs), n in space.counts.items():
            start[(cur, h, vc, vs)] = start.get((cur, h, vc, vs), 0) + n
        g = np.array(sorted(start), dtype=np.int64).reshape(-1, 4)
        cnt = np.array([start[tuple(row)] for row in g.tolist()], dtype=np.int64)
        # number groups in psi order so that pools come out pre-sorted
        o = psi.order(g[:, 2], g[:, 3], g[:, 0], g[:, 1], np.zeros(len(g), dtype=np.int64))
        self.g = g[o]
        self.cur, self.h, self.vc, self.vs = (self.g[:, i].copy() for i in range(4))
        self.n = space.n_downstream
        self.at = np.zeros((len(self.g), self.n), dtype=np.int64)
        self.at[np.arange(len(self.g)), self.cur] = cnt[o]
        self.nil = np.zeros(len(self.g), dtype=np.int64)
        self.psi = psi
        self.rank = [psi.sort_key(c, s, d, h) for c, s, d, h in zip(self.vc, self.vs, self.cur, self.h)]
        self.units = int(cnt.sum())

    def loads(self):
        return (self.at * self.vc[:, None]).sum(axis=0)


def _compact_rebalance(space: CompactSpace, theta_max: float, psi: SelectionCriterion, n_back=0,
                       eta: SelectionCriterion = SMALLEST_MEMORY, capacity=None, name=""):
    if theta_max < 0:
        raise InvalidInput("theta_max must be >= 0")
    G = _Groups(space, psi)
    n = G.n
    back = 0
    if n_back > 0:
        ent = np.flatnonzero(G.cur != G.h)
        if ent.size:
            ent = ent[eta.order(G.vc[ent], G.vs[ent], G.cur[ent], G.h[ent], np.zeros(ent.size, np.int64))]
            left = n_back
            for gi in ent:
                if left <= 0:
                    break
                t = min(left, int(G.at[gi, G.cur[gi]]))
                G.at[gi, G.cur[gi]] -= t
                G.at[gi, G.h[gi]] += t
                left -= t
                back += t
    loads = G.loads()
    mean = float(loads.sum()) / n
    lmax = (1.0 + theta_max) * mean
    thr = lmax + FIT_EPS * abs(lmax)

    # phase II
    for d in range(n):
        if loads[d] <= thr:
            continue
        pool = np.flatnonzero((G.at[:, d] > 0) & (G.vc > 0))
        take = _take(int(loads[d]), G.vc[pool], G.at[pool, d], thr)
        if take is None:
            take = G.at[pool, d].copy()
        G.at[pool, d] -= take
        G.nil[pool] += take
        loads[d] -= int((take * G.vc[pool]).sum())

    # phase III, one unit at a time
    heap = [(-int(G.vc[i]),) + G.rank[i] + (i,) for i in np.flatnonzero(G.nil > 0)]
    heapq.heapify(heap)
    queued = set(int(i) for i in np.flatnonzero(G.nil > 0))
    cap = ITERATION_FACTOR * max(G.units, 1)
    iterations = fallbacks = 0
    while heap:
        i = heap[0][-1]
        G.nil[i] -= 1
        if G.nil[i] == 0:
            heapq.heappop(heap)
            queued.discard(i)
        c = int(G.vc[i])
        order = sorted(range(n), key=lambda d: (int(loads[d]), d))
        placed = False
        for d in order:
            iterations += 1
            if iterations > cap:
                raise NonTermination(f"compact llfd exceeded {cap} adjust calls")
            need = int(loads[d]) + c
            if need <= thr:
                placed = True
            else:
                pool = np.flatnonzero((G.at[:, d] > 0) & (G.vc > 0) & (G.vc < c))
                if pool.size == 0:
                    continue
                take = _take(need, G.vc[pool], G.at[pool, d], thr)
                if take is None:
                    continue
                G.at[pool, d] -= take
                G.nil[pool] += take
                loads[d] -= int((take * G.vc[pool]).sum())
                for j in pool[take > 0]:
                    j = int(j)
                    if j not in queued:
                        heapq.heappush(heap, (-int(G.vc[j]),) + G.rank[j] + (j,))
                        queued.add(j)
                placed = True
            if placed:
                G.at[i, d] += 1
                loads[d] += c
                break
        if not placed:
            d = order[0]
            G.at[i, d] += 1
            loads[d] += c
            fallbacks += 1

    out = CompactSpace(n, key_cost_level=space.key_cost_level, key_mem_level=space.key_mem_level,
                       window=space.window)
    rows, cols = np.nonzero(G.at)
    for gi, d in zip(rows.tolist(), cols.tolist()):
        out.add(d, G.cur[gi], G.h[gi], G.vc[gi], G.vs[gi], int(G.at[gi, d]))
    size = int(sum(G.at[gi, d] for gi, d in zip(rows.tolist(), cols.tolist()) if d != G.h[gi]))
    return CompactOutcome(out, loads, size, iterations, back,
                          capacity is None or size <= capacity, name, psi, fallbacks)


def _check_window(space, w):
    if w is not None and space.window is not None and w != space.window:
        raise InvalidInput(f"space was compressed with window {space.window}, not {w}")


def _table_entries(space: CompactSpace) -> int:
    return sum(n for (_nxt, cur, h, _a, _b), n in space.counts.items() if cur != h)


def compact_min_table(space: CompactSpace, theta_max: float, table_capacity=None) -> CompactOutcome:
    return _compact_rebalance(space, theta_max, HIGHEST_COST, n_back=_table_entries(space),
                              capacity=table_capacity, name="min_table")


def compact_min_mig(space: CompactSpace, theta_max: float, beta: float = 1.5, w=None,
                    table_capacity=None) -> CompactOutcome:
    _check_window(space, w)
    return _compact_rebalance(space, theta_max, SelectionCriterion.largest_gamma(beta),
                              capacity=table_capacity, name="min_mig")


def compact_mixed(space: CompactSpace, theta_max: float, beta: float = 1.5, w=None,
                  table_capacity: int = 3000) -> CompactOutcome:
    """Mixed over compact records; same loop and failure mode as the key-level version."""
    _check_window(space, w)
    if table_capacity < 0:
        raise InvalidInput("table_capacity must be >= 0")
    psi = SelectionCriterion.largest_gamma(beta)
    n_a = _table_entries(space)
    n = 0
    while True:
        out = _compact_rebalance(space, theta_max, psi, n, capacity=table_capacity, name="mixed")
        if out.table_size <= table_capacity:
            return out
        if n >= n_a:
            break
        n = min(n_a, n + out.table_size - table_capacity)
    fallback = compact_min_table(space, theta_max, table_capacity)
    fallback.algorithm = "mixed"
    raise CapacityInfeasible(
        f"table needs {out.table_size} entries after moving back all {n_a}; capacity is {table_capacity}",
        outcome=fallback,
    )


def compact_mixed_bf(space: CompactSpace, theta_max: float, beta: float = 1.5, w=None,
                     table_capacity: int = 3000) -> CompactOutcome:
    """Exhaustive move-back search; ranks by the estimated migrated memory."""
    _check_window(space, w)
    psi = SelectionCriterion.largest_gamma(beta)
    best = None
    for n in range(_table_entries(space) + 1):
        out = _compact_rebalance(space, theta_max, psi, n, capacity=table_capacity, name="mixed_bf")
        if out.table_size > table_capacity:
            continue
        est = sum(vs * k for (nxt, cur, _h, _vc, vs), k in out.space.counts.items() if nxt != cur)
        rank = (est, n, out.table_size)
        if best is None or rank < best[0]:
            best = (rank, out)
    if best is None:
        fallback = compact_min_table(space, theta_max, table_capacity)
        fallback.algorithm = "mixed_bf"
        raise CapacityInfeasible("no move-back count fits the table capacity", outcome=fallback)
    return best[1]


def expand(outcome: CompactOutcome, snap: WorkloadSnapshot, f: AssignmentFunction,
           psi: SelectionCriterion | None = None, window: int | None = None) -> MigrationPlan:
    """Turn record-level moves back into concrete keys.

    Within each group, keys are picked in ``psi`` order (key id last); targets
    are served in ascending instance order.
    """
    space = outcome.space
    psi = outcome.psi if psi is None else psi
    n = f.n_downstream
    if space.key_cost_level is None or len(space.key_cost_level) != len(snap):
        raise InvalidInput("outcome was not compressed from this snapshot")
    mem = snap.windowed_mem if window is None else snap.windowed(window)
    orig = f.assign(snap.keys)
    h = hash_keys(snap.keys, n)
    vc, vs = space.key_cost_level, space.key_mem_level

    moves = {}
    for (nxt, cur, hh, a, b), k in space.counts.items():
        if nxt is None:
            raise InvalidInput("outcome still holds unassigned records")
        if nxt != cur:
            moves.setdefault((cur, hh, a, b), []).append((nxt, k))
    dest = orig.copy()
    if moves:
        rows = np.stack([orig, h, vc, vs], axis=1)
        order = psi.order(snap.cost, mem, orig, h, snap.keys)
        # group positions by record attributes, preserving psi order
        buckets = {}
        for i in order.tolist():
            t = tuple(rows[i].tolist())
            if t in moves:
                buckets.setdefault(t, []).append(i)
        for t, targets in moves.items():
            members = buckets.get(t, [])
            need = sum(k for _, k in targets)
            if need > len(members):
                raise CountMismatch(f"record {t} moves {need} keys but only {len(members)} match")
            pos = 0
            for nxt, k in sorted(targets):
                dest[members[pos:pos + k]] = nxt
                pos += k
    moved = np.flatnonzero(dest != orig)
    table = derive_table(snap.keys, dest, h, f, None)
    return MigrationPlan(frozenset(int(k) for k in snap.keys[moved]), table, int(mem[moved].sum()))


COMPACT_ALGORITHMS = {
    "mixed": compact_mixed,
    "min_table": lambda space, theta_max, beta=1.5, w=None, table_capacity=None:
        compact_min_table(space, theta_max, table_capacity),
    "min_mig": compact_min_mig,
    "mixed_bf": compact_mixed_bf,
}
