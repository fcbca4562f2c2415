"""Key-level rebalancing algorithms.

Every algorithm follows the same three phases: optionally move some routing
table entries back to their hash destination, strip keys off overloaded
instances, then place the stripped keys with least-load-fit-decreasing
(:func:`llfd`).  They only differ in which entries are moved back and in the
key selection criterion.

All orderings are built from ``(cost, memory, current instance, hash
instance)`` with the key id as the last tie-break, so keys that agree on those
four attributes are interchangeable.  The compact planner relies on this.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels
from .core import (
    AssignmentFunction,
    MigrationPlan,
    RoutingTable,
    WorkloadSnapshot,
    hash_keys,
)
from .errors import CapacityInfeasible, InvalidInput, NonTermination

# relative slack on the L_max comparison, so that float round-off in the mean
# never turns an exact fit into an overload
FIT_EPS = 1e-12
ITERATION_FACTOR = 64


def fits(load, lmax: float) -> bool:
    return load <= lmax + FIT_EPS * abs(lmax)


class Criterion(Enum):
    HIGHEST_COST = "highest_cost"
    LARGEST_GAMMA = "largest_gamma"
    SMALLEST_MEMORY = "smallest_memory"


def gamma(cost, windowed_mem, beta: float) -> float:
    """Migration priority ``cost**beta / windowed_mem`` (memory floored at 1)."""
    return float(np.power(float(cost), float(beta))) / max(int(windowed_mem), 1)


@dataclass(frozen=True)
class SelectionCriterion:
    """Key selection criterion, used as psi (Phase II / exchange) or eta (move-back)."""

    kind: Criterion
    beta: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidInput("beta must be >= 0")

    @classmethod
    def highest_cost(cls):
        return cls(Criterion.HIGHEST_COST)

    @classmethod
    def largest_gamma(cls, beta: float):
        return cls(Criterion.LARGEST_GAMMA, beta)

    @classmethod
    def smallest_memory(cls):
        return cls(Criterion.SMALLEST_MEMORY)

    def sort_key(self, cost, mem, current, hashed) -> tuple:
        """Ascending sort key; smaller means selected first."""
        cost, mem, current, hashed = int(cost), int(mem), int(current), int(hashed)
        if self.kind is Criterion.HIGHEST_COST:
            return (-cost, mem, current, hashed)
        if self.kind is Criterion.LARGEST_GAMMA:
            return (-gamma(cost, mem, self.beta), -cost, mem, current, hashed)
        return (max(mem, 1), mem, -cost, current, hashed)

    def order(self, cost, mem, current, hashed, keys) -> np.ndarray:
        """Vectorised :meth:`sort_key` followed by key id; returns an argsort."""
        cost = np.asarray(cost, dtype=np.int64)
        mem = np.asarray(mem, dtype=np.int64)
        if self.kind is Criterion.HIGHEST_COST:
            cols = (-cost, mem, current, hashed)
        elif self.kind is Criterion.LARGEST_GAMMA:
            g = np.power(cost.astype(np.float64), float(self.beta)) / np.maximum(mem, 1)
            cols = (-g, -cost, mem, current, hashed)
        else:
            cols = (np.maximum(mem, 1), mem, -cost, current, hashed)
        # lexsort treats the last column as primary
        return np.lexsort((keys,) + tuple(reversed(cols)))


HIGHEST_COST = SelectionCriterion.highest_cost()
SMALLEST_MEMORY = SelectionCriterion.smallest_memory()


@dataclass(frozen=True)
class CandidateKey:
    key: int
    cost: int
    windowed_mem: int
    origin: int
    current: int | None = None
    hashed: int | None = None

    def __post_init__(self):
        if self.cost < 0 or self.windowed_mem < 0:
            raise InvalidInput("candidate statistics must be non-negative")

    def sort_key(self, psi: SelectionCriterion) -> tuple:
        cur = self.origin if self.current is None else self.current
        h = self.origin if self.hashed is None else self.hashed
        return psi.sort_key(self.cost, self.windowed_mem, cur, h) + (self.key,)


class AdjustKind(Enum):
    ACCEPT = "accept"
    EXCHANGE = "exchange"
    REJECT = "reject"


@dataclass(frozen=True)
class AdjustResult:
    kind: AdjustKind
    exchange: tuple = ()

    @property
    def accepted(self) -> bool:
        return self.kind is not AdjustKind.REJECT


def adjust(k: CandidateKey, d: int, est_loads, assigned, theta_max: float,
           psi: SelectionCriterion, mean_load: float | None = None) -> AdjustResult:
    """Try to place ``k`` on instance ``d``.

    ``assigned`` holds the :class:`CandidateKey` records currently on ``d``.
    Exchanged keys are returned in selection order.
    """
    est_loads = np.asarray(est_loads)
    if not 0 <= d < len(est_loads):
        raise InvalidInput(f"instance {d} out of range")
    mean = float(np.mean(est_loads)) if mean_load is None else float(mean_load)
    lmax = (1.0 + theta_max) * mean
    need = int(est_loads[d]) + k.cost
    if fits(need, lmax):
        return AdjustResult(AdjustKind.ACCEPT)
    pool = sorted((a for a in assigned if 0 < a.cost < k.cost), key=lambda a: a.sort_key(psi))
    taken = []
    for a in pool:
        taken.append(a.key)
        need -= a.cost
        if fits(need, lmax):
            return AdjustResult(AdjustKind.EXCHANGE, tuple(taken))
    return AdjustResult(AdjustKind.REJECT)


@dataclass(eq=False)
class Placement:
    """Result of one LLFD run over a snapshot."""

    dest: np.ndarray
    loads: np.ndarray
    table: RoutingTable
    iterations: int
    exchanges: int = 0
    fallbacks: int = 0


@dataclass(eq=False)
class BalanceOutcome:
    new_table: RoutingTable
    plan: MigrationPlan
    achieved_theta: float
    loads: np.ndarray
    iterations: int = 0
    back_moves_n: int = 0
    capacity_ok: bool = True
    algorithm: str = ""
    fallbacks: int = 0

    @property
    def overload_ratio(self) -> float:
        """``max L / mean - 1``; the one-sided imbalance."""
        mean = float(np.mean(self.loads))
        return float(np.max(self.loads)) / mean - 1.0 if mean > 0 else 0.0

    @property
    def table_size(self) -> int:
        return len(self.new_table)

    @property
    def migration_cost(self) -> int:
        return self.plan.cost


class _State:
    """Mutable working copy of one rebalance invocation."""

    def __init__(self, snap: WorkloadSnapshot, f: AssignmentFunction, window=None):
        self.snap = snap
        self.n = f.n_downstream
        self.keys = snap.keys
        self.cost = snap.cost
        self.mem = snap.windowed_mem if window is None else snap.windowed(window)
        self.hashed = hash_keys(snap.keys, self.n)
        self.orig = f.assign(snap.keys)
        self.dest = self.orig.copy()
        self.f = f
        total = int(self.cost.sum())
        self.mean = total / self.n
        self.loads = np.zeros(self.n, dtype=np.int64)

    def lmax(self, theta_max: float) -> float:
        return (1.0 + theta_max) * self.mean

    def recompute(self):
        placed = self.dest >= 0
        self.loads = _kernels.instance_loads(self.dest[placed], self.cost[placed], self.n)

    def psi_key(self, i: int, psi: SelectionCriterion) -> tuple:
        return psi.sort_key(self.cost[i], self.mem[i], self.orig[i], self.hashed[i])

    def ordered(self, idx: np.ndarray, psi: SelectionCriterion) -> np.ndarray:
        o = psi.order(self.cost[idx], self.mem[idx], self.orig[idx], self.hashed[idx], self.keys[idx])
        return idx[o]


def _move_back(st: _State, n_back: int, eta: SelectionCriterion) -> int:
    """Send the first ``n_back`` table keys (eta order) back to their hash instance."""
    entries = np.flatnonzero(st.orig != st.hashed)
    if n_back <= 0 or entries.size == 0:
        return 0
    chosen = st.ordered(entries, eta)[:n_back]
    st.dest[chosen] = st.hashed[chosen]
    return int(chosen.size)


def _strip_overloaded(st: _State, lmax: float, psi: SelectionCriterion) -> list:
    """Phase II: remove keys from each overloaded instance until it fits."""
    out = []
    for d in range(st.n):
        if fits(st.loads[d], lmax):
            continue
        on_d = np.flatnonzero((st.dest == d) & (st.cost > 0))
        order = st.ordered(on_d, psi)
        excess = st.loads[d]
        cs = excess - np.cumsum(st.cost[order])
        ok = cs <= lmax + FIT_EPS * abs(lmax)
        stop = int(np.argmax(ok)) + 1 if ok.any() else len(order)
        taken = order[:stop]
        st.dest[taken] = -1
        st.loads[d] -= int(st.cost[taken].sum())
        out.extend(int(i) for i in taken)
    return out


def _llfd(st: _State, candidates, theta_max: float, psi: SelectionCriterion) -> tuple:
    lmax = st.lmax(theta_max)
    heap = [(-int(st.cost[i]),) + st.psi_key(i, psi) + (int(st.keys[i]), i) for i in candidates]
    heapq.heapify(heap)
    cap = ITERATION_FACTOR * max(len(st.keys), 1)
    iterations = exchanges = fallbacks = 0
    while heap:
        item = heapq.heappop(heap)
        i = item[-1]
        c = int(st.cost[i])
        order = sorted(range(st.n), key=lambda d: (int(st.loads[d]), d))
        placed = False
        for d in order:
            iterations += 1
            if iterations > cap:
                raise NonTermination(f"llfd exceeded {cap} adjust calls")
            need = int(st.loads[d]) + c
            if fits(need, lmax):
                placed = True
            else:
                pool = np.flatnonzero((st.dest == d) & (st.cost > 0) & (st.cost < c))
                if pool.size == 0:
                    continue
                pool = st.ordered(pool, psi)
                left = need - np.cumsum(st.cost[pool])
                ok = left <= lmax + FIT_EPS * abs(lmax)
                if not ok.any():
                    continue
                ex = pool[: int(np.argmax(ok)) + 1]
                st.dest[ex] = -1
                st.loads[d] -= int(st.cost[ex].sum())
                for j in ex:
                    j = int(j)
                    heapq.heappush(heap, (-int(st.cost[j]),) + st.psi_key(j, psi) + (int(st.keys[j]), j))
                exchanges += 1
                placed = True
            if placed:
                st.dest[i] = d
                st.loads[d] += c
                break
        if not placed:
            # nothing fits anywhere: least-loaded instance takes the overflow
            d = order[0]
            st.dest[i] = d
            st.loads[d] += c
            fallbacks += 1
    return iterations, exchanges, fallbacks


def derive_table(keys: np.ndarray, dest: np.ndarray, hashed: np.ndarray, f: AssignmentFunction,
                 capacity=None) -> RoutingTable:
    """Canonical table realising ``dest``; entries for keys outside ``keys`` are carried over."""
    table = RoutingTable.from_assignment(keys, dest, hashed, capacity, f.n_downstream)
    extra = {k: v for k, v in f.table.items() if not _present(keys, k)}
    if extra:
        entries = dict(table.items())
        entries.update(extra)
        table = RoutingTable._trusted(f.n_downstream, entries, capacity)
    return table


def _table_for(st: _State, capacity=None) -> RoutingTable:
    return derive_table(st.keys, st.dest, st.hashed, st.f, capacity)


def _present(keys: np.ndarray, k: int) -> bool:
    pos = int(np.searchsorted(keys, np.uint64(k)))
    return pos < len(keys) and int(keys[pos]) == k


def _outcome(st: _State, iterations=0, back=0, name="", fallbacks=0, capacity=None) -> BalanceOutcome:
    table = _table_for(st, capacity)
    moved = np.flatnonzero(st.dest != st.orig)
    delta = frozenset(int(k) for k in st.keys[moved])
    cost = int(st.mem[moved].sum())
    mean = st.mean
    theta = float(np.max(np.abs(st.loads - mean)) / mean) if mean > 0 else 0.0
    return BalanceOutcome(
        new_table=table,
        plan=MigrationPlan(delta, table, cost),
        achieved_theta=theta,
        loads=st.loads.copy(),
        iterations=iterations,
        back_moves_n=back,
        capacity_ok=capacity is None or len(table) <= capacity,
        algorithm=name,
        fallbacks=fallbacks,
    )


def rebalance(f: AssignmentFunction, snap: WorkloadSnapshot, theta_max: float,
              psi: SelectionCriterion, n_back: int = 0, eta: SelectionCriterion = SMALLEST_MEMORY,
              window=None, capacity=None, name="rebalance") -> BalanceOutcome:
    """Generic three-phase driver; ``n_back`` table keys are moved back first."""
    if theta_max < 0:
        raise InvalidInput("theta_max must be >= 0")
    st = _State(snap, f, window)
    back = _move_back(st, n_back, eta)
    st.recompute()
    cands = _strip_overloaded(st, st.lmax(theta_max), psi)
    it, _, fb = _llfd(st, cands, theta_max, psi)
    return _outcome(st, it, back, name, fb, capacity)


def llfd(snap: WorkloadSnapshot, f: AssignmentFunction, candidates, theta_max: float,
         psi: SelectionCriterion = HIGHEST_COST, mean_load: float | None = None) -> Placement:
    """Place ``candidates`` (key ids, disassociated from ``f``) with LLFD.

    The remaining keys stay where ``f`` sends them.  ``mean_load`` overrides
    the snapshot mean used for ``L_max``.
    """
    st = _State(snap, f)
    if mean_load is not None:
        st.mean = float(mean_load)
    idx = [int(i) for i in snap.positions(list(candidates))] if len(candidates) else []
    st.dest[idx] = -1
    st.recompute()
    it, ex, fb = _llfd(st, idx, theta_max, psi)
    return Placement(st.dest, st.loads, _table_for(st), it, ex, fb)


def simple(snap: WorkloadSnapshot, n_downstream: int) -> np.ndarray:
    """Greedy longest-processing-time placement from scratch; returns destinations."""
    if n_downstream < 1:
        raise InvalidInput("n_downstream must be >= 1")
    dest = np.empty(len(snap), dtype=np.int64)
    heap = [(0, d) for d in range(n_downstream)]
    for i in np.lexsort((snap.keys, -snap.cost)):
        load, d = heapq.heappop(heap)
        dest[i] = d
        heapq.heappush(heap, (load + int(snap.cost[i]), d))
    return dest


def min_table(f: AssignmentFunction, snap: WorkloadSnapshot, theta_max: float,
              window=None, capacity=None) -> BalanceOutcome:
    n_a = len(f.table)
    return rebalance(f, snap, theta_max, HIGHEST_COST, n_back=n_a, window=window,
                     capacity=capacity, name="min_table")


def min_mig(f: AssignmentFunction, snap: WorkloadSnapshot, theta_max: float,
            beta: float = 1.5, w=None, capacity=None) -> BalanceOutcome:
    return rebalance(f, snap, theta_max, SelectionCriterion.largest_gamma(beta), window=w,
                     capacity=capacity, name="min_mig")


def _table_keys_present(f: AssignmentFunction, snap: WorkloadSnapshot) -> int:
    if not len(f.table):
        return 0
    tk = np.fromiter(f.table.keys(), dtype=np.uint64, count=len(f.table))
    pos = np.searchsorted(snap.keys, tk)
    ok = pos < len(snap)
    ok[ok] = snap.keys[pos[ok]] == tk[ok]
    return int(ok.sum())


def mixed(f: AssignmentFunction, snap: WorkloadSnapshot, theta_max: float, beta: float = 1.5,
          w=None, table_capacity: int = 3000) -> BalanceOutcome:
    """Move back the fewest smallest-memory entries that keep the table within capacity.

    Raises :class:`CapacityInfeasible` carrying the MinTable outcome when even
    a full move-back overflows the table.
    """
    if table_capacity < 0:
        raise InvalidInput("table_capacity must be >= 0")
    psi = SelectionCriterion.largest_gamma(beta)
    n_a = _table_keys_present(f, snap)
    n = 0
    while True:
        out = rebalance(f, snap, theta_max, psi, n_back=n, window=w, capacity=table_capacity,
                        name="mixed")
        size = len(out.new_table)
        if size <= table_capacity:
            return out
        if n >= n_a:
            break
        n = min(n_a, n + size - table_capacity)
    fallback = min_table(f, snap, theta_max, window=w, capacity=table_capacity)
    fallback.algorithm = "mixed"
    raise CapacityInfeasible(
        f"table needs {size} entries after moving back all {n_a}; capacity is {table_capacity}",
        outcome=fallback,
    )


def mixed_bf(f: AssignmentFunction, snap: WorkloadSnapshot, theta_max: float, beta: float = 1.5,
             w=None, table_capacity: int = 3000) -> BalanceOutcome:
    """Exhaustive search over the move-back count."""
    if table_capacity < 0:
        raise InvalidInput("table_capacity must be >= 0")
    psi = SelectionCriterion.largest_gamma(beta)
    best = None
    for n in range(_table_keys_present(f, snap) + 1):
        out = rebalance(f, snap, theta_max, psi, n_back=n, window=w, capacity=table_capacity,
                        name="mixed_bf")
        if len(out.new_table) > table_capacity:
            continue
        rank = (out.plan.cost, n, len(out.new_table))
        if best is None or rank < best[0]:
            best = (rank, out)
    if best is None:
        fallback = min_table(f, snap, theta_max, window=w, capacity=table_capacity)
        fallback.algorithm = "mixed_bf"
        raise CapacityInfeasible("no move-back count fits the table capacity", outcome=fallback)
    return best[1]


def hash_only(f: AssignmentFunction, snap: WorkloadSnapshot, theta_max: float = 0.0, **_) -> BalanceOutcome:
    """Baseline that never touches the table."""
    st = _State(snap, f)
    st.recompute()
    return _outcome(st, name="hash_only")


ALGORITHMS = {
    "mixed": mixed,
    "min_table": min_table,
    "min_mig": min_mig,
    "mixed_bf": mixed_bf,
    "hash_only": hash_only,
}
