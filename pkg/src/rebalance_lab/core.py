"""Domain model: keys, snapshots, routing tables and the workload metrics.

Keys are unsigned 64-bit integers and instances are plain ints in
``[0, n_downstream)``.  A :class:`WorkloadSnapshot` stores per-key statistics as
parallel numpy arrays sorted by key id, which is what every algorithm in the
package iterates over.
"""
from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .errors import InvalidInput, NonCanonicalEntry, UnknownKey, ZeroTotalLoad

KeyId = int
InstanceId = int

_MASK = (1 << 64) - 1


def _mix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def hash_key(key: KeyId, n_downstream: int) -> InstanceId:
    """Deterministic splitmix64 finalizer reduced modulo ``n_downstream``."""
    if n_downstream < 1:
        raise InvalidInput("n_downstream must be >= 1")
    if not 0 <= key <= _MASK:
        raise InvalidInput(f"key {key} is not a 64-bit unsigned id")
    return _mix64(key) % n_downstream


def hash_keys(keys: np.ndarray, n_downstream: int) -> np.ndarray:
    """Vectorised :func:`hash_key` over a uint64 array."""
    if n_downstream < 1:
        raise InvalidInput("n_downstream must be >= 1")
    return _kernels.hash_mod(np.ascontiguousarray(keys, dtype=np.uint64), n_downstream)


@dataclass(frozen=True)
class TopologyConfig:
    n_upstream: int = 10
    n_downstream: int = 15
    window: int = 5
    theta_max: float = 0.08
    table_capacity: int = 3000
    beta: float = 1.5
    r: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_upstream < 1:
            raise InvalidInput("n_upstream must be >= 1")
        if self.n_downstream < 1:
            raise InvalidInput("n_downstream must be >= 1")
        if self.window < 1:
            raise InvalidInput("window must be >= 1")
        if self.theta_max < 0:
            raise InvalidInput("theta_max must be >= 0")
        if self.table_capacity < 0:
            raise InvalidInput("table_capacity must be >= 0")
        if self.beta < 0:
            raise InvalidInput("beta must be >= 0")
        if self.r < 0:
            raise InvalidInput("r must be >= 0")

    @property
    def level_base(self) -> int:
        return 1 << self.r


@dataclass(frozen=True)
class KeyIntervalStats:
    key: KeyId
    frequency: int
    cost: int
    mem_history: tuple[int, ...] = ()

    def __post_init__(self):
        if self.cost < 0 or self.frequency < 0 or any(m < 0 for m in self.mem_history):
            raise InvalidInput(f"negative statistic for key {self.key}")

    def windowed_mem(self, window: int | None = None) -> int:
        hist = self.mem_history if window is None else self.mem_history[-window:]
        return int(sum(hist))


@dataclass(frozen=True, eq=False)
class WorkloadSnapshot:
    """Per-key statistics for one interval, as arrays aligned on ``keys``.

    ``mem_history`` has one column per retained interval, oldest first; every
    key in a snapshot shares the same history depth.
    """

    interval: int
    keys: np.ndarray
    frequency: np.ndarray
    cost: np.ndarray
    mem_history: np.ndarray

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.uint64)
        n = keys.shape[0]
        hist = np.asarray(self.mem_history, dtype=np.int64)
        if hist.ndim == 1:
            hist = hist.reshape(n, 1 if n else 0)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "frequency", np.ascontiguousarray(self.frequency, dtype=np.int64))
        object.__setattr__(self, "cost", np.ascontiguousarray(self.cost, dtype=np.int64))
        object.__setattr__(self, "mem_history", np.ascontiguousarray(hist))
        if self.interval < 0:
            raise InvalidInput("interval must be >= 0")
        if self.frequency.shape != (n,) or self.cost.shape != (n,) or self.mem_history.shape[0] != n:
            raise InvalidInput("snapshot arrays are misaligned")
        if n > 1 and not np.all(keys[1:] > keys[:-1]):
            raise InvalidInput("snapshot keys must be distinct and sorted")
        if (self.cost < 0).any() or (self.frequency < 0).any() or (self.mem_history < 0).any():
            raise InvalidInput("snapshot statistics must be non-negative")

    @classmethod
    def from_stats(cls, interval: int, stats: Iterable[KeyIntervalStats],
                   window: int | None = None) -> "WorkloadSnapshot":
        rows = sorted(stats, key=lambda s: s.key)
        seen = set()
        for s in rows:
            if s.key in seen:
                raise InvalidInput(f"duplicate key {s.key}")
            seen.add(s.key)
        hists = [s.mem_history if window is None else s.mem_history[-window:] for s in rows]
        depth = max((len(h) for h in hists), default=0)
        hist = np.zeros((len(rows), depth), dtype=np.int64)
        for i, h in enumerate(hists):
            if h:
                hist[i, depth - len(h):] = h
        return cls(
            interval=interval,
            keys=np.array([s.key for s in rows], dtype=np.uint64),
            frequency=np.array([s.frequency for s in rows], dtype=np.int64),
            cost=np.array([s.cost for s in rows], dtype=np.int64),
            mem_history=hist,
        )

    @classmethod
    def from_costs(cls, costs: Mapping[KeyId, int], mems: Mapping[KeyId, int] | None = None,
                   interval: int = 0) -> "WorkloadSnapshot":
        """Shorthand for tests: one-interval history with ``S = mems.get(k, c)``."""
        mems = mems if mems is not None else costs
        return cls.from_stats(
            interval,
            (KeyIntervalStats(k, c, c, (mems[k],)) for k, c in costs.items()),
        )

    def __len__(self) -> int:
        return int(self.keys.shape[0])

    @property
    def depth(self) -> int:
        return int(self.mem_history.shape[1])

    @cached_property
    def windowed_mem(self) -> np.ndarray:
        return self.mem_history.sum(axis=1)

    def windowed(self, window: int) -> np.ndarray:
        if window < 1:
            raise InvalidInput("window must be >= 1")
        return self.mem_history[:, -window:].sum(axis=1)

    @cached_property
    def total_cost(self) -> int:
        return int(self.cost.sum())

    @cached_property
    def total_mem(self) -> int:
        return int(self.windowed_mem.sum())

    def positions(self, keys) -> np.ndarray:
        """Array positions of ``keys``; raises :class:`UnknownKey` for strangers."""
        arr = np.asarray(list(keys) if not isinstance(keys, np.ndarray) else keys, dtype=np.uint64)
        if arr.size == 0:
            return np.zeros(0, dtype=np.int64)
        pos = np.searchsorted(self.keys, arr)
        bad = (pos >= len(self)) | (self.keys[np.minimum(pos, max(len(self) - 1, 0))] != arr)
        if len(self) == 0 or bad.any():
            missing = arr[bad] if len(self) else arr
            raise UnknownKey(int(missing[0]))
        return pos.astype(np.int64)

    def stats(self) -> dict[KeyId, KeyIntervalStats]:
        return {
            int(k): KeyIntervalStats(int(k), int(g), int(c), tuple(int(m) for m in h))
            for k, g, c, h in zip(self.keys, self.frequency, self.cost, self.mem_history)
        }


class RoutingTable(Mapping):
    """Immutable key -> instance overrides in canonical form.

    Canonical means no entry maps a key to its own hash destination; building
    a table with such an entry raises :class:`NonCanonicalEntry`, while
    :meth:`with_entry` treats it as a deletion.
    """

    __slots__ = ("_entries", "n_downstream", "capacity")

    def __init__(self, n_downstream: int, entries: Mapping[KeyId, InstanceId] | Iterable = (),
                 capacity: int | None = None):
        if n_downstream < 1:
            raise InvalidInput("n_downstream must be >= 1")
        items = dict(entries.items() if isinstance(entries, Mapping) else entries)
        for k, d in items.items():
            if not 0 <= d < n_downstream:
                raise InvalidInput(f"instance {d} out of range for key {k}")
            if hash_key(k, n_downstream) == d:
                raise NonCanonicalEntry(f"entry ({k}, {d}) duplicates the hash destination")
        self._entries = {int(k): int(d) for k, d in items.items()}
        self.n_downstream = n_downstream
        self.capacity = capacity

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self) -> Iterator[KeyId]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        return f"RoutingTable(n_downstream={self.n_downstream}, size={len(self)})"

    def __eq__(self, other):
        if isinstance(other, RoutingTable):
            return self.n_downstream == other.n_downstream and self._entries == other._entries
        return NotImplemented

    __hash__ = None

    @property
    def over_capacity(self) -> bool:
        return self.capacity is not None and len(self) > self.capacity

    def with_entry(self, key: KeyId, instance: InstanceId) -> "RoutingTable":
        entries = dict(self._entries)
        if hash_key(key, self.n_downstream) == instance:
            entries.pop(key, None)
        else:
            entries[key] = instance
        return RoutingTable(self.n_downstream, entries, self.capacity)

    def without(self, key: KeyId) -> "RoutingTable":
        entries = dict(self._entries)
        entries.pop(key, None)
        return RoutingTable(self.n_downstream, entries, self.capacity)

    @classmethod
    def _trusted(cls, n_downstream, entries, capacity=None):
        table = cls.__new__(cls)
        table._entries = entries
        table.n_downstream = n_downstream
        table.capacity = capacity
        return table

    @classmethod
    def from_assignment(cls, keys: np.ndarray, dest: np.ndarray, hashed: np.ndarray,
                        capacity: int | None = None, n_downstream: int | None = None) -> "RoutingTable":
        """Canonical table that realises ``dest`` on top of the hash ``hashed``."""
        if n_downstream is None:
            raise InvalidInput("n_downstream is required")
        moved = np.flatnonzero(dest != hashed)
        entries = {int(keys[i]): int(dest[i]) for i in moved}
        return cls._trusted(n_downstream, entries, capacity)


@dataclass(frozen=True, eq=False)
class AssignmentFunction:
    """Routing table lookup with hash fallback."""

    table: RoutingTable

    @classmethod
    def hash_only(cls, n_downstream: int, capacity: int | None = None) -> "AssignmentFunction":
        return cls(RoutingTable(n_downstream, capacity=capacity))

    @property
    def n_downstream(self) -> int:
        return self.table.n_downstream

    def __call__(self, key: KeyId) -> InstanceId:
        return evaluate(self, key)

    def assign(self, keys: np.ndarray) -> np.ndarray:
        """Destinations for a sorted uint64 key array."""
        dest = hash_keys(keys, self.n_downstream)
        if len(self.table) and len(keys):
            tk = np.fromiter(self.table.keys(), dtype=np.uint64, count=len(self.table))
            td = np.fromiter(self.table.values(), dtype=np.int64, count=len(self.table))
            pos = np.searchsorted(keys, tk)
            ok = pos < len(keys)
            ok[ok] = keys[pos[ok]] == tk[ok]
            dest[pos[ok]] = td[ok]
        return dest


@dataclass(frozen=True, eq=False)
class MigrationPlan:
    delta: frozenset
    new_table: RoutingTable
    cost: int


def evaluate(f: AssignmentFunction, key: KeyId) -> InstanceId:
    d = f.table.get(key)
    return d if d is not None else hash_key(key, f.n_downstream)


def loads(f: AssignmentFunction, snap: WorkloadSnapshot) -> np.ndarray:
    """Per-instance total cost under ``f``."""
    dest = f.assign(snap.keys)
    return _kernels.instance_loads(dest, snap.cost, f.n_downstream)


def load(d: InstanceId, f: AssignmentFunction, snap: WorkloadSnapshot) -> int:
    if not 0 <= d < f.n_downstream:
        raise InvalidInput(f"instance {d} out of range")
    return int(loads(f, snap)[d])


def indicators_from_loads(instance_loads: np.ndarray) -> np.ndarray:
    mean = float(np.mean(instance_loads)) if len(instance_loads) else 0.0
    if mean <= 0:
        raise ZeroTotalLoad("mean load is zero")
    return np.abs(instance_loads - mean) / mean


def balance_indicators(f: AssignmentFunction, snap: WorkloadSnapshot) -> np.ndarray:
    return indicators_from_loads(loads(f, snap))


def balance_indicator(d: InstanceId, f: AssignmentFunction, snap: WorkloadSnapshot) -> float:
    if not 0 <= d < f.n_downstream:
        raise InvalidInput(f"instance {d} out of range")
    return float(balance_indicators(f, snap)[d])


def max_load_ratio(instance_loads: np.ndarray) -> float:
    """max L(d) / mean L; the workload skewness metric."""
    mean = float(np.mean(instance_loads))
    if mean <= 0:
        raise ZeroTotalLoad("mean load is zero")
    return float(np.max(instance_loads)) / mean


def delta(f: AssignmentFunction, f2: AssignmentFunction, keys) -> frozenset:
    """Keys whose destination differs between ``f`` and ``f2``."""
    if f.n_downstream != f2.n_downstream:
        raise InvalidInput("assignment functions disagree on n_downstream")
    arr = np.unique(np.asarray(list(keys) if not isinstance(keys, np.ndarray) else keys,
                               dtype=np.uint64))
    if arr.size == 0:
        return frozenset()
    moved = f.assign(arr) != f2.assign(arr)
    return frozenset(int(k) for k in arr[moved])


def migration_cost(moved, snap: WorkloadSnapshot, window: int | None = None) -> int:
    """Sum of windowed state memory over ``moved``."""
    if not len(moved):
        return 0
    pos = snap.positions(sorted(moved))
    mem = snap.windowed_mem if window is None else snap.windowed(window)
    return int(mem[pos].sum())
