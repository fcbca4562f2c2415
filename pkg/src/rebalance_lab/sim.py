"""Discrete-event simulation of the controller's rebalance protocol.

Each interval the controller looks at the reported statistics and, if some
instance is out of balance, runs one episode::

    Report -> Plan -> NotifyDownstream -> PauseBroadcast -> Migrate* -> Ack* -> Resume

Upstream routers share one assignment view that is swapped at PauseBroadcast;
tuples of migrating keys are cached upstream until Resume.  The simulator is
single threaded, and it audits state ownership after every event.
"""
from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import balance, compact
from .core import (
    AssignmentFunction,
    MigrationPlan,
    TopologyConfig,
    WorkloadSnapshot,
    evaluate,
    indicators_from_loads,
    loads as instance_loads,
)
from .errors import CapacityInfeasible, InvalidInput, ZeroTotalLoad
from .workload import GeneratorConfig, fluctuate, zipf_interval


class Step(str, Enum):
    REPORT = "Report"
    PLAN = "Plan"
    NOTIFY_DOWNSTREAM = "NotifyDownstream"
    PAUSE_BROADCAST = "PauseBroadcast"
    MIGRATE = "Migrate"
    ACK = "Ack"
    RESUME = "Resume"


STEP_ORDER = {s: i for i, s in enumerate(Step)}


@dataclass
class ProtocolEvent:
    episode: int
    step: Step
    interval: int
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"episode": self.episode, "step": self.step.value,
                           "interval": self.interval, "detail": self.detail}, sort_keys=True)


@dataclass
class UpstreamState:
    instance: int
    assignment_view: AssignmentFunction
    paused_keys: frozenset = frozenset()
    cache: deque = field(default_factory=deque)


@dataclass
class DownstreamState:
    instance: int
    owned_states: dict = field(default_factory=dict)
    acked: bool = False


@dataclass
class IntervalMetrics:
    interval: int
    max_load_ratio: float
    migration_cost_pct: float
    table_size: int
    plan_micros: int
    rebalanced: bool


METRIC_COLUMNS = ("interval", "max_load_ratio", "migration_cost_pct", "table_size",
                  "plan_micros", "rebalanced")


@dataclass
class Delivery:
    buffered: bool
    instance: int | None = None


@dataclass
class RunResult:
    metrics: list
    events: list
    episodes: int = 0
    infeasible: int = 0
    repairs: int = 0
    deliveries: int = 0
    buffered: int = 0
    violations: dict = field(default_factory=lambda: {
        "paused_delivery": 0, "ownership": 0, "conservation": 0, "misrouted": 0, "order": 0,
    })

    def events_ndjson(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


def trigger(snap: WorkloadSnapshot, f: AssignmentFunction, theta_max: float) -> bool:
    """True iff some instance's balance indicator is strictly above ``theta_max``."""
    try:
        theta = indicators_from_loads(instance_loads(f, snap))
    except ZeroTotalLoad:
        return False
    return bool((theta > theta_max).any())


def plan_full(algorithm: str, f: AssignmentFunction, snap: WorkloadSnapshot, topo: TopologyConfig):
    """Key-level plan; returns (outcome, infeasible flag)."""
    try:
        if algorithm == "min_table":
            out = balance.min_table(f, snap, topo.theta_max, capacity=topo.table_capacity)
        elif algorithm == "min_mig":
            out = balance.min_mig(f, snap, topo.theta_max, topo.beta, capacity=topo.table_capacity)
        elif algorithm in ("mixed", "mixed_bf"):
            out = balance.ALGORITHMS[algorithm](f, snap, topo.theta_max, topo.beta,
                                                table_capacity=topo.table_capacity)
        else:
            raise InvalidInput(f"unknown algorithm {algorithm!r}")
        return out.plan, False
    except CapacityInfeasible as e:
        return e.outcome.plan, True


def plan_compact(algorithm: str, f: AssignmentFunction, snap: WorkloadSnapshot, topo: TopologyConfig):
    """Plan over compact records with exponent ``topo.r``, then expand to keys."""
    space = compact.compress(snap, f, r=topo.r)
    fn = compact.COMPACT_ALGORITHMS.get(algorithm)
    if fn is None:
        raise InvalidInput(f"unknown algorithm {algorithm!r}")
    try:
        out = fn(space, topo.theta_max, topo.beta, None, topo.table_capacity)
        infeasible = False
    except CapacityInfeasible as e:
        out, infeasible = e.outcome, True
    return compact.expand(out, snap, f), infeasible


def _repair(plan: MigrationPlan, algorithm, f, snap, topo):
    """Key-level clean-up when the discretized plan leaves a true overload.

    Runs the same algorithm on the exact statistics, starting from the
    compact plan's table, so table capacity is still honoured.
    """
    f2 = AssignmentFunction(plan.new_table)
    L = instance_loads(f2, snap)
    lmax = (1.0 + topo.theta_max) * float(L.sum()) / len(L)
    if balance.fits(int(L.max()), lmax):
        return plan, False, False
    fixed, infeasible = plan_full(algorithm, f2, snap, topo)
    new = AssignmentFunction(fixed.new_table)
    a, b = f.assign(snap.keys), new.assign(snap.keys)
    moved = np.flatnonzero(a != b)
    plan = MigrationPlan(frozenset(int(k) for k in snap.keys[moved]), fixed.new_table,
                         int(snap.windowed_mem[moved].sum()))
    return plan, True, infeasible


class Simulator:
    """One topology driven by one workload generator."""

    def __init__(self, topo: TopologyConfig, gen: GeneratorConfig, algorithm: str = "mixed",
                 planner: str = "compact", timing: bool = True, traffic: int = 32,
                 audit: bool = True, on_event=None, initial: AssignmentFunction | None = None):
        if algorithm not in balance.ALGORITHMS:
            raise InvalidInput(f"unknown algorithm {algorithm!r}")
        if planner not in ("compact", "full"):
            raise InvalidInput(f"unknown planner {planner!r}")
        self.topo = topo
        self.gen = gen
        self.algorithm = algorithm
        self.planner = planner
        self.timing = timing
        self.traffic = traffic
        self.audit_enabled = audit
        self.on_event = on_event
        self.f = initial if initial is not None else \
            AssignmentFunction.hash_only(topo.n_downstream, topo.table_capacity)
        if self.f.n_downstream != topo.n_downstream:
            raise InvalidInput("initial assignment disagrees with n_downstream")
        self.upstream = [UpstreamState(u, self.f) for u in range(topo.n_upstream)]
        self.downstream = [DownstreamState(d) for d in range(topo.n_downstream)]
        self.snap = None
        self.owner = None
        self.result = RunResult([], [])
        self.rng = np.random.default_rng([topo.seed, 0x73696D])
        self._episode = 0
        self._seq = 0
        self._pause_window = frozenset()

    # -- state ---------------------------------------------------------------

    def _load_snapshot(self, snap: WorkloadSnapshot):
        self.snap = snap
        if self.owner is None:
            self.owner = self.f.assign(snap.keys)
        mem = snap.windowed_mem
        for ds in self.downstream:
            pos = np.flatnonzero(self.owner == ds.instance)
            ds.owned_states = dict(zip(snap.keys[pos].tolist(), mem[pos].tolist()))

    def owned_memory(self) -> int:
        return sum(sum(ds.owned_states.values()) for ds in self.downstream)

    def audit(self) -> bool:
        """Every key of the snapshot has exactly one owner."""
        if not self.audit_enabled:
            return True
        total = sum(len(ds.owned_states) for ds in self.downstream)
        union = set()
        for ds in self.downstream:
            union.update(ds.owned_states)
        ok = total == len(self.snap) == len(union)
        if not ok:
            self.result.violations["ownership"] += 1
        return ok

    def _emit(self, step: Step, interval: int, **detail):
        ev = ProtocolEvent(self._episode, step, interval, detail)
        self.result.events.append(ev)
        self.audit()
        if self.on_event is not None:
            self.on_event(ev, self)

    # -- data path -------------------------------------------------------------

    def deliver(self, key: int, upstream: int = 0) -> Delivery:
        up = self.upstream[upstream]
        if key in up.paused_keys:
            self._seq += 1
            up.cache.append((key, self._seq))
            self.result.buffered += 1
            return Delivery(True)
        d = evaluate(up.assignment_view, key)
        self._record_delivery(key, d)
        return Delivery(False, d)

    def _record_delivery(self, key, d):
        self.result.deliveries += 1
        if key in self._pause_window:
            self.result.violations["paused_delivery"] += 1
        if key not in self.downstream[d].owned_states:
            self.result.violations["misrouted"] += 1

    def _traffic(self, delta_keys: np.ndarray):
        if self.traffic <= 0 or len(self.snap) == 0:
            return
        n = self.traffic
        freq = self.snap.frequency.astype(np.float64)
        p = freq / freq.sum() if freq.sum() > 0 else None
        picks = self.snap.keys[self.rng.choice(len(self.snap), n, p=p)]
        if delta_keys.size:
            picks = np.concatenate([picks, self.rng.choice(delta_keys, n)])
        ups = self.rng.integers(0, len(self.upstream), picks.size)
        for k, u in zip(picks.tolist(), ups.tolist()):
            self.deliver(k, u)

    # -- protocol --------------------------------------------------------------

    def _plan(self, snap):
        if self.planner == "full":
            plan, infeasible = plan_full(self.algorithm, self.f, snap, self.topo)
            repaired = False
        else:
            plan, infeasible = plan_compact(self.algorithm, self.f, snap, self.topo)
            plan, repaired, still = _repair(plan, self.algorithm, self.f, snap, self.topo)
            infeasible = still if repaired else infeasible
        return plan, infeasible, repaired

    def rebalance_episode(self, snap: WorkloadSnapshot):
        """Run steps 1-7; returns (events, plan, plan_micros)."""
        start = len(self.result.events)
        i = snap.interval
        self._emit(Step.REPORT, i, keys=len(snap))

        t0 = time.perf_counter_ns()
        plan, infeasible, repaired = self._plan(snap)
        micros = (time.perf_counter_ns() - t0) // 1000 if self.timing else 0
        self.result.infeasible += int(infeasible)
        self.result.repairs += int(repaired)
        new_f = AssignmentFunction(plan.new_table)
        delta = np.array(sorted(plan.delta), dtype=np.uint64)
        self._emit(Step.PLAN, i, delta=len(delta), cost=plan.cost, table=len(plan.new_table),
                   infeasible=infeasible)

        for ds in self.downstream:
            ds.acked = False
        self._emit(Step.NOTIFY_DOWNSTREAM, i, instances=len(self.downstream))

        before = self.owned_memory()
        self._pause_window = frozenset(delta.tolist())
        for up in self.upstream:
            up.assignment_view = new_f
            up.paused_keys = self._pause_window
        self.f = new_f
        self._emit(Step.PAUSE_BROADCAST, i, paused=len(delta))
        self._traffic(delta)

        migrated = 0
        if delta.size:
            pos = self.snap.positions(delta)
            src = self.owner[pos]
            dst = new_f.assign(delta)
            for s in np.unique(src).tolist():
                sel = np.flatnonzero(src == s)
                ds_src = self.downstream[s]
                for j in sel.tolist():
                    k = int(delta[j])
                    m = ds_src.owned_states.pop(k)
                    self.downstream[int(dst[j])].owned_states[k] = m
                    migrated += m
                self.owner[pos[sel]] = dst[sel]
                self._emit(Step.MIGRATE, i, source=s, keys=len(sel))
                self._traffic(delta)

        for ds in self.downstream:
            ds.acked = True
            self._emit(Step.ACK, i, instance=ds.instance)

        self._pause_window = frozenset()
        flushed = 0
        for up in self.upstream:
            up.paused_keys = frozenset()
            last = -1
            while up.cache:
                k, seq = up.cache.popleft()
                if seq < last:
                    self.result.violations["order"] += 1
                last = seq
                self._record_delivery(k, self.f(k))
                flushed += 1
        self._emit(Step.RESUME, i, flushed=flushed)

        if self.owned_memory() != before or migrated != plan.cost:
            self.result.violations["conservation"] += 1
        self.result.episodes += 1
        self._episode += 1
        return self.result.events[start:], plan, micros

    def step(self, snap: WorkloadSnapshot) -> IntervalMetrics:
        self._load_snapshot(snap)
        rebalanced = False
        cost = 0
        micros = 0
        if self.algorithm != "hash_only" and trigger(snap, self.f, self.topo.theta_max):
            _, plan, micros = self.rebalance_episode(snap)
            cost = plan.cost
            rebalanced = True
        L = instance_loads(self.f, snap)
        mean = float(L.mean())
        total_mem = snap.total_mem
        row = IntervalMetrics(
            interval=snap.interval,
            max_load_ratio=float(L.max()) / mean if mean > 0 else 1.0,
            migration_cost_pct=100.0 * cost / total_mem if total_mem else 0.0,
            table_size=len(self.f.table),
            plan_micros=int(micros),
            rebalanced=rebalanced,
        )
        self.result.metrics.append(row)
        return row

    def run(self, n_intervals: int) -> RunResult:
        if n_intervals < 1:
            raise InvalidInput("n_intervals must be >= 1")
        snap = zipf_interval(self.gen, 0)
        self.step(snap)
        for _ in range(n_intervals - 1):
            snap = fluctuate(snap, self.gen.fluctuation, self.f, self.gen.seed,
                             window=self.topo.window)
            self.step(snap)
        return self.result


def run(topo: TopologyConfig, gen: GeneratorConfig, n_intervals: int, algorithm: str = "mixed",
        planner: str = "compact", **kw) -> RunResult:
    return Simulator(topo, gen, algorithm, planner, **kw).run(n_intervals)


def metrics_rows(result: RunResult) -> list:
    return [asdict(m) for m in result.metrics]
