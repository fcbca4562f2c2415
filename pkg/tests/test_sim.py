import numpy as np
import pytest

from rebalance_lab import sim
from rebalance_lab.core import AssignmentFunction, TopologyConfig, WorkloadSnapshot, migration_cost
from rebalance_lab.errors import InvalidInput
from rebalance_lab.golden import keys_with_hashes, two_instance_example
from rebalance_lab.sim import STEP_ORDER, Simulator, Step, trigger
from rebalance_lab.workload import GeneratorConfig


def _two_loads(a, b):
    k = keys_with_hashes([0, 1], 2)
    return WorkloadSnapshot.from_costs({k[0]: a, k[1]: b}), AssignmentFunction.hash_only(2)


def test_trigger_examples():
    snap, f, _ = two_instance_example()
    assert trigger(snap, f, 0.08)
    s, g = _two_loads(5, 5)
    assert not trigger(s, g, 0.0)
    s, g = _two_loads(11, 9)
    assert not trigger(s, g, 0.1)
    assert trigger(s, g, 0.0999)


def _fig3_sim(planner, **kw):
    snap, f, _ = two_instance_example()
    topo = TopologyConfig(n_upstream=2, n_downstream=2, theta_max=0.0, table_capacity=2)
    return Simulator(topo, GeneratorConfig(), planner=planner, initial=f, **kw), snap, f


@pytest.mark.parametrize("planner", ["full", "compact"])
def test_fig3_episode(planner):
    s, snap, f = _fig3_sim(planner)
    row = s.step(snap)
    assert row.rebalanced
    assert row.max_load_ratio == 1.0
    assert row.table_size <= 2
    assert s.result.episodes == 1
    assert all(v == 0 for v in s.result.violations.values())
    owner = s.f.assign(snap.keys)
    for d, ds in enumerate(s.downstream):
        assert set(ds.owned_states) == set(snap.keys[owner == d].tolist())
    plan = s.result.events[1].detail
    moved = {int(k) for k, a, b in zip(snap.keys, f.assign(snap.keys), owner) if a != b}
    assert plan["delta"] == len(moved)
    assert plan["cost"] == migration_cost(moved, snap)


def test_no_trigger_no_episode():
    snap, f = _two_loads(5, 5)
    s = Simulator(TopologyConfig(n_downstream=2), GeneratorConfig(), initial=f)
    row = s.step(snap)
    assert not row.rebalanced
    assert s.result.events == []


def test_delivery_semantics_during_episode():
    s, snap, f = _fig3_sim("full", traffic=0)
    seen = {}

    def hook(ev, simr):
        if ev.step is Step.PAUSE_BROADCAST:
            paused = sorted(simr.upstream[0].paused_keys)
            other = [int(k) for k in snap.keys if int(k) not in simr.upstream[0].paused_keys]
            seen["paused"] = simr.deliver(paused[0], 0)
            seen["free"] = simr.deliver(other[0], 1)
            seen["free_key"] = other[0]

    s.on_event = hook
    s.step(snap)
    assert seen["paused"].buffered
    assert not seen["free"].buffered
    assert seen["free"].instance == s.f(seen["free_key"])
    for k in snap.keys.tolist():
        d = s.deliver(k, 0)
        assert not d.buffered and d.instance == s.f(k)
    assert s.result.violations["paused_delivery"] == 0
    assert s.result.violations["misrouted"] == 0


def test_zero_fluctuation_balanced_start_has_no_episodes():
    topo = TopologyConfig(n_downstream=4, theta_max=0.5)
    gen = GeneratorConfig(key_count=2000, skew=0.0, fluctuation=0.0, tuples_per_interval=200_000)
    res = sim.run(topo, gen, 10)
    assert res.episodes == 0
    assert len(res.metrics) == 10


def test_run_is_deterministic():
    topo = TopologyConfig(seed=3)
    gen = GeneratorConfig(key_count=1500, seed=3)
    a = sim.run(topo, gen, 6, timing=False)
    b = sim.run(topo, gen, 6, timing=False)
    assert sim.metrics_rows(a) == sim.metrics_rows(b)
    assert a.events_ndjson() == b.events_ndjson()


def test_episode_event_order_and_bounds():
    topo = TopologyConfig(seed=1)
    gen = GeneratorConfig(key_count=2000, seed=1)
    res = sim.run(topo, gen, 12)
    assert res.episodes > 0
    by_ep = {}
    for ev in res.events:
        by_ep.setdefault(ev.episode, []).append(ev)
    assert len(by_ep) == res.episodes
    for evs in by_ep.values():
        order = [STEP_ORDER[e.step] for e in evs]
        assert order == sorted(order)
        assert evs[0].step is Step.REPORT and evs[-1].step is Step.RESUME
        assert sum(e.step is Step.ACK for e in evs) == topo.n_downstream
    for m in res.metrics:
        if m.rebalanced:
            assert m.max_load_ratio <= 1 + topo.theta_max + 1e-9
    assert all(v == 0 for v in res.violations.values())


def test_simulator_rejects_unknown_names():
    with pytest.raises(InvalidInput):
        Simulator(TopologyConfig(), GeneratorConfig(), algorithm="nope")
    with pytest.raises(InvalidInput):
        Simulator(TopologyConfig(), GeneratorConfig(), planner="nope")
    with pytest.raises(InvalidInput):
        Simulator(TopologyConfig(n_downstream=3), GeneratorConfig(), initial=AssignmentFunction.hash_only(2))


def test_event_json_roundtrip():
    import json
    s, snap, _ = _fig3_sim("full")
    s.step(snap)
    lines = s.result.events_ndjson().splitlines()
    assert [json.loads(x)["step"] for x in lines][0] == "Report"
    assert np.all([json.loads(x)["episode"] == 0 for x in lines])
