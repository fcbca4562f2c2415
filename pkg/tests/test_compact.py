import itertools
from collections import Counter

import numpy as np
import pytest

from rebalance_lab import balance as B
from rebalance_lab import compact as C
from rebalance_lab.core import AssignmentFunction, WorkloadSnapshot, loads
from rebalance_lab.errors import CapacityInfeasible, CountMismatch, InvalidInput, OutOfRange
from rebalance_lab.golden import HLHE_VALUES, NAIVE_BINS, keys_with_hashes

from instances import with_table


# -- levels -------------------------------------------------------------------

@pytest.mark.parametrize("x_max, r, want", [
    (8, 2, (8, 4, 2, 1)),
    (5, 0, (5, 4, 3, 2, 1)),
    (20, 3, (16, 8, 4, 2, 1)),
])
def test_build_levels_examples(x_max, r, want):
    s = C.build_levels(x_max, r)
    assert s.levels == want
    assert s.m == r + x_max // (1 << r)


def test_build_levels_shape():
    for x_max in range(1, 80):
        for r in range(0, 5):
            s = C.build_levels(x_max, r)
            lv = s.levels
            assert lv[-1] == 1
            assert all(a > b for a, b in zip(lv, lv[1:]))
            lin = lv[:s.s]
            assert all(a - b == s.R for a, b in zip(lin, lin[1:]))
            assert list(lv[s.s:]) == [1 << j for j in range(r - 1, -1, -1)]


def test_build_levels_rejects():
    with pytest.raises(InvalidInput):
        C.build_levels(0, 1)
    with pytest.raises(InvalidInput):
        C.build_levels(4, -1)


# -- discretization ---------------------------------------------------------------

def test_hlhe_golden():
    disc = C.Discretizer(C.build_levels(8, 2))
    phi = C.discretize(HLHE_VALUES, disc)
    assert phi[2] == 4
    assert disc.accumulated_deviation == 0
    assert phi.tolist() == [8, 4, 4, 2, 2, 2, 1, 1, 1, 1]


def test_naive_golden_and_statelessness():
    out = C.naive_piecewise(HLHE_VALUES, NAIVE_BINS)
    assert abs(sum(HLHE_VALUES) - int(out.sum())) == 3
    reps = [2, 5, 8, 5, 2]
    assert C.naive_piecewise(reps, NAIVE_BINS).tolist() == reps
    rev = C.naive_piecewise(HLHE_VALUES[::-1], NAIVE_BINS)
    assert rev.tolist() == out.tolist()[::-1]
    with pytest.raises(OutOfRange):
        C.naive_piecewise([10], NAIVE_BINS)


def test_exact_levels_have_no_deviation():
    s = C.build_levels(24, 3)
    disc = C.Discretizer(s)
    vals = [24, 24, 16, 8, 8, 4, 2, 1, 1]
    assert C.discretize(vals, disc).tolist() == vals
    assert disc.accumulated_deviation == 0


def test_discretize_rejects_bad_input():
    disc = C.Discretizer(C.build_levels(8, 1))
    with pytest.raises(InvalidInput):
        C.discretize([1, 2], disc)
    with pytest.raises(InvalidInput):
        C.discretize([2, 0], disc)


def test_discretize_carries_deviation_across_calls():
    s = C.build_levels(8, 2)
    a = C.Discretizer(s)
    C.discretize(HLHE_VALUES[:4], a)
    C.discretize(HLHE_VALUES[4:], a)
    b = C.Discretizer(s)
    C.discretize(HLHE_VALUES, b)
    assert a.accumulated_deviation == b.accumulated_deviation
    a.reset()
    assert a.accumulated_deviation == 0


def test_deviation_bounded_when_top_level_is_exact():
    # when no value sits above the top level the greedy choice keeps |delta| <= R
    for r in (0, 1, 2):
        big = 1 << r
        for length in range(1, 7):
            for seq in itertools.combinations_with_replacement(range(16, 0, -1), length):
                lv = C.build_levels(seq[0], r)
                if sum(x > lv.top for x in seq) > 1:
                    continue
                disc = C.Discretizer(lv)
                C.discretize(seq, disc)
                assert abs(disc.accumulated_deviation) <= big, (seq, r)


def test_levels_for_zero_and_ties():
    disc = C.Discretizer(C.build_levels(9, 0))
    out = C.levels_for(np.array([0, 3, 9, 3, 0]), disc, np.array([5, 4, 3, 2, 1]))
    assert out.tolist() == [0, 3, 9, 3, 0]


# -- compress / records -------------------------------------------------------------

def test_compress_merges_identical_keys():
    a, b = keys_with_hashes([0, 0], 2)
    snap = WorkloadSnapshot.from_costs({a: 4, b: 4}, {a: 4, b: 4})
    f = AssignmentFunction.hash_only(2)
    f = AssignmentFunction(f.table.with_entry(a, 1).with_entry(b, 1))
    sp = C.compress(snap, f, r=2)
    assert sp.records == [C.CompactRecord(1, 0, 4, 4, 1, 2)]


def test_compress_empty():
    sp = C.compress(WorkloadSnapshot.from_costs({}), AssignmentFunction.hash_only(3))
    assert len(sp) == 0 and sp.total_count == 0


def test_r0_weighted_loads_are_exact():
    rng = np.random.default_rng(3)
    for _ in range(30):
        snap, f = with_table(rng)
        sp = C.compress(snap, f, r=0)
        assert sp.weighted_loads().tolist() == loads(f, snap).tolist()
        assert sp.total_count == len(snap)


def test_space_bound():
    assert C.space_bound(1, 1, 1) == 2
    assert C.space_bound(15, 8, 8) == 230400
    rng = np.random.default_rng(6)
    for _ in range(20):
        snap, f = with_table(rng)
        sp = C.compress(snap, f, r=2)
        n_c = len(set(sp.key_cost_level.tolist()))
        n_s = len(set(sp.key_mem_level.tolist()))
        assert len(sp) <= C.space_bound(f.n_downstream, n_c, n_s)
    with pytest.raises(InvalidInput):
        C.space_bound(0, 1, 1)


def test_normalize_is_idempotent_and_merges():
    sp = C.CompactSpace(3)
    sp.add(2, 0, 1, 4, 4, 3)
    sp.add(1, 0, 1, 4, 4, 2)
    sp.mark_nil(0, 1, 4, 4, 3, 2)
    sp.mark_nil(0, 1, 4, 4, 2, 1)
    assert sp.counts == {(None, 0, 1, 4, 4): 5}
    once = sp.normalize()
    assert once.counts == once.normalize().counts == sp.counts
    with pytest.raises(CountMismatch):
        sp.mark_nil(0, 1, 4, 4, 1, 2)


def test_record_requires_positive_count():
    with pytest.raises(InvalidInput):
        C.CompactRecord(0, 0, 1, 1, 0, 0)


# -- planning over records -------------------------------------------------------------

def test_balanced_space_changes_nothing():
    k = keys_with_hashes([0, 1, 0, 1], 2)
    snap = WorkloadSnapshot.from_costs(dict(zip(k, [3, 3, 2, 2])))
    f = AssignmentFunction.hash_only(2)
    out = C.compact_mixed(C.compress(snap, f, r=0), 0.0)
    assert out.changed == 0
    assert C.expand(out, snap, f).delta == frozenset()


def test_r0_pipeline_matches_key_level_mixed():
    rng = np.random.default_rng(17)
    for _ in range(60):
        snap, f = with_table(rng)
        cap = int(rng.integers(0, len(f.table) + 5))
        try:
            ref = B.mixed(f, snap, 0.05, table_capacity=cap)
            ref_err = False
        except CapacityInfeasible as e:
            ref, ref_err = e.outcome, True
        try:
            out = C.compact_mixed(C.compress(snap, f, r=0), 0.05, table_capacity=cap)
            err = False
        except CapacityInfeasible as e:
            out, err = e.outcome, True
        assert err == ref_err
        assert all(nxt is not None for nxt, *_ in out.space.counts)
        assert out.loads.tolist() == ref.loads.tolist()
        plan = C.expand(out, snap, f)
        assert loads(AssignmentFunction(plan.new_table), snap).tolist() == ref.loads.tolist()
        assert len(plan.new_table) == ref.table_size

        def pairs(delta_keys, g):
            ks = np.array(sorted(delta_keys), dtype=np.uint64)
            if not ks.size:
                return Counter()
            return Counter(zip(f.assign(ks).tolist(), g.assign(ks).tolist()))
        assert pairs(plan.delta, AssignmentFunction(plan.new_table)) == \
            pairs(ref.plan.delta, AssignmentFunction(ref.new_table))


def test_expand_move_back_deletes_entries():
    a, b = keys_with_hashes([0, 0], 2)
    snap = WorkloadSnapshot.from_costs({a: 4, b: 4}, {a: 4, b: 4})
    f = AssignmentFunction(AssignmentFunction.hash_only(2).table.with_entry(a, 1).with_entry(b, 1))
    sp = C.compress(snap, f, r=2)
    moved = C.CompactSpace(2, key_cost_level=sp.key_cost_level, key_mem_level=sp.key_mem_level)
    moved.add(0, 1, 0, 4, 4, 2)
    out = C.CompactOutcome(moved, moved.weighted_loads(), 0)
    plan = C.expand(out, snap, f)
    assert plan.delta == {a, b}
    assert len(plan.new_table) == 0


def test_expand_count_mismatch():
    a, b = keys_with_hashes([0, 0], 2)
    snap = WorkloadSnapshot.from_costs({a: 4, b: 4})
    f = AssignmentFunction.hash_only(2)
    sp = C.compress(snap, f, r=2)
    bad = C.CompactSpace(2, key_cost_level=sp.key_cost_level, key_mem_level=sp.key_mem_level)
    bad.add(1, 0, 0, 4, 4, 3)
    with pytest.raises(CountMismatch):
        C.expand(C.CompactOutcome(bad, bad.weighted_loads(), 0), snap, f)


def test_compact_mixed_bf_respects_capacity():
    rng = np.random.default_rng(23)
    for _ in range(30):
        snap, f = with_table(rng, k_max=40)
        cap = int(rng.integers(0, len(f.table) + 3))
        try:
            out = C.compact_mixed_bf(C.compress(snap, f, r=1), 0.05, table_capacity=cap)
        except CapacityInfeasible:
            continue
        assert out.table_size <= cap


def test_compact_count_conservation():
    rng = np.random.default_rng(29)
    for _ in range(20):
        snap, f = with_table(rng)
        sp = C.compress(snap, f, r=2)
        for name, fn in C.COMPACT_ALGORITHMS.items():
            try:
                out = fn(sp, 0.1, 1.5, None, 10**6)
            except CapacityInfeasible as e:
                out = e.outcome
            assert out.space.total_count == len(snap), name
