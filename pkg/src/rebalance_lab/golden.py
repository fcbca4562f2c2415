"""Small worked examples with known answers, shared by the CLI ``golden`` command."""
from __future__ import annotations

import time

import numpy as np

from . import balance, compact
from .core import AssignmentFunction, RoutingTable, WorkloadSnapshot, hash_key, loads


def keys_with_hashes(pattern, n_downstream: int, start: int = 1) -> list:
    """Smallest increasing key ids whose hash destinations follow ``pattern``."""
    out = []
    k = start
    for want in pattern:
        while hash_key(k, n_downstream) != want:
            k += 1
        out.append(k)
        k += 1
    return out


def two_instance_example():
    """Six keys on two instances with two table entries.

    Instance 0 holds costs 7, 4, 5 and instance 1 holds 2, 1, 1; the third key
    is routed to instance 1 by the table and the fifth to instance 0.
    """
    k = keys_with_hashes([0, 0, 0, 1, 1, 1], 2)
    costs = dict(zip(k, [7, 4, 2, 1, 5, 1]))
    snap = WorkloadSnapshot.from_costs(costs)
    f = AssignmentFunction(RoutingTable(2, {k[2]: 1, k[4]: 0}))
    return snap, f, k


HLHE_VALUES = (8, 6, 3, 2, 2, 1, 1, 1, 1, 1)
NAIVE_BINS = ((1, 3, 2), (4, 6, 5), (7, 9, 8))


def run_golden() -> list:
    """Returns ``(name, passed, detail)`` triples."""
    res = []
    snap, f, _ = two_instance_example()
    # first call pays for JIT compilation; keep it out of the timing
    balance.mixed(f, snap, 0.0, 1.5, table_capacity=2)
    t0 = time.perf_counter()
    l0 = loads(f, snap).tolist()
    res.append(("initial loads (16, 4)", l0 == [16, 4], str(l0)))
    llfd = balance.rebalance(f, snap, 0.0, balance.HIGHEST_COST)
    ok = llfd.loads.tolist() == [10, 10] and len(llfd.new_table) == 4
    res.append(("llfd path: loads (10, 10), 4 entries", ok, f"{llfd.loads.tolist()} {len(llfd.new_table)}"))
    mt = balance.min_table(f, snap, 0.0)
    ok = mt.loads.tolist() == [10, 10] and len(mt.new_table) == 2
    res.append(("min_table: loads (10, 10), 2 entries", ok, f"{mt.loads.tolist()} {len(mt.new_table)}"))
    mx = balance.mixed(f, snap, 0.0, 1.5, table_capacity=2)
    ok = mx.loads.tolist() == [10, 10] and len(mx.new_table) <= 2
    res.append(("mixed, capacity 2", ok, f"{mx.loads.tolist()} {len(mx.new_table)}"))
    ms = (time.perf_counter() - t0) * 1000 / 3
    res.append(("worked example under 1 ms per path", ms < 1.0, f"{ms:.3f} ms"))

    series = compact.build_levels(max(HLHE_VALUES), 2)
    res.append(("levels {8, 4, 2, 1}", series.levels == (8, 4, 2, 1), str(series.levels)))
    disc = compact.Discretizer(series)
    phi = compact.discretize(np.array(HLHE_VALUES), disc)
    res.append(("third value maps to 4", int(phi[2]) == 4, str(phi.tolist())))
    res.append(("hlhe deviation 0", disc.accumulated_deviation == 0, str(disc.accumulated_deviation)))
    naive = compact.naive_piecewise(HLHE_VALUES, NAIVE_BINS)
    dev = abs(int(sum(HLHE_VALUES) - naive.sum()))
    res.append(("naive deviation 3", dev == 3, str(dev)))
    return res
