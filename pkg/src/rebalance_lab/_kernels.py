"""Hot numeric loops, each in a numba and a plain numpy/Python flavour.

The numba path is used when numba imports cleanly and the environment variable
``REBALANCE_LAB_NUMBA`` is not set to ``0``.  Both flavours are always importable
(``*_py`` and ``*_nb``) so tests and the benchmark can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

try:
    import numba as _nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and os.environ.get("REBALANCE_LAB_NUMBA", "1") != "0"


# --------------------------------------------------------------------------
# pure numpy / python
# --------------------------------------------------------------------------

def mix64_py(keys: np.ndarray) -> np.ndarray:
    z = np.asarray(keys, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash_mod_py(keys: np.ndarray, n: int) -> np.ndarray:
    return (mix64_py(keys) % np.uint64(n)).astype(np.int64)


def instance_loads_py(dest: np.ndarray, cost: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.int64)
    np.add.at(out, dest, cost)
    return out


def hlhe_scan_py(values: np.ndarray, r: int, top: int, delta: int):
    """Greedy level assignment over a non-increasing integer sequence.

    Returns ``(levels, delta)`` where ``delta`` is the running sum of
    ``x - level`` carried in from the caller and updated per value.
    """
    big = 1 << r
    out = np.empty(len(values), dtype=np.int64)
    for i in range(len(values)):
        x = int(values[i])
        if x >= top:
            phi = top
        else:
            if x >= big:
                lo = (x // big) * big
                hi = lo + big
            else:
                lo = 1 << (x.bit_length() - 1)
                hi = lo << 1
            up = abs(delta + x - hi)
            down = abs(delta + x - lo)
            phi = hi if up < down else lo
        delta += x - phi
        out[i] = phi
    return out, delta


def fluctuate_block_py(cost, mem_last, freq, dest, loads, base_loads, pa, pb, mean, target):
    """Apply random cross-instance swaps until the displacement target is met.

    Mutates the first five arrays in place.  Returns ``(used, reached)`` where
    ``used`` counts consumed pairs from ``pa``/``pb``.
    """
    limit = target * mean
    for i in range(len(pa)):
        a = pa[i]
        b = pb[i]
        da = dest[a]
        db = dest[b]
        if da == db:
            continue
        diff = cost[b] - cost[a]
        loads[da] += diff
        loads[db] -= diff
        cost[a], cost[b] = cost[b], cost[a]
        freq[a], freq[b] = freq[b], freq[a]
        mem_last[a], mem_last[b] = mem_last[b], mem_last[a]
        if abs(loads[da] - base_loads[da]) >= limit or abs(loads[db] - base_loads[db]) >= limit:
            return i + 1, True
    return len(pa), False


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = _nb.njit(cache=True, nogil=True)

    @_jit
    def mix64_nb(keys):
        out = np.empty(keys.shape[0], dtype=np.uint64)
        for i in range(keys.shape[0]):
            z = keys[i] + np.uint64(0x9E3779B97F4A7C15)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            out[i] = z ^ (z >> np.uint64(31))
        return out

    @_jit
    def hash_mod_nb(keys, n):
        mixed = mix64_nb(keys)
        out = np.empty(keys.shape[0], dtype=np.int64)
        m = np.uint64(n)
        for i in range(keys.shape[0]):
            out[i] = np.int64(mixed[i] % m)
        return out

    @_jit
    def instance_loads_nb(dest, cost, n):
        out = np.zeros(n, dtype=np.int64)
        for i in range(dest.shape[0]):
            out[dest[i]] += cost[i]
        return out

    @_jit
    def _hlhe_scan_nb(values, r, top, delta):
        big = np.int64(1) << r
        out = np.empty(values.shape[0], dtype=np.int64)
        for i in range(values.shape[0]):
            x = values[i]
            if x >= top:
                phi = top
            else:
                if x >= big:
                    lo = (x // big) * big
                    hi = lo + big
                else:
                    lo = np.int64(1)
                    while lo * 2 <= x:
                        lo *= 2
                    hi = lo * 2
                up = abs(delta + x - hi)
                down = abs(delta + x - lo)
                phi = hi if up < down else lo
            delta += x - phi
            out[i] = phi
        return out, delta

    def hlhe_scan_nb(values, r, top, delta):
        out, d = _hlhe_scan_nb(np.ascontiguousarray(values, dtype=np.int64), np.int64(r),
                               np.int64(top), np.int64(delta))
        return out, int(d)

    @_jit
    def fluctuate_block_nb(cost, mem_last, freq, dest, loads, base_loads, pa, pb, mean, target):
        limit = target * mean
        for i in range(pa.shape[0]):
            a = pa[i]
            b = pb[i]
            da = dest[a]
            db = dest[b]
            if da == db:
                continue
            diff = cost[b] - cost[a]
            loads[da] += diff
            loads[db] -= diff
            t = cost[a]; cost[a] = cost[b]; cost[b] = t
            t = freq[a]; freq[a] = freq[b]; freq[b] = t
            t = mem_last[a]; mem_last[a] = mem_last[b]; mem_last[b] = t
            if abs(loads[da] - base_loads[da]) >= limit or abs(loads[db] - base_loads[db]) >= limit:
                return i + 1, True
        return pa.shape[0], False
else:  # pragma: no cover
    mix64_nb = hash_mod_nb = instance_loads_nb = hlhe_scan_nb = fluctuate_block_nb = None


if NUMBA_ENABLED:
    mix64 = mix64_nb
    hash_mod = hash_mod_nb
    instance_loads = instance_loads_nb
    hlhe_scan = hlhe_scan_nb
    fluctuate_block = fluctuate_block_nb
else:
    mix64 = mix64_py
    hash_mod = hash_mod_py
    instance_loads = instance_loads_py
    hlhe_scan = hlhe_scan_py
    fluctuate_block = fluctuate_block_py
