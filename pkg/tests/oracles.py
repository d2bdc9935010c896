"""Brute-force reference answers, independent of the simulator's schedulers."""

from __future__ import annotations

from functools import lru_cache
from itertools import combinations


def work_conserving_makespans(spec, bs=2):
    """(min, max) makespan over every unit-step, work-conserving schedule."""
    ids = [c.call_id for c in spec.calls]
    idx = spec.index()
    par = [tuple(ids.index(p) for p in idx[i].parents) for i in ids]

    @lru_cache(maxsize=None)
    def go(rem):
        if not any(rem):
            return 0, 0
        ready = [i for i, r in enumerate(rem) if r and all(rem[p] == 0 for p in par[i])]
        lo, hi = float("inf"), -1
        for pick in combinations(ready, min(bs, len(ready))):
            nxt = list(rem)
            for i in pick:
                nxt[i] -= 1
            a, b = go(tuple(nxt))
            lo, hi = min(lo, a + 1), max(hi, b + 1)
        return lo, hi

    return go(tuple(idx[i].decode_tokens for i in ids))


def swap_totals(events, per_block, bulk):
    """Total swap time of a fixed sequence of swap events under each cost model."""
    blocks = [e.data["blocks"] for e in events]
    return (sum(b * per_block.cost_per_block for b in blocks),
            sum(bulk.fixed_cost + b * bulk.cost_per_block_bulk for b in blocks if b > 0))
