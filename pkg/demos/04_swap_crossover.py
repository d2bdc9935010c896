"""When does a bulk swap kernel beat per-block copies?

A per-block copy costs ``c`` per block. A bulk transfer costs a fixed launch
``f`` plus ``c_b`` per block. Bulk wins when a swap moves more than
``f / (c - c_b)`` blocks. We run a memory-constrained offline batch and compare
both models on the swaps it actually performs.
"""

# %%
from __future__ import annotations

from statistics import mean

from agentsched.config import SimConfig
from agentsched.engine import BulkSwap, EngineConfig, PerBlockSwap, swap_crossover
from agentsched.generators import gen_workload, preset
from agentsched.scheduler import QueueConfig
from agentsched.sim import run

programs = gen_workload(preset("sharegpt"), 40, seed=3, offline=True)
per_block = PerBlockSwap(0.01)

# %%
for bulk in (BulkSwap(0.1, 0.002), BulkSwap(0.2, 0.002), BulkSwap(0.5, 0.002), BulkSwap(1.0, 0.002)):
    times, sizes = {}, []
    for model in (per_block, bulk):
        engine = EngineConfig(max_batch_size=8, kv_capacity_blocks=3000, swap_model=model)
        log, rep = run(SimConfig(engines=[engine], policy="plas", mode="offline_batch",
                                 queue=QueueConfig.exponential(beta=float("inf"))), programs)
        times[type(model).__name__] = rep.total_swap_time
        sizes += [e.data["blocks"] for e in log.of_kind("swap")]
    print(f"fixed cost {bulk.fixed_cost:<4} crossover {swap_crossover(per_block, bulk):6.1f} blocks | "
          f"mean blocks per swap {mean(sizes):5.1f} | per-block {times['PerBlockSwap']:7.2f} "
          f"bulk {times['BulkSwap']:7.2f}")

# %% [markdown]
# Swaps here move a few dozen blocks, so a cheap launch makes bulk transfers
# the clear winner and an expensive one flips the result.
