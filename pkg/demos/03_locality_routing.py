"""Routing with prefix caches across four engines.

Each engine keeps a per-program prefix cache, so a long call is cheap to prefill
only on the engine that served its program before. Round Robin and Least Used
scatter a program's calls; the locality balancer pins long calls to the
program's engine and spreads short ones by load.
"""

# %%
from __future__ import annotations

from agentsched.balancer import BalancerConfig
from agentsched.config import SimConfig
from agentsched.engine import EngineConfig
from agentsched.generators import gen_workload, preset
from agentsched.metrics import analyze, mean_hit_rate
from agentsched.sim import run

N, BS, ENGINES = 200, 8, 4
W = sum(p.total_decode_tokens for p in gen_workload(preset("sharegpt"), N, seed=1, rate=1.0)) / N
programs = gen_workload(preset("sharegpt"), N, seed=1, rate=0.7 * BS * ENGINES / W)
engine = EngineConfig(max_batch_size=BS, prefill_time_per_token=0.003, cache_mode="program_prefix")

# %%
print(f"{'balancer':<12} {'hit(long)':>9} {'hit(all)':>9} {'prefill tok':>12} {'token lat':>10}")
for name in ("round_robin", "least_used", "locality"):
    log, rep = run(SimConfig(engines=[engine] * ENGINES, policy="plas", balancer=BalancerConfig(name)), programs)
    calls = analyze(log)[1]
    print(f"{name:<12} {mean_hit_rate(calls, 2048):>9.3f} {mean_hit_rate(calls):>9.3f} "
          f"{rep.total_prefill_tokens:>12} {rep.mean_token_latency:>10.3f}")

# %% [markdown]
# "long" means at least 2048 input tokens, the balancer's default threshold.
# Higher hit rates mean fewer tokens to prefill, which shows up directly in the
# token latency once prefill has a cost.
