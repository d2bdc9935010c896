"""Program token latency as load grows, for four schedulers.

One idealized engine (batch size 2, identical unit steps) serves ShareGPT-like
chat programs. Load is a utilization ``u``: arrival rate = u * 2 / W, where W is
the mean number of decode tokens per program. Every policy sees the same
programs at each load.
"""

# %%
from __future__ import annotations

from agentsched.config import SimConfig
from agentsched.engine import EngineConfig
from agentsched.generators import gen_workload, preset
from agentsched.scheduler import QueueConfig
from agentsched.sim import run

N, BS, SEED = 200, 2, 1
W = sum(p.total_decode_tokens for p in gen_workload(preset("sharegpt"), N, seed=SEED, rate=1.0)) / N
print(f"mean decode tokens per program: {W:.0f}")

# %%
policies = ("fcfs", "mlfq", "plas", "srpt_oracle")
print(f"{'u':>5} " + " ".join(f"{p:>12}" for p in policies))
for u in (0.3, 0.5, 0.7, 0.85):
    progs = gen_workload(preset("sharegpt"), N, seed=SEED, rate=u * BS / W)
    row = []
    for policy in policies:
        cfg = SimConfig(engines=[EngineConfig.idealized(max_batch_size=BS)], policy=policy,
                        queue=QueueConfig.exponential(beta=float("inf")))
        _, rep = run(cfg, progs)
        row.append(rep.mean_token_latency)
    print(f"{u:>5} " + " ".join(f"{x:>12.3f}" for x in row))

# %% [markdown]
# Token latency is response time per generated token, so 1.0 means a program
# never waited. FCFS degrades first. PLAS keeps short programs moving without
# knowing any lengths; the clairvoyant SRPT oracle marks how much room is left.
