"""Head-of-line blocking at call level and at program level.

Four programs arrive together on one engine with room for two calls. A and B
are long multi-call programs; C and D are short. We replay the burst under
FCFS, MLFQ and PLAS and draw each call's decode segments as text.
"""

# %%
from __future__ import annotations

from agentsched.generators import fig2_trace
from agentsched.golden import golden_config
from agentsched.sim import run

programs = fig2_trace()
for p in programs:
    print(p.program_id, [(c.call_id, c.decode_tokens) for c in p.calls])


# %%
def gantt(report, width=16):
    rows = []
    for c in sorted(report.calls, key=lambda c: c.call_id):
        line = ["."] * width
        t = int(c.ready)
        while t < min(width, c.complete):         # waiting time shows as '-'
            line[t] = "-"
            t += 1
        for seg in c.segments:                    # (start, end, kind, ...)
            if seg[2] == "decode":
                for t in range(int(seg[0]), min(width, int(seg[1]))):
                    line[t] = "#"
        rows.append(f"  {c.call_id:<3} {''.join(line)}  wait={c.wait:g}")
    return "\n".join(rows)


for policy in ("fcfs", "mlfq", "plas"):
    _, rep = run(golden_config(policy), programs)
    print(f"\n{policy}: total wait {rep.total_wait:g}")
    print(gantt(rep))

# %% [markdown]
# FCFS makes C and D wait behind A1 and B1. MLFQ lets the new short calls in
# early but then the follow-up calls of A and B (fresh calls, so back at the
# top queue) delay D again. PLAS ranks calls by the service their whole
# program has received, so A's and B's follow-ups wait for the short programs.
