"""Fixed worked examples with known answers, replayable from the CLI."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import SimConfig
from .engine import EngineConfig
from .generators import fig2_trace, fig9_trace
from .scheduler import QueueConfig
from .sim import run

# Two levels split at service 2, a one-step top quantum, no bottom quantum.
# beta and the MLFQ wait threshold are pinned so the replay gives total waits
# of 18 (FCFS), 18 (MLFQ) and 12 (PLAS).
FIG2_QUEUE = QueueConfig(edges=(2.0,), quanta=(1.0, math.inf), beta=3.0, mlfq_wait_threshold=4.0)
FIG2_EXPECTED = {"fcfs": 18.0, "mlfq": 18.0, "plas": 12.0, "atlas": 12.0}
FIG9_EXPECTED = {"critical_path": 11.0, "anti_critical_path": 14.0}


@dataclass(frozen=True)
class GoldenRow:
    policy: str
    metric: str
    value: float
    expected: float | None

    @property
    def passed(self) -> bool | None:
        return None if self.expected is None else self.value == self.expected


def golden_config(policy: str, fast_forward: bool = True) -> SimConfig:
    """One idealized engine with batch size 2, scheduled every step."""
    return SimConfig(engines=[EngineConfig.idealized(max_batch_size=2)], policy=policy,
                     queue=FIG2_QUEUE, fast_forward=fast_forward)


def fig2_rows() -> list[GoldenRow]:
    rows = []
    for pol, want in FIG2_EXPECTED.items():
        _, rep = run(golden_config(pol), fig2_trace())
        rows.append(GoldenRow(pol, "total_wait", rep.total_wait, want))
    return rows


def fig9_rows() -> list[GoldenRow]:
    rows = []
    for pol in ("fcfs", "mlfq", "plas", "atlas", "critical_path", "anti_critical_path"):
        _, rep = run(golden_config(pol), fig9_trace())
        rows.append(GoldenRow(pol, "makespan", rep.makespan, FIG9_EXPECTED.get(pol)))
    return rows


GOLDEN = {"fig2": fig2_rows, "fig9": fig9_rows}


def format_rows(name: str, rows: list[GoldenRow]) -> str:
    lines = [f"{name}: {'policy':<20} {'metric':<11} {'value':>7} {'expected':>9}  result"]
    for r in rows:
        exp = "-" if r.expected is None else f"{r.expected:g}"
        res = {True: "PASS", False: "FAIL", None: "info"}[r.passed]
        lines.append(f"{name}: {r.policy:<20} {r.metric:<11} {r.value:>7g} {exp:>9}  {res}")
    return "\n".join(lines)
