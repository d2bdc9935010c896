"""Routing ready calls across engines.

``locality`` sends short calls (input at most ``token_threshold`` tokens) to
the least-loaded engine and pins each program's long calls to the engine that
served its first long call, so their prefix stays in that engine's cache.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .engine import CallHandle
from .scheduler import ProcessTable

BALANCER_POLICIES = ("round_robin", "least_used", "locality")


@dataclass(frozen=True)
class BalancerConfig:
    policy: str = "locality"
    token_threshold: int = 2048

    def __post_init__(self):
        if self.policy not in BALANCER_POLICIES:
            raise ValueError(f"balancer policy must be one of {BALANCER_POLICIES}")
        if self.token_threshold < 1:
            raise ValueError("token_threshold must be >= 1")


def least_used(loads: Sequence[int]) -> int:
    """Index of the smallest load; ties go to the lowest engine id."""
    if not loads:
        raise ValueError("no engines to route to")
    best = 0
    for i, v in enumerate(loads):
        if v < loads[best]:
            best = i
    return best


class Balancer:
    def __init__(self, cfg: BalancerConfig, n_engines: int):
        if n_engines < 1:
            raise ValueError("no engines to route to")
        self.cfg = cfg
        self.n = n_engines
        self._rr = 0

    def route(self, handle: CallHandle, table: ProcessTable, loads: Sequence[int]) -> tuple[int, str]:
        """Return ``(engine_id, branch)``.

        ``branch`` is ``short``/``pinned``/``new_pin`` under the locality policy
        and the policy name otherwise.
        """
        if len(loads) != self.n:
            raise ValueError("load vector does not match the engine count")
        pol = self.cfg.policy
        if pol == "round_robin":
            e = self._rr % self.n
            self._rr += 1
            return e, pol
        if pol == "least_used":
            return least_used(loads), pol
        if handle.input_tokens <= self.cfg.token_threshold:
            return least_used(loads), "short"
        entry = table[handle.program_id]
        if entry.pinned_engine is not None:
            return entry.pinned_engine, "pinned"
        e = least_used(loads)
        entry.pinned_engine = e
        return e, "new_pin"


def route(handle: CallHandle, table: ProcessTable, loads: Sequence[int], cfg: BalancerConfig,
          balancer: Balancer | None = None) -> int:
    """Functional form; pass a persistent ``balancer`` for round-robin state."""
    b = balancer or Balancer(cfg, len(loads))
    return b.route(handle, table, loads)[0]
