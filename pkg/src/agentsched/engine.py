"""One simulated serving engine at continuous-batching granularity.

An engine owns a running batch, a KV-block pool, a per-program prefix cache
and a swap ledger. It does not decide *what* runs: a scheduler hands it an
ordered batch directive at each scheduling point and the engine carries out
the resulting preemptions, swaps and admissions, then decodes.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

from .workload import CallSpec, ProgramSpec

CACHE_MODES = ("none", "program_prefix", "global_prefix")


class SimulationError(RuntimeError):
    """The simulated system cannot continue. ``kind`` is ``"oom"`` or ``"stuck"``."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(message)


# -- swap cost models ----------------------------------------------------------------

@dataclass(frozen=True)
class PerBlockSwap:
    """Each KV block is transferred separately."""

    cost_per_block: float = 0.0

    def __post_init__(self):
        if self.cost_per_block < 0:
            raise ValueError("cost_per_block must be non-negative")

    def cost(self, blocks: int) -> float:
        return blocks * self.cost_per_block


@dataclass(frozen=True)
class BulkSwap:
    """Blocks are consolidated into one transfer: a fixed launch cost plus a
    smaller per-block cost."""

    fixed_cost: float = 0.0
    cost_per_block_bulk: float = 0.0

    def __post_init__(self):
        if self.fixed_cost < 0 or self.cost_per_block_bulk < 0:
            raise ValueError("bulk swap costs must be non-negative")

    def cost(self, blocks: int) -> float:
        if blocks <= 0:
            return 0.0  # nothing to transfer, no launch
        return self.fixed_cost + blocks * self.cost_per_block_bulk


SwapModel = Union[PerBlockSwap, BulkSwap]


def swap_crossover(per_block: PerBlockSwap, bulk: BulkSwap) -> float:
    """Blocks per swap above which the bulk model is cheaper."""
    gap = per_block.cost_per_block - bulk.cost_per_block_bulk
    if gap <= 0:
        return math.inf
    return bulk.fixed_cost / gap


@dataclass
class SwapLedger:
    swap_outs: int = 0
    swap_ins: int = 0
    blocks_out: int = 0
    blocks_in: int = 0
    time: float = 0.0

    @property
    def swaps(self) -> int:
        return self.swap_outs + self.swap_ins

    @property
    def blocks(self) -> int:
        return self.blocks_out + self.blocks_in


# -- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class EngineConfig:
    max_batch_size: int = 2
    decode_step_time: float = 1.0
    # affine extension: step time = decode_step_time + step_time_per_call * batch size
    step_time_per_call: float = 0.0
    prefill_time_per_token: float = 0.0
    kv_capacity_blocks: int | None = None  # None: memory is not modeled
    tokens_per_block: int = 16
    swap_model: SwapModel = PerBlockSwap(0.0)
    swap_space_blocks: int | None = None  # host-side limit; None: unlimited
    multistep_N: int = 1
    overprovision: int = 0
    cache_mode: str = "none"
    cache_budget_tokens: int | None = None

    def __post_init__(self):
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")
        if self.multistep_N < 1:
            raise ValueError("multistep_N must be >= 1")
        if self.decode_step_time <= 0:
            raise ValueError("decode_step_time must be positive")
        if self.step_time_per_call < 0 or self.prefill_time_per_token < 0:
            raise ValueError("time coefficients must be non-negative")
        if self.kv_capacity_blocks is not None and self.kv_capacity_blocks < 1:
            raise ValueError("kv_capacity_blocks must be positive")
        if self.tokens_per_block < 1:
            raise ValueError("tokens_per_block must be positive")
        if self.overprovision < 0:
            raise ValueError("overprovision must be non-negative")
        if self.cache_mode not in CACHE_MODES:
            raise ValueError(f"cache_mode must be one of {CACHE_MODES}")
        if self.cache_budget_tokens is not None and self.cache_budget_tokens < 0:
            raise ValueError("cache_budget_tokens must be non-negative")

    @classmethod
    def idealized(cls, max_batch_size: int = 2, **kw) -> "EngineConfig":
        """Identical unit-time steps: no prefill, no cache, no memory model."""
        return cls(max_batch_size=max_batch_size, **kw)

    def step_time(self, batch_size: int) -> float:
        if batch_size == 0:
            return 0.0
        return self.decode_step_time + self.step_time_per_call * batch_size


# -- call handles --------------------------------------------------------------------

class CallHandle:
    """A call together with its program and derived token counts."""

    __slots__ = ("program", "call", "program_id", "call_id", "key", "input_tokens", "order")

    def __init__(self, program: ProgramSpec, call: CallSpec, input_tokens: int, index: int):
        self.program = program
        self.call = call
        self.program_id = program.program_id
        self.call_id = call.call_id
        self.key = (program.program_id, call.call_id)
        self.input_tokens = input_tokens
        # deterministic tie-break: (program arrival, program id, call position)
        self.order = (program.arrival_time, program.program_id, index)

    @property
    def new_prefill_tokens(self) -> int:
        return self.call.prefill_tokens

    def __repr__(self):
        return f"CallHandle({self.program_id}/{self.call_id})"


def handles_for(program: ProgramSpec) -> dict[str, CallHandle]:
    inputs = program.input_tokens()
    return {c.call_id: CallHandle(program, c, inputs[c.call_id], i) for i, c in enumerate(program.calls)}


class _Resident:
    __slots__ = ("handle", "remaining", "decoded", "blocks", "host_blocks", "state", "prefilled")

    def __init__(self, handle: CallHandle):
        self.handle = handle
        self.remaining = handle.call.decode_tokens
        self.decoded = 0
        self.blocks = 0
        self.host_blocks = 0
        self.state = "new"  # new | running | standby | swapped | paused
        self.prefilled = False


@dataclass
class TickResult:
    completed: list[tuple[CallHandle, float]] = field(default_factory=list)
    work_time: float = 0.0


class EngineState:
    """Mutable engine state, owned by a single simulation loop."""

    def __init__(self, cfg: EngineConfig, engine_id: int = 0,
                 emit: Callable[..., None] | None = None,
                 shared_cache: "OrderedDict[str, int] | None" = None):
        self.cfg = cfg
        self.engine_id = engine_id
        self.clock = 0.0
        self.ticks = 0
        self.calls: dict[tuple[str, str], _Resident] = {}
        self.running: list[tuple[str, str]] = []
        self.standby: list[tuple[str, str]] = []
        self.gpu_blocks = 0
        self.host_blocks = 0
        self.swap = SwapLedger()
        # global_prefix mode may pass one dict shared by every engine
        self.prefix_cache: OrderedDict[str, int] = shared_cache if shared_cache is not None else OrderedDict()
        self.served_programs: set[str] = set()
        self.prefill_tokens_computed = 0
        self.prefill_time = 0.0
        self._emit = emit or (lambda *a, **k: None)
        self._pending_work = 0.0
        self._pending_service: dict[tuple[str, str], float] = {}
        self.changed = False

    # -- queries --------------------------------------------------------------------

    @property
    def kv_modeled(self) -> bool:
        return self.cfg.kv_capacity_blocks is not None

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.cfg.tokens_per_block)

    def context_tokens(self, handle: CallHandle) -> int:
        r = self.calls.get(handle.key)
        return handle.input_tokens + (r.decoded if r else 0)

    def blocks_needed(self, handle: CallHandle) -> int:
        """KV blocks the call occupies while producing its next token."""
        if not self.kv_modeled:
            return 0
        return self.blocks_for(self.context_tokens(handle) + 1)

    def can_fit(self, handle: CallHandle, used_blocks: int = 0, used_slots: int = 0) -> bool:
        """Whether ``handle`` fits next to calls already holding ``used_blocks``/``used_slots``."""
        if used_slots >= self.cfg.max_batch_size:
            return False
        if not self.kv_modeled:
            return True
        return used_blocks + self.blocks_needed(handle) <= self.cfg.kv_capacity_blocks

    def is_resident(self, key) -> bool:
        r = self.calls.get(key)
        return r is not None and r.state in ("running", "standby")

    def remaining(self, key) -> int:
        r = self.calls.get(key)
        return r.remaining if r else 0

    def cached_tokens(self, handle: CallHandle) -> int:
        mode = self.cfg.cache_mode
        if mode == "none":
            return 0
        reusable = handle.input_tokens - handle.call.prefill_tokens
        entry = self.prefix_cache.get(handle.program_id)
        if entry is None:
            # the shared system prompt is treated as warm on every engine
            return min(handle.program.system_prompt_tokens, reusable)
        return min(max(entry, handle.program.system_prompt_tokens), reusable)

    def prefill_cost(self, handle: CallHandle) -> float:
        return self.cfg.prefill_time_per_token * (handle.input_tokens - self.cached_tokens(handle))

    def routing_class(self, handle: CallHandle) -> str:
        """``first`` for roots, else whether this engine served the program before."""
        if not handle.call.parents:
            return "first"
        return "same_engine" if handle.program_id in self.served_programs else "cross_engine"

    # -- state changes --------------------------------------------------------------

    def _swap(self, r: _Resident, direction: str, blocks: int) -> float:
        cost = self.cfg.swap_model.cost(blocks)
        s = self.swap
        if direction == "out":
            s.swap_outs += 1
            s.blocks_out += blocks
            self.host_blocks += blocks
            limit = self.cfg.swap_space_blocks
            if limit is not None and self.host_blocks > limit:
                raise SimulationError(
                    "oom", f"engine {self.engine_id}: swap space exhausted "
                           f"({self.host_blocks} > {limit} blocks)")
        else:
            s.swap_ins += 1
            s.blocks_in += blocks
            self.host_blocks -= blocks
        s.time += cost
        self._emit("swap", self.engine_id, r.handle.program_id, r.handle.call_id,
                   {"dir": direction, "blocks": blocks, "time": cost})
        return cost

    def preempt(self, key, to_standby: bool = False) -> float:
        """Take a running call off the batch; returns the swap-out time."""
        r = self.calls.get(key)
        if r is None or r.state != "running":
            raise KeyError(f"call {key} is not running on engine {self.engine_id}")
        self.running.remove(key)
        cost = 0.0
        if to_standby:
            r.state = "standby"
            self.standby.append(key)
        elif self.kv_modeled:
            b = r.blocks
            self.gpu_blocks -= b
            r.blocks = 0
            r.host_blocks = b
            r.state = "swapped"
            cost = self._swap(r, "out", b)
        else:
            r.state = "paused"
        self._emit("preempt", self.engine_id, r.handle.program_id, r.handle.call_id,
                   {"to": r.state})
        self._pending_work += cost
        self.changed = True
        return cost

    def _drop_standby(self, key) -> float:
        r = self.calls[key]
        self.standby.remove(key)
        cost = 0.0
        if self.kv_modeled:
            b = r.blocks
            self.gpu_blocks -= b
            r.blocks = 0
            r.host_blocks = b
            r.state = "swapped"
            cost = self._swap(r, "out", b)
        else:
            r.state = "paused"
        self._pending_work += cost
        self.changed = True
        return cost

    def admit(self, handle: CallHandle, detail: dict | None = None) -> float:
        """Put a call into the running batch; returns the time this costs
        (prefill on first admission, swap-in on resume)."""
        if len(self.running) >= self.cfg.max_batch_size:
            raise SimulationError("stuck", f"engine {self.engine_id}: batch is full")
        key = handle.key
        r = self.calls.get(key)
        if r is None:
            r = self.calls[key] = _Resident(handle)
        cost = 0.0
        info = dict(detail or {})
        if r.state == "new":
            cached = self.cached_tokens(handle)
            cost = self.cfg.prefill_time_per_token * (handle.input_tokens - cached)
            info.update(mode="new", input=handle.input_tokens, cached=cached, prefill=cost,
                        cls=self.routing_class(handle))
            self.prefill_tokens_computed += handle.input_tokens - cached
            self.prefill_time += cost
            self.served_programs.add(handle.program_id)
            r.prefilled = True
        elif r.state == "swapped":
            cost = self._swap(r, "in", r.host_blocks)
            r.host_blocks = 0
            info.update(mode="resume")
        elif r.state == "paused":
            info.update(mode="resume")
        elif r.state == "standby":
            self.standby.remove(key)
            info.update(mode="standby")
        else:
            raise SimulationError("stuck", f"call {key} already running")
        r.state = "running"
        self.running.append(key)
        self._grow(r)
        self._pending_work += cost
        self._pending_service[key] = self._pending_service.get(key, 0.0) + (cost if info.get("mode") == "new" else 0.0)
        self._emit("admit", self.engine_id, handle.program_id, handle.call_id, info)
        self.changed = True
        return cost

    def _grow(self, r: _Resident) -> None:
        if not self.kv_modeled:
            return
        need = self.blocks_for(r.handle.input_tokens + r.decoded + 1)
        if need > r.blocks:
            self.gpu_blocks += need - r.blocks
            r.blocks = need

    def apply_directive(self, batch: Sequence[CallHandle], standby: Sequence[CallHandle] = ()) -> None:
        """Make the running batch equal to ``batch`` (in order), keeping
        ``standby`` resident but idle."""
        want = {h.key for h in batch}
        keep = {h.key for h in standby}
        for key in list(self.running):
            if key not in want:
                self.preempt(key, to_standby=key in keep)
        for key in list(self.standby):
            if key not in want and key not in keep:
                self._drop_standby(key)
        for h in batch:
            if h.key not in self.running:
                self.admit(h)
        order = {h.key: i for i, h in enumerate(batch)}
        self.running.sort(key=order.__getitem__)
        self.standby.sort(key={h.key: i for i, h in enumerate(standby)}.get)

    def fill_from_standby(self) -> None:
        """Between scheduling points, slots freed by completions go to standby calls."""
        while self.standby and len(self.running) < self.cfg.max_batch_size:
            h = self.calls[self.standby[0]].handle
            self.admit(h)

    def ensure_capacity(self) -> list[CallHandle]:
        """Grow KV for the coming step, preempting from the batch tail on overflow."""
        out = []
        if not self.kv_modeled:
            return out
        for key in self.running:
            self._grow(self.calls[key])
        cap = self.cfg.kv_capacity_blocks
        while self.gpu_blocks > cap and self.standby:
            self._drop_standby(self.standby[-1])
        while self.gpu_blocks > cap and len(self.running) > 1:
            key = self.running[-1]
            out.append(self.calls[key].handle)
            self.preempt(key)
        if self.gpu_blocks > cap:
            key = self.running[0]
            raise SimulationError("stuck", f"call {key} needs more KV blocks than engine {self.engine_id} has")
        return out

    # -- time ---------------------------------------------------------------------

    def pending_work(self) -> float:
        """Prefill and swap time accumulated since the last step."""
        return self._pending_work

    def work_time(self) -> float:
        return self.cfg.step_time(len(self.running)) + self._pending_work

    def service_deltas(self) -> dict[tuple[str, str], float]:
        """Service each running call attains in the coming step."""
        st = self.cfg.step_time(len(self.running))
        ps = self._pending_service
        return {k: st + ps.get(k, 0.0) for k in self.running}

    def horizon(self) -> float:
        """Steps that can run before the batch composition must change."""
        if not self.running:
            return math.inf
        h = min(self.calls[k].remaining for k in self.running)
        if self.kv_modeled:
            tpb = self.cfg.tokens_per_block
            for k in self.running:
                r = self.calls[k]
                h = min(h, r.blocks * tpb - (r.handle.input_tokens + r.decoded))
        return max(h, 1)

    def advance(self, dt: float, steps: int = 1) -> list[tuple[CallHandle, float]]:
        """Run ``steps`` decode steps of wall duration ``dt`` each."""
        completed = []
        for key in list(self.running):
            r = self.calls[key]
            if steps > r.remaining:
                raise SimulationError("stuck", f"advance past completion of {key}")
            r.remaining -= steps
            r.decoded += steps
        self.clock += dt * steps
        self.ticks += steps
        for key in list(self.running):
            r = self.calls[key]
            if r.remaining == 0:
                self.running.remove(key)
                del self.calls[key]
                self.gpu_blocks -= r.blocks
                self._cache_insert(r.handle.program_id, r.handle.input_tokens + r.decoded)
                completed.append((r.handle, self.clock))
        self._pending_work = 0.0
        self._pending_service = {}
        self.changed = False
        return completed

    def tick(self, batch_directive: Sequence[CallHandle] | None = None) -> TickResult:
        """Standalone single step: apply the directive, decode once, advance own clock."""
        if batch_directive is not None:
            if len(batch_directive) > self.cfg.max_batch_size:
                raise ValueError("batch directive exceeds max_batch_size")
            self.apply_directive(batch_directive)
        self.ensure_capacity()
        work = self.work_time()
        dt = work if self.running else self.cfg.decode_step_time
        return TickResult(completed=self.advance(dt), work_time=work)

    def _cache_insert(self, program_id: str, tokens: int) -> None:
        if self.cfg.cache_mode == "none":
            return
        c = self.prefix_cache
        c[program_id] = max(c.get(program_id, 0), tokens)
        c.move_to_end(program_id)
        budget = self.cfg.cache_budget_tokens
        if budget is not None:
            total = sum(c.values())
            while c and total > budget:
                total -= c.popitem(last=False)[1]
