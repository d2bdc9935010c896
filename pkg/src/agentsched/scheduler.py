"""Process table and program-aware scheduling policies.

Every policy is expressed through the same multi-level queue machinery:

* ``fcfs``: one queue, no quantum, arrival order.
* ``mlfq``: new calls enter the top queue and sink as they use up quanta;
  starvation is handled per call (queued longer than a wait threshold).
* ``plas``: a call is placed by its program's summed completed-call service.
* ``atlas``: a call is placed by its program's longest observed critical
  path, kept as one scalar per program.
* ``atlas_exact``: the critical-path priority computed over each call's true
  parents (reference mode for differential testing).
* ``srpt_oracle``: clairvoyant, ordered by the program's remaining decode steps.
* ``critical_path`` / ``anti_critical_path``: clairvoyant list schedules by
  the longest (shortest) remaining path below each call.

Queues hold running calls as well as waiting ones; a batch is the first
``max_batch_size`` calls in queue order that fit in memory.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .engine import CallHandle, EngineState
from .workload import ProgramSpec

POLICIES = ("fcfs", "mlfq", "plas", "atlas", "atlas_exact", "srpt_oracle",
            "critical_path", "anti_critical_path")

_PROGRAM_LAS = ("plas", "atlas", "atlas_exact")
_SORTED = ("srpt_oracle", "critical_path", "anti_critical_path")
_EPS = 1e-9


class SchedulerError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueueConfig:
    """K priority levels cut at ``edges`` (K-1 interior boundaries).

    Level i (0-based) holds priorities in ``[edges[i-1], edges[i])`` with
    ``edges[-1] = 0`` and ``edges[K-1] = inf``.
    """

    edges: tuple[float, ...] = ()
    quanta: tuple[float, ...] = (math.inf,)
    beta: float = 2.0
    mlfq_wait_threshold: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        object.__setattr__(self, "quanta", tuple(float(q) for q in self.quanta))
        if len(self.quanta) < 1:
            raise ValueError("need at least one queue")
        if len(self.edges) != len(self.quanta) - 1:
            raise ValueError("need exactly K-1 boundaries for K quanta")
        prev = 0.0
        for e in self.edges:
            if not e > prev:
                raise ValueError("boundaries must be positive and strictly increasing")
            prev = e
        if any(not q > 0 for q in self.quanta):
            raise ValueError("quanta must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.mlfq_wait_threshold > 0:
            raise ValueError("mlfq_wait_threshold must be positive")

    @property
    def K(self) -> int:
        return len(self.quanta)

    @property
    def boundaries(self) -> list[tuple[float, float]]:
        cuts = (0.0,) + self.edges + (math.inf,)
        return list(zip(cuts[:-1], cuts[1:]))

    def level_of(self, priority: float) -> int:
        return bisect.bisect_right(self.edges, priority)

    @classmethod
    def exponential(cls, K: int = 8, base: float = 2.0, growth: float = 4.0, beta: float = 2.0,
                    last_quantum: float = math.inf, mlfq_wait_threshold: float = 1000.0) -> "QueueConfig":
        """Level i tops out at ``base * growth**i``; quanta equal band widths."""
        if K < 1 or base <= 0 or growth <= 1:
            raise ValueError("need K >= 1, base > 0, growth > 1")
        edges = tuple(base * growth ** i for i in range(K - 1))
        lows = (0.0,) + edges
        quanta = tuple(hi - lo for lo, hi in zip(lows, edges)) + (last_quantum,)
        return cls(edges=edges, quanta=quanta, beta=beta, mlfq_wait_threshold=mlfq_wait_threshold)

    @classmethod
    def single(cls) -> "QueueConfig":
        return cls(edges=(), quanta=(math.inf,), beta=math.inf)


def starvation_ratio(p_wait: float, c_wait: float, p_service: float, c_model_time: float) -> float:
    """Wait over service; 0/0 is 0 and x/0 is infinite."""
    num = p_wait + c_wait
    den = p_service + c_model_time
    if den <= 0:
        return math.inf if num > 0 else 0.0
    return num / den


# -- process table --------------------------------------------------------------------

@dataclass
class ProcessEntry:
    program_id: str
    arrival_time: float = 0.0
    service: float = 0.0
    wait: float = 0.0
    engine_ids: set[int] = field(default_factory=set)
    pinned_engine: int | None = None
    threads: dict[str, "QueuedCall"] = field(default_factory=dict)
    last_call_arrival: float | None = None
    last_call_completion: float | None = None
    remaining_decode: int = 0
    n_waiting: int = 0
    # per-call (priority, exec time) of completed calls, for the exact critical-path mode
    completed: dict[str, tuple[float, float]] = field(default_factory=dict)
    bottom_levels: dict[str, int] = field(default_factory=dict)


class ProcessTable:
    """Per-program runtime state shared by every engine scheduler and the balancer."""

    def __init__(self):
        self.entries: dict[str, ProcessEntry] = {}

    def start_session(self, spec: ProgramSpec, now: float = 0.0) -> ProcessEntry:
        if spec.program_id in self.entries:
            raise SchedulerError(f"session {spec.program_id!r} already open")
        e = ProcessEntry(program_id=spec.program_id, arrival_time=spec.arrival_time,
                         remaining_decode=spec.total_decode_tokens)
        self.entries[spec.program_id] = e
        return e

    def end_session(self, program_id: str) -> ProcessEntry:
        try:
            return self.entries.pop(program_id)
        except KeyError:
            raise SchedulerError(f"no session for program {program_id!r}") from None

    def __getitem__(self, program_id: str) -> ProcessEntry:
        try:
            return self.entries[program_id]
        except KeyError:
            raise SchedulerError(f"no process table entry for program {program_id!r}") from None

    def __contains__(self, program_id: str) -> bool:
        return program_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def update_process_table(entry: ProcessEntry, mode: str, inherited: float, exec_time: float,
                         now: float) -> float:
    """Fold a finished call into its program's service; returns the new value."""
    if mode in ("atlas", "atlas_exact"):
        entry.service = max(entry.service, inherited + exec_time)
    else:
        entry.service += exec_time
    entry.last_call_completion = now
    return entry.service


def plas_priority(entry: ProcessEntry) -> float:
    return entry.service


def atlas_priority(entry: ProcessEntry) -> float:
    return entry.service


def atlas_exact_priority(entry: ProcessEntry, parents) -> float:
    """max over parents of (parent priority + parent execution time); 0 for roots."""
    best = 0.0
    for p in parents:
        prio, t = entry.completed[p]
        best = max(best, prio + t)
    return best


# -- queues -----------------------------------------------------------------------------

class QueuedCall:
    __slots__ = ("handle", "level", "quanta", "wait", "model_time", "enqueue_time", "seq",
                 "service", "attained", "running")

    def __init__(self, handle: CallHandle, level: int, quanta: float, service: float,
                 enqueue_time: float, seq: int):
        self.handle = handle
        self.level = level
        self.quanta = quanta
        self.wait = 0.0
        self.model_time = 0.0
        self.enqueue_time = enqueue_time
        self.seq = seq
        self.service = service  # priority inherited at arrival
        self.attained = 0.0     # execution received so far
        self.running = False

    @property
    def q_idx(self) -> int:
        return self.level + 1


class MultiLevelQueue:
    """K FIFO levels (insertion-ordered dicts); optionally sorted by a key."""

    def __init__(self, K: int, sort_key: Callable[[QueuedCall], tuple] | None = None):
        self.levels: list[dict[tuple[str, str], QueuedCall]] = [{} for _ in range(K)]
        self.sort_key = sort_key

    def push(self, qc: QueuedCall, level: int) -> None:
        qc.level = level
        self.levels[level][qc.handle.key] = qc

    def remove(self, qc: QueuedCall) -> None:
        del self.levels[qc.level][qc.handle.key]

    def move(self, qc: QueuedCall, level: int) -> None:
        self.remove(qc)
        self.push(qc, level)

    def level_items(self, level: int) -> list[QueuedCall]:
        items = list(self.levels[level].values())
        if self.sort_key is not None:
            items.sort(key=self.sort_key)
        return items

    def __iter__(self) -> Iterator[QueuedCall]:
        for i in range(len(self.levels)):
            yield from self.level_items(i)

    def __len__(self) -> int:
        return sum(len(l) for l in self.levels)

    def get(self, key) -> QueuedCall | None:
        for l in self.levels:
            qc = l.get(key)
            if qc is not None:
                return qc
        return None


# -- scheduler --------------------------------------------------------------------------

class Scheduler:
    """Queues and policy for one engine; the process table is shared."""

    def __init__(self, policy: str, qcfg: QueueConfig | None, table: ProcessTable,
                 engine_id: int = 0, emit: Callable[..., None] | None = None, overprovision: int = 0):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
        self.policy = policy
        if policy == "fcfs" or policy in _SORTED:
            qcfg = QueueConfig.single()
        self.qcfg = qcfg or QueueConfig.exponential()
        self.table = table
        self.engine_id = engine_id
        self.overprovision = overprovision
        self._emit = emit or (lambda *a, **k: None)
        self.queue = MultiLevelQueue(self.qcfg.K, self._sort_key() if policy in _SORTED else None)
        self._seq = 0
        self._index: dict[tuple[str, str], QueuedCall] = {}

    def _sort_key(self):
        table = self.table
        if self.policy == "srpt_oracle":
            return lambda qc: (table[qc.handle.program_id].remaining_decode, qc.handle.order)
        sign = -1 if self.policy == "critical_path" else 1

        def key(qc):
            bl = table[qc.handle.program_id].bottom_levels
            return (sign * bl[qc.handle.call_id], qc.handle.order)
        return key

    def __len__(self) -> int:
        return len(self._index)

    def load(self) -> int:
        """Queued plus running calls on this engine."""
        return len(self._index)

    def get(self, key) -> QueuedCall | None:
        return self._index.get(key)

    def __iter__(self) -> Iterator[QueuedCall]:
        return iter(self.queue)

    # -- priorities --------------------------------------------------------------------

    def priority(self, handle: CallHandle) -> float:
        entry = self.table[handle.program_id]
        pol = self.policy
        if pol in ("plas", "atlas"):
            return entry.service
        if pol == "atlas_exact":
            return atlas_exact_priority(entry, handle.call.parents)
        if pol == "srpt_oracle":
            return float(entry.remaining_decode)
        if pol in ("critical_path", "anti_critical_path"):
            if not entry.bottom_levels:
                entry.bottom_levels = handle.program.bottom_levels()
            return float(entry.bottom_levels[handle.call_id])
        return 0.0

    def _level_for(self, priority: float) -> int:
        if self.policy in _PROGRAM_LAS:
            return self.qcfg.level_of(priority)
        return 0

    # -- lifecycle ---------------------------------------------------------------------

    def on_arrival(self, handle: CallHandle, now: float) -> QueuedCall:
        entry = self.table[handle.program_id]
        prio = self.priority(handle)
        level = self._level_for(prio)
        qc = QueuedCall(handle, level, self.qcfg.quanta[level], prio, now, self._seq)
        self._seq += 1
        self.queue.push(qc, level)
        self._index[handle.key] = qc
        entry.threads[handle.call_id] = qc
        entry.engine_ids.add(self.engine_id)
        entry.last_call_arrival = now
        entry.n_waiting += 1
        self._emit("enqueue", self.engine_id, handle.program_id, handle.call_id,
                   {"q": qc.q_idx, "prio": prio})
        return qc

    def on_complete(self, handle: CallHandle, now: float) -> float:
        """Remove a finished call and update its program's entry."""
        qc = self._index.pop(handle.key)
        self.queue.remove(qc)
        entry = self.table[handle.program_id]
        del entry.threads[handle.call_id]
        if not qc.running:
            entry.n_waiting -= 1
        entry.remaining_decode -= handle.call.decode_tokens
        entry.completed[handle.call_id] = (qc.service, qc.attained)
        return update_process_table(entry, self.policy, qc.service, qc.attained, now)

    def mark_running(self, running_keys) -> None:
        running = set(running_keys)
        for key, qc in self._index.items():
            now_running = key in running
            if now_running != qc.running:
                self.table[qc.handle.program_id].n_waiting += -1 if now_running else 1
                qc.running = now_running

    # -- scheduling point ----------------------------------------------------------------

    def demote_exhausted(self) -> list[QueuedCall]:
        out = []
        K = self.qcfg.K
        for qc in list(self.queue):
            if qc.quanta > _EPS:
                continue
            old = qc.level
            if old < K - 1:
                self.queue.move(qc, old + 1)
            qc.quanta = self.qcfg.quanta[qc.level]
            out.append(qc)
            self._emit("demote", self.engine_id, qc.handle.program_id, qc.handle.call_id,
                       {"q": qc.q_idx, "from": old + 1})
        return out

    def _starved(self, qc: QueuedCall) -> bool:
        if self.policy == "mlfq":
            return qc.wait >= self.qcfg.mlfq_wait_threshold - _EPS
        if self.policy in _PROGRAM_LAS:
            beta = self.qcfg.beta
            if math.isinf(beta):
                return False
            e = self.table[qc.handle.program_id]
            return starvation_ratio(e.wait, qc.wait, e.service, qc.model_time) >= beta * (1 - _EPS)
        return False

    def anti_starvation_scan(self) -> list[QueuedCall]:
        """Promote starved calls below the top queue to its tail."""
        if self.policy not in _PROGRAM_LAS and self.policy != "mlfq":
            return []
        if self.policy in _PROGRAM_LAS and math.isinf(self.qcfg.beta):
            return []
        out = []
        for level in range(1, self.qcfg.K):
            for qc in self.queue.level_items(level):
                if self._starved(qc):
                    self.queue.move(qc, 0)
                    qc.quanta = self.qcfg.quanta[0]
                    qc.wait = 0.0
                    qc.model_time = 0.0
                    out.append(qc)
                    self._emit("promote", self.engine_id, qc.handle.program_id, qc.handle.call_id,
                               {"q": 1, "from": level + 1})
        return out

    def form_batch(self, engine: EngineState) -> tuple[list[CallHandle], list[CallHandle]]:
        """First calls in queue order that fit; stops at the first that does not.

        Returns ``(batch, standby)`` where standby holds up to ``overprovision``
        further calls already resident on the engine.
        """
        batch: list[CallHandle] = []
        standby: list[CallHandle] = []
        used = 0
        bs = engine.cfg.max_batch_size
        cap = engine.cfg.kv_capacity_blocks
        for qc in self.queue:
            h = qc.handle
            if len(batch) < bs:
                need = engine.blocks_needed(h)
                if cap is not None and used + need > cap:
                    break
                batch.append(h)
                used += need
                continue
            if len(standby) >= self.overprovision:
                break
            if not engine.is_resident(h.key):
                continue
            need = engine.blocks_needed(h)
            if cap is not None and used + need > cap:
                break
            standby.append(h)
            used += need
        return batch, standby

    def schedule(self, engine: EngineState) -> tuple[list[CallHandle], list[CallHandle]]:
        self.demote_exhausted()
        self.anti_starvation_scan()
        return self.form_batch(engine)

    # -- time passing ----------------------------------------------------------------

    def accrue(self, deltas: dict, dt: float, steps: int = 1) -> None:
        """Charge ``steps`` ticks: running calls attain service, others wait."""
        table = self.table
        for key, qc in self._index.items():
            d = deltas.get(key)
            if d is not None:
                d *= steps
                qc.attained += d
                qc.model_time += d
                qc.quanta -= d
            else:
                w = dt * steps
                qc.wait += w
                table[qc.handle.program_id].wait += w

    def horizon(self, step: float, dt: float) -> float:
        """Ticks until the next demotion or promotion, assuming the batch holds."""
        h = math.inf
        q = self.qcfg
        check_ratio = self.policy in _PROGRAM_LAS and not math.isinf(q.beta)
        for qc in self._index.values():
            if qc.running and not math.isinf(qc.quanta) and step > 0:
                h = min(h, max(1, math.ceil(qc.quanta / step - _EPS)))
            if qc.level == 0:
                continue
            if self.policy == "mlfq" and not qc.running and not math.isinf(q.mlfq_wait_threshold):
                h = min(h, max(1, math.ceil((q.mlfq_wait_threshold - qc.wait) / dt - _EPS)))
            elif check_ratio:
                h = min(h, self._crossing(qc, step, dt))
            if h <= 1:
                return 1
        return h

    def _crossing(self, qc: QueuedCall, step: float, dt: float) -> float:
        e = self.table[qc.handle.program_id]
        beta = self.qcfg.beta
        A = e.wait + qc.wait
        a = dt * e.n_waiting + (0.0 if qc.running else dt)
        B = e.service + qc.model_time
        b = step if qc.running else 0.0

        def hit(k):
            return starvation_ratio(A + a * k, 0.0, B + b * k, 0.0) >= beta * (1 - _EPS)

        if hit(1):
            return 1
        slope = a - beta * b
        if slope <= 0:
            return math.inf
        k = max(1, math.ceil((beta * B - A) / slope - _EPS))
        while k > 1 and hit(k - 1):
            k -= 1
        while not hit(k):
            k += 1
        return k


def policy_suite(name: str, table: ProcessTable | None = None, qcfg: QueueConfig | None = None,
                 engine_id: int = 0, **kw) -> Scheduler:
    return Scheduler(name, qcfg, table if table is not None else ProcessTable(), engine_id, **kw)
