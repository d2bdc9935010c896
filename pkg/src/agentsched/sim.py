"""The deterministic event loop tying workload, balancer, schedulers and engines.

Each global tick runs, in order: completions and table updates (from the
previous step), program arrivals and call readiness, routing, per-engine
scheduling (demotion, anti-starvation, batch formation), admissions, and one
decode step on every engine in lockstep. The tick lasts as long as the
slowest engine's step (decode plus any prefill or swap work it did).

With ``fast_forward`` on, runs of ticks in which nothing can change (same
batch, no arrival, no quantum expiry or starvation crossing) are executed as
one macro step; the resulting log is identical to stepping tick by tick.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .balancer import Balancer
from .config import ConfigError, InputFileError, SimConfig, WorkloadConfig
from .engine import EngineState, SimulationError, handles_for
from .events import EventLog
from .generators import gen_workload, preset
from .metrics import RunReport, build_report, percentile
from .scheduler import ProcessTable, Scheduler
from .workload import ProgramRuntime, ProgramSpec, TraceError, load_trace, program_to_dict

_ARRIVAL, _READY = 0, 1


def resolve_workload(cfg: SimConfig) -> list[ProgramSpec]:
    w: WorkloadConfig = cfg.workload
    if w.programs is not None:
        programs = list(w.programs)
    elif w.trace:
        try:
            with open(w.trace, "rb") as fh:
                programs = load_trace(fh, strict=w.strict)
        except OSError as exc:
            raise InputFileError(f"cannot read trace {w.trace}: {exc}") from exc
        except TraceError as exc:
            raise ConfigError(f"{w.trace}: {exc}") from exc
    elif w.preset:
        try:
            p = preset(w.preset)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
        if isinstance(p, list):
            programs = p
        else:
            seed = cfg.seed if w.seed is None else w.seed
            programs = gen_workload(p, w.count, seed=seed, rate=w.rate, offline=cfg.mode == "offline_batch")
    else:
        programs = []
    if cfg.mode == "offline_batch":
        programs = [replace(p, arrival_time=0.0) if p.arrival_time else p for p in programs]
    ids = [p.program_id for p in programs]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate program_id in workload")
    return programs


class Simulator:
    def __init__(self, cfg: SimConfig, programs: Sequence[ProgramSpec] | None = None,
                 observer: Callable[["Simulator"], None] | None = None):
        self.cfg = cfg
        self.observer = observer
        self.programs = list(programs) if programs is not None else resolve_workload(cfg)
        self.log = EventLog()
        self.table = ProcessTable()
        shared = OrderedDict() if cfg.engines[0].cache_mode == "global_prefix" else None
        self.engines = [EngineState(e, i, self.log.emit, shared) for i, e in enumerate(cfg.engines)]
        self.scheds = [Scheduler(cfg.policy, cfg.queue, self.table, i, self.log.emit, e.overprovision)
                       for i, e in enumerate(cfg.engines)]
        self.balancer = Balancer(cfg.balancer, len(self.engines))
        self.t = 0.0
        self.tick = 0
        self.completed_programs = 0
        self._heap: list = []
        self._seq = 0
        self._runtime: dict[str, ProgramRuntime] = {}
        self._handles: dict[str, dict] = {}
        self._since = [0] * len(self.engines)
        self._call_engine: dict[tuple[str, str], int] = {}
        for p in sorted(self.programs, key=lambda p: (p.arrival_time, p.program_id)):
            self._push(p.arrival_time, _ARRIVAL, (p.arrival_time, p.program_id, -1), p)

    def _push(self, time, rank, order, payload):
        heapq.heappush(self._heap, (time, rank, order, self._seq, payload))
        self._seq += 1

    # -- event handlers --------------------------------------------------------------

    def _on_arrival(self, spec: ProgramSpec):
        self.table.start_session(spec, self.t)
        rt = ProgramRuntime(spec)
        self._runtime[spec.program_id] = rt
        hs = self._handles[spec.program_id] = handles_for(spec)
        self.log.emit("arrival", None, spec.program_id, None, {"spec": program_to_dict(spec)})
        for cid in spec.roots:
            rt.state[cid] = rt.state[cid].INTERRUPTED
            self._push(rt.ready_time(cid), _READY, hs[cid].order, hs[cid])

    def _on_ready(self, h, at: float):
        rt = self._runtime[h.program_id]
        rt.state[h.call_id] = rt.state[h.call_id].QUEUED
        # ``at`` is the exact ready instant; the tick boundary that releases it may be later
        self.log.emit("ready", None, h.program_id, h.call_id, {"at": at})
        loads = [s.load() for s in self.scheds]
        e, branch = self.balancer.route(h, self.table, loads)
        self.log.emit("route", e, h.program_id, h.call_id, {"input": h.input_tokens, "branch": branch})
        self._call_engine[h.key] = e
        self.scheds[e].on_arrival(h, self.t)

    def _on_complete(self, h, engine_id: int):
        sched = self.scheds[engine_id]
        qc = sched.get(h.key)
        self.log.emit("complete_call", engine_id, h.program_id, h.call_id, {"exec": qc.attained})
        sched.on_complete(h, self.t)
        del self._call_engine[h.key]
        rt = self._runtime[h.program_id]
        hs = self._handles[h.program_id]
        for k in rt.complete(h.call_id, self.t):
            self._push(rt.ready_time(k), _READY, hs[k].order, hs[k])
        if rt.done:
            self.log.emit("complete_program", None, h.program_id)
            self.table.end_session(h.program_id)
            del self._runtime[h.program_id]
            del self._handles[h.program_id]
            self.completed_programs += 1

    # -- main loop ---------------------------------------------------------------------

    def _release_due(self):
        heap = self._heap
        while heap and heap[0][0] <= self.t:
            at, rank, _, _, payload = heapq.heappop(heap)
            if rank == _ARRIVAL:
                self._on_arrival(payload)
            else:
                self._on_ready(payload, at)

    def _stop(self) -> bool:
        hz = self.cfg.horizon
        if hz.max_ticks is not None and self.tick >= hz.max_ticks:
            return True
        if hz.max_programs is not None and self.completed_programs >= hz.max_programs:
            return True
        return False

    def _schedule(self):
        for i, (eng, sched) in enumerate(zip(self.engines, self.scheds)):
            N = eng.cfg.multistep_N
            if N == 1 or self._since[i] >= N or not eng.running:
                batch, standby = sched.schedule(eng)
                eng.apply_directive(batch, standby)
                self._since[i] = 0
            else:
                eng.fill_from_standby()
            eng.ensure_capacity()
            sched.mark_running(eng.running)

    def _horizon(self, dt: float) -> int:
        h = math.inf
        for i, (eng, sched) in enumerate(zip(self.engines, self.scheds)):
            if eng.running:
                h = min(h, eng.horizon())
                if eng.cfg.multistep_N > 1:
                    h = min(h, eng.cfg.multistep_N - self._since[i])
            if len(sched):
                h = min(h, sched.horizon(eng.cfg.step_time(len(eng.running)), dt))
            if h <= 1:
                return 1
        if self._heap:
            h = min(h, max(1, math.ceil((self._heap[0][0] - self.t) / dt)))
        if self.cfg.horizon.max_ticks is not None:
            h = min(h, self.cfg.horizon.max_ticks - self.tick)
        return int(max(1, h))

    def _oversized_hint(self) -> str:
        for eng, sched in zip(self.engines, self.scheds):
            cap = eng.cfg.kv_capacity_blocks
            for qc in sched:
                need = eng.blocks_needed(qc.handle)
                if cap is not None and need > cap:
                    return (f" (call {qc.handle.program_id}/{qc.handle.call_id} needs {need} KV blocks;"
                            f" engine {eng.engine_id} holds {cap})")
        return ""

    def run(self) -> tuple[EventLog, RunReport]:
        log = self.log
        while True:
            log.now, log.tick = self.t, self.tick
            self._release_due()
            if not self._runtime and not self._heap:
                break
            if self._stop():
                break
            self._schedule()
            if not any(e.running for e in self.engines):
                if any(len(s) for s in self.scheds):
                    raise SimulationError("stuck", "queued calls cannot be admitted on any engine"
                                          + self._oversized_hint())
                if not self._heap:
                    break
                self.t = self._heap[0][0]
                continue
            dt = max(e.work_time() for e in self.engines)
            changed = any(e.changed for e in self.engines)
            h = 1 if (changed or not self.cfg.fast_forward) else self._horizon(dt)
            deltas = [e.service_deltas() for e in self.engines]
            finished = []
            for i, eng in enumerate(self.engines):
                for handle, _ in eng.advance(dt, h):
                    finished.append((handle.order, handle, i))
                eng.clock = self.t + dt * h
                self.scheds[i].accrue(deltas[i], dt, h)
                self._since[i] += h
            self.t += dt * h
            self.tick += h
            log.now, log.tick = self.t, self.tick
            finished.sort(key=lambda x: x[0])
            for _, handle, i in finished:
                self._on_complete(handle, i)
            if self.observer is not None:
                self.observer(self)
        report = build_report(log, n_programs=len(self.programs), ticks=self.tick,
                              engines=[_engine_summary(e) for e in self.engines])
        report.end_time = self.t
        return log, report


def _engine_summary(e: EngineState) -> dict:
    s = e.swap
    return {"engine_id": e.engine_id, "prefill_tokens": e.prefill_tokens_computed,
            "prefill_time": e.prefill_time,
            "swap": {"swap_outs": s.swap_outs, "swap_ins": s.swap_ins, "blocks": s.blocks, "time": s.time}}


def run(cfg: SimConfig, programs: Sequence[ProgramSpec] | None = None,
        observer: Callable[[Simulator], None] | None = None) -> tuple[EventLog, RunReport]:
    """Simulate ``cfg`` to its horizon (or until every program has finished).

    ``observer`` is called after every (macro) step with the simulator.
    """
    return Simulator(cfg, programs, observer).run()


# -- sweeps ----------------------------------------------------------------------------

def derived_seed(base: int, *indices: int) -> int:
    """Stable child seed for (base, indices...) independent of Python's hash salt."""
    msg = ":".join(str(x) for x in (base, *indices)).encode()
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class _Job:
    cfg: SimConfig
    rate_index: int
    rate: float
    rep: int
    policy: str


def _run_job(job: _Job) -> dict:
    _, rep = run(job.cfg)
    lat = rep.token_latencies()
    return {"rate_index": job.rate_index, "rate": job.rate, "rep": job.rep, "policy": job.policy,
            "latencies": lat, "mean": sum(lat) / len(lat) if lat else math.nan,
            "unfinished": rep.unfinished}


def sweep(base: SimConfig, rates: Sequence[float], repetitions: int, policies: Sequence[str] | None = None,
          jobs: int = 1, progress=None) -> list[dict]:
    """One run per (rate, repetition, policy); policies share seeds, so runs are paired.

    Returns one row per (rate, policy): mean over repetitions of the run means,
    and P95/P99 over the pooled program token latencies.
    """
    policies = list(policies) if policies else [base.policy]
    work = []
    for li, lam in enumerate(rates):
        for rep in range(repetitions):
            seed = derived_seed(base.seed, li, rep)
            for pol in policies:
                cfg = replace(base, policy=pol, seed=seed,
                              workload=replace(base.workload, rate=lam, seed=seed))
                work.append(_Job(cfg, li, lam, rep, pol))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = []
            for r in ex.map(_run_job, work):
                results.append(r)
                if progress:
                    progress(len(results), len(work))
    else:
        results = []
        for j in work:
            results.append(_run_job(j))
            if progress:
                progress(len(results), len(work))
    rows = []
    for li, lam in enumerate(rates):
        for pol in policies:
            mine = [r for r in results if r["rate_index"] == li and r["policy"] == pol]
            if not mine:
                continue
            pooled = [x for r in mine for x in r["latencies"]]
            rows.append({
                "rate": lam, "policy": pol, "repetitions": len(mine),
                "mean_token_latency": sum(r["mean"] for r in mine) / len(mine),
                "p95_token_latency": percentile(pooled, 0.95) if pooled else math.nan,
                "p99_token_latency": percentile(pooled, 0.99) if pooled else math.nan,
                "unfinished": sum(r["unfinished"] for r in mine),
            })
    return rows


SWEEP_COLUMNS = ("rate", "policy", "repetitions", "mean_token_latency", "p95_token_latency",
                 "p99_token_latency", "unfinished")
