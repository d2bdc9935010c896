"""Post-processing of event logs into program outcomes and run-level metrics.

Definitions used throughout:

* waiting time of a call: time between becoming ready (or being preempted)
  and being admitted to the running batch, summed over its admissions;
* execution time of a call: wall time spent in the running batch, prefill included;
* response time of a program excludes interrupt delays, which are not spent
  in the serving layer. For multi-threaded programs the delays subtracted are
  those on the realized critical chain (the chain of last-finishing parents
  ending at the program's last call).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .events import SCHEMA_VERSION, EventLog
from .workload import ProgramSpec, program_from_dict

DEFAULT_DECODE_BINS = (1, 16, 64, 256, 1024, math.inf)
DEFAULT_CALL_COUNT_BINS = (1, 2, 5, 10, 50, math.inf)
DEFAULT_INPUT_BINS = (0, 512, 1024, 2048, 4096, 8192, math.inf)


@dataclass
class CallRecord:
    program_id: str
    call_id: str
    engine: int | None = None
    ready: float | None = None
    complete: float | None = None
    wait: float = 0.0
    exec: float = 0.0
    admits: int = 0
    preempts: int = 0
    input_tokens: int = 0
    cached_tokens: int = 0
    prefill_cost: float = 0.0
    routing_class: str = ""
    decode_tokens: int = 0
    segments: list[tuple] = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        return self.cached_tokens / self.input_tokens if self.input_tokens else 0.0

    @property
    def wait_exec_ratio(self) -> float:
        return self.wait / self.exec if self.exec > 0 else 0.0


@dataclass
class ProgramOutcome:
    program_id: str
    arrival_time: float
    finish_time: float
    total_decode_tokens: int
    critical_path_response_time: float
    total_wait: float
    total_exec: float
    n_calls: int
    total_interrupt: float = 0.0
    single_threaded: bool = True

    @property
    def response_time(self) -> float:
        """Finish minus arrival, interrupts included."""
        return self.finish_time - self.arrival_time

    @property
    def wait_exec_ratio(self) -> float:
        return self.total_wait / self.total_exec if self.total_exec > 0 else 0.0

    @property
    def token_latency(self) -> float:
        return program_token_latency(self)


def program_token_latency(o: ProgramOutcome, single_threaded: bool | None = None) -> float:
    st = o.single_threaded if single_threaded is None else single_threaded
    if st:
        resp = o.finish_time - o.arrival_time - o.total_interrupt
    else:
        resp = o.critical_path_response_time
    return resp / o.total_decode_tokens


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest value."""
    if len(values) == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    s = sorted(values)
    k = max(1, math.ceil(p * len(s) - 1e-12))
    return s[k - 1]


def makespan(outcomes: Sequence[ProgramOutcome], unfinished: int = 0) -> float:
    if unfinished:
        raise ValueError(f"{unfinished} programs did not finish")
    if not outcomes:
        return 0.0
    return max(o.finish_time for o in outcomes) - min(o.arrival_time for o in outcomes)


def _bin_index(edges: Sequence[float], x: float) -> int | None:
    for i in range(len(edges) - 1):
        if edges[i] <= x < edges[i + 1]:
            return i
    return None


def binned(pairs: Iterable[tuple[float, float]], edges: Sequence[float]) -> list[dict]:
    """Group ``(x, value)`` pairs into ``[lo, hi)`` bins; reports count and mean."""
    sums = [0.0] * (len(edges) - 1)
    counts = [0] * (len(edges) - 1)
    for x, v in pairs:
        i = _bin_index(edges, x)
        if i is not None:
            sums[i] += v
            counts[i] += 1
    return [{"lo": edges[i], "hi": edges[i + 1], "count": counts[i],
             "mean": sums[i] / counts[i] if counts[i] else None}
            for i in range(len(edges) - 1)]


def wait_exec_ratio(level: str, outcomes: Sequence[ProgramOutcome] = (), calls: Sequence[CallRecord] = (),
                    edges: Sequence[float] | None = None) -> list[dict]:
    """Wait/exec ratios binned by decode tokens (``call``) or call count (``program``)."""
    if level == "call":
        return binned(((c.decode_tokens, c.wait_exec_ratio) for c in calls if c.complete is not None),
                      edges or DEFAULT_DECODE_BINS)
    if level == "program":
        return binned(((o.n_calls, o.wait_exec_ratio) for o in outcomes), edges or DEFAULT_CALL_COUNT_BINS)
    raise ValueError("level must be 'call' or 'program'")


def cache_hit_rate(calls: Sequence[CallRecord], edges: Sequence[float] | None = None) -> dict[str, list[dict]]:
    """Hit rate per admitted call, binned by input length, per routing class."""
    edges = edges or DEFAULT_INPUT_BINS
    out = {}
    for cls in ("all", "same_engine", "cross_engine", "first"):
        sel = [c for c in calls if c.admits and (cls == "all" or c.routing_class == cls)]
        out[cls] = binned(((c.input_tokens, c.hit_rate) for c in sel), edges)
    return out


def mean_hit_rate(calls: Sequence[CallRecord], min_input: int = 0) -> float:
    sel = [c.hit_rate for c in calls if c.admits and c.input_tokens >= min_input]
    return sum(sel) / len(sel) if sel else 0.0


# -- reconstruction from the log ------------------------------------------------------

def _close_run(rec: CallRecord, t: float, tick: int, start: tuple | None):
    if start is None:
        return
    t0, k0 = start
    rec.exec += t - t0
    rec.segments.append((k0, tick, "decode", t0, t))


def analyze(log: EventLog) -> tuple[list[ProgramOutcome], list[CallRecord], dict[str, ProgramSpec], dict]:
    """Outcomes of finished programs, call records, program specs and counters."""
    specs: dict[str, ProgramSpec] = {}
    recs: dict[tuple[str, str], CallRecord] = {}
    running_since: dict[tuple[str, str], tuple[float, int]] = {}
    waiting_since: dict[tuple[str, str], tuple[float, int, str]] = {}
    finished: dict[str, float] = {}
    counters = {"demotions": 0, "promotions": 0, "preemptions": 0, "swaps": 0, "swap_time": 0.0,
                "swap_blocks": 0}
    for e in log:
        key = (e.program_id, e.call_id)
        kind = e.kind
        if kind == "arrival":
            specs[e.program_id] = program_from_dict(e.data["spec"], strict=False)
            continue
        if kind == "complete_program":
            finished[e.program_id] = e.time
            continue
        if kind == "demote":
            counters["demotions"] += 1
            continue
        if kind == "promote":
            counters["promotions"] += 1
            continue
        if kind == "swap":
            counters["swaps"] += 1
            counters["swap_time"] += e.data["time"]
            counters["swap_blocks"] += e.data["blocks"]
            continue
        rec = recs.get(key)
        if rec is None:
            rec = recs[key] = CallRecord(e.program_id, e.call_id)
        if kind == "ready":
            rec.ready = e.data["at"] if e.data and "at" in e.data else e.time
            waiting_since[key] = (rec.ready, e.tick, "queued")
        elif kind == "route":
            rec.engine = e.engine
        elif kind == "admit":
            t0, k0, seg = waiting_since.pop(key, (e.time, e.tick, "queued"))
            rec.wait += e.time - t0
            if seg == "preempted":
                rec.segments.append((k0, e.tick, "preempted", t0, e.time))
            rec.admits += 1
            rec.engine = e.engine
            d = e.data or {}
            if d.get("mode") == "new":
                rec.input_tokens = d["input"]
                rec.cached_tokens = d["cached"]
                rec.prefill_cost = d["prefill"]
                rec.routing_class = d["cls"]
                if d["prefill"] > 0:
                    rec.segments.append((e.tick, e.tick, "prefill", e.time, e.time + d["prefill"]))
            running_since[key] = (e.time, e.tick)
        elif kind == "preempt":
            counters["preemptions"] += 1
            rec.preempts += 1
            _close_run(rec, e.time, e.tick, running_since.pop(key, None))
            waiting_since[key] = (e.time, e.tick, "preempted")
        elif kind == "complete_call":
            _close_run(rec, e.time, e.tick, running_since.pop(key, None))
            rec.complete = e.time
    outcomes = []
    for pid, spec in specs.items():
        idx = spec.index()
        for c in spec.calls:
            r = recs.get((pid, c.call_id))
            if r is not None:
                r.decode_tokens = c.decode_tokens
        if pid not in finished:
            continue
        crec = {c.call_id: recs[(pid, c.call_id)] for c in spec.calls}
        fin = finished[pid]
        # walk the realized critical chain back from the last-finishing call
        last = max(spec.calls, key=lambda c: crec[c.call_id].complete).call_id
        chain_delay = 0.0
        cur = last
        while True:
            chain_delay += idx[cur].interrupt_delay
            ps = idx[cur].parents
            if not ps:
                break
            cur = max(ps, key=lambda p: crec[p].complete)
        outcomes.append(ProgramOutcome(
            program_id=pid,
            arrival_time=spec.arrival_time,
            finish_time=fin,
            total_decode_tokens=spec.total_decode_tokens,
            critical_path_response_time=fin - spec.arrival_time - chain_delay,
            total_wait=sum(r.wait for r in crec.values()),
            total_exec=sum(r.exec for r in crec.values()),
            n_calls=len(spec.calls),
            total_interrupt=sum(c.interrupt_delay for c in spec.calls),
            single_threaded=spec.is_chain,
        ))
    return outcomes, list(recs.values()), specs, counters


# -- run report -----------------------------------------------------------------------

@dataclass
class RunReport:
    outcomes: list[ProgramOutcome]
    calls: list[CallRecord]
    n_programs: int
    ticks: int
    end_time: float
    engines: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)

    @property
    def finished(self) -> int:
        return len(self.outcomes)

    @property
    def unfinished(self) -> int:
        return self.n_programs - len(self.outcomes)

    def token_latencies(self) -> list[float]:
        return [o.token_latency for o in self.outcomes]

    @property
    def mean_token_latency(self) -> float:
        v = self.token_latencies()
        return sum(v) / len(v) if v else 0.0

    def token_latency_percentile(self, p: float) -> float:
        return percentile(self.token_latencies(), p)

    def response_percentile(self, p: float) -> float:
        return percentile([o.response_time for o in self.outcomes], p)

    @property
    def total_wait(self) -> float:
        return sum(o.total_wait for o in self.outcomes)

    @property
    def makespan(self) -> float:
        return makespan(self.outcomes)

    @property
    def total_prefill_tokens(self) -> int:
        return sum(e["prefill_tokens"] for e in self.engines)

    @property
    def total_prefill_time(self) -> float:
        return sum(e["prefill_time"] for e in self.engines)

    @property
    def total_swap_time(self) -> float:
        return sum(e["swap"]["time"] for e in self.engines)

    def summary(self) -> dict:
        lat = self.token_latencies()
        resp = [o.response_time for o in self.outcomes]
        s = {
            "programs": self.n_programs,
            "finished": self.finished,
            "ticks": self.ticks,
            "end_time": self.end_time,
            "makespan": self.makespan,
            "total_wait": self.total_wait,
            "mean_token_latency": self.mean_token_latency,
            "total_prefill_tokens": self.total_prefill_tokens,
            "total_prefill_time": self.total_prefill_time,
            "total_swap_time": self.total_swap_time,
            "mean_hit_rate": mean_hit_rate(self.calls),
            "mean_hit_rate_long": mean_hit_rate(self.calls, min_input=2049),
        }
        for name, vals in (("token_latency", lat), ("response_time", resp)):
            for p in (0.5, 0.95, 0.99):
                s[f"{name}_p{round(p * 100)}"] = percentile(vals, p) if vals else None
        s.update(self.counters)
        return s


def build_report(log: EventLog, n_programs: int | None = None, ticks: int | None = None,
                 engines: list[dict] | None = None) -> RunReport:
    outcomes, calls, specs, counters = analyze(log)
    end = log.events[-1].time if log.events else 0.0
    return RunReport(
        outcomes=outcomes,
        calls=calls,
        n_programs=len(specs) if n_programs is None else n_programs,
        ticks=(log.events[-1].tick if log.events else 0) if ticks is None else ticks,
        end_time=end,
        engines=engines if engines is not None else _engines_from_log(log, calls, counters),
        counters=counters,
    )


def _engines_from_log(log: EventLog, calls: Sequence[CallRecord], counters: dict) -> list[dict]:
    ids = sorted({e.engine for e in log if e.engine is not None})
    out = []
    for i in ids:
        mine = [c for c in calls if c.engine == i and c.admits]
        sw = [e for e in log if e.kind == "swap" and e.engine == i]
        out.append({
            "engine_id": i,
            "prefill_tokens": sum(c.input_tokens - c.cached_tokens for c in mine),
            "prefill_time": sum(c.prefill_cost for c in mine),
            "swap": {"swap_outs": sum(1 for e in sw if e.data["dir"] == "out"),
                     "swap_ins": sum(1 for e in sw if e.data["dir"] == "in"),
                     "blocks": sum(e.data["blocks"] for e in sw),
                     "time": sum(e.data["time"] for e in sw)},
        })
    return out


# -- export ---------------------------------------------------------------------------

PROGRAM_COLUMNS = ("program_id", "arrival_time", "finish_time", "n_calls", "total_decode_tokens",
                   "total_wait", "total_exec", "total_interrupt", "response_time",
                   "critical_path_response_time", "token_latency", "single_threaded")
GANTT_COLUMNS = ("call_id", "program_id", "engine_id", "start_tick", "end_tick", "segment",
                 "start_time", "end_time")


def _clean(v):
    """JSON-safe copy: unbounded values (infinities) become null."""
    if isinstance(v, float) and (math.isinf(v) or math.isnan(v)):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def export(report: RunReport, fmt: str) -> bytes:
    """Serialize a report as ``csv`` (per program), ``json`` or ``gantt_csv``."""
    if fmt == "csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(PROGRAM_COLUMNS)
        for o in sorted(report.outcomes, key=lambda o: (o.arrival_time, o.program_id)):
            w.writerow([getattr(o, c) for c in PROGRAM_COLUMNS])
        return out.getvalue().encode("utf-8")
    if fmt == "gantt_csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(GANTT_COLUMNS)
        rows = []
        for c in report.calls:
            for k0, k1, seg, t0, t1 in c.segments:
                rows.append((c.call_id, c.program_id, c.engine, k0, k1, seg, t0, t1))
        rows.sort(key=lambda r: (r[3], r[1], r[0], r[5]))
        w.writerows(rows)
        return out.getvalue().encode("utf-8")
    if fmt == "json":
        doc = {
            "schema_version": SCHEMA_VERSION,
            "summary": report.summary(),
            "programs": [{**{c: getattr(o, c) for c in PROGRAM_COLUMNS}} for o in report.outcomes],
            "engines": report.engines,
            "wait_exec_ratio": {
                "call": wait_exec_ratio("call", calls=report.calls),
                "program": wait_exec_ratio("program", report.outcomes),
            },
            "cache_hit_rate": cache_hit_rate(report.calls),
        }
        return json.dumps(_clean(doc), sort_keys=True, indent=1, allow_nan=False).encode("utf-8")
    raise ValueError(f"unknown export format {fmt!r}; use csv, json or gantt_csv")
