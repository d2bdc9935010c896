"""Append-only simulation event log with a stable JSONL encoding."""

from __future__ import annotations

import csv
import io
import json
from typing import IO, Iterable, Iterator, NamedTuple

EVENT_KINDS = ("arrival", "ready", "route", "enqueue", "demote", "promote", "admit", "preempt",
               "swap", "complete_call", "complete_program")

SCHEMA_VERSION = 1


class Event(NamedTuple):
    time: float
    tick: int
    kind: str
    engine: int | None
    program_id: str
    call_id: str | None
    data: dict | None


class EventLog:
    """Events in emission order; ``now``/``tick`` are set by the event loop."""

    def __init__(self, events: Iterable[Event] = ()):
        self.events: list[Event] = list(events)
        self.now = 0.0
        self.tick = 0

    def emit(self, kind: str, engine: int | None, program_id: str, call_id: str | None = None,
             data: dict | None = None) -> None:
        self.events.append(Event(self.now, self.tick, kind, engine, program_id, call_id, data))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def of_kind(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.kind in kinds]

    # -- serialization -----------------------------------------------------------------

    def to_jsonl(self) -> bytes:
        out = io.StringIO()
        out.write(json.dumps({"schema_version": SCHEMA_VERSION, "kind": "header"}) + "\n")
        for e in self.events:
            out.write(json.dumps([e.time, e.tick, e.kind, e.engine, e.program_id, e.call_id, e.data],
                                 sort_keys=True, separators=(",", ":")) + "\n")
        return out.getvalue().encode("utf-8")

    @classmethod
    def from_jsonl(cls, source: bytes | str | IO) -> "EventLog":
        if isinstance(source, (bytes, bytearray)):
            text = source.decode("utf-8")
        elif isinstance(source, str):
            text = source
        else:
            raw = source.read()
            text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        log = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            if isinstance(row, dict):
                if row.get("schema_version") != SCHEMA_VERSION:
                    raise ValueError(f"line {n}: unsupported event log schema {row.get('schema_version')!r}")
                continue
            log.events.append(Event(float(row[0]), int(row[1]), row[2], row[3], row[4], row[5], row[6]))
        return log

    # -- CSV views ---------------------------------------------------------------------

    def engine_csv(self) -> bytes:
        """(tick, engine_id, event, call_id, program_id, detail) for engine-side events."""
        return _csv(("tick", "engine_id", "event", "call_id", "program_id", "detail"),
                    ((e.tick, e.engine, e.kind, e.call_id, e.program_id, _detail(e.data))
                     for e in self.events if e.kind in ("admit", "preempt", "swap", "complete_call")))

    def scheduler_csv(self) -> bytes:
        """(tick, engine_id, action, call_id, program_id, q_idx, priority)."""
        q: dict[tuple, tuple] = {}
        rows = []
        for e in self.events:
            key = (e.program_id, e.call_id)
            if e.kind == "enqueue":
                q[key] = (e.data["q"], e.data["prio"])
            elif e.kind in ("demote", "promote"):
                q[key] = (e.data["q"], q.get(key, (None, None))[1])
            elif e.kind not in ("admit", "preempt", "complete_call"):
                continue
            action = "complete" if e.kind == "complete_call" else e.kind
            level, prio = q.get(key, (None, None))
            rows.append((e.tick, e.engine, action, e.call_id, e.program_id, level, prio))
        return _csv(("tick", "engine_id", "action", "call_id", "program_id", "q_idx", "priority"), rows)

    def routing_csv(self) -> bytes:
        """(time, call_id, program_id, input_tokens, policy_branch, engine_id)."""
        return _csv(("time", "call_id", "program_id", "input_tokens", "policy_branch", "engine_id"),
                    ((e.time, e.call_id, e.program_id, e.data["input"], e.data["branch"], e.engine)
                     for e in self.events if e.kind == "route"))


def _detail(data: dict | None) -> str:
    if not data:
        return ""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _csv(header, rows) -> bytes:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue().encode("utf-8")
