"""Agentic programs as DAGs of LLM calls, plus the JSONL trace format.

A program is described statically by a :class:`ProgramSpec` (what the
simulator is told up front) and tracked while it runs by a
:class:`ProgramRuntime` (which calls are done, which became ready and when).
Call lengths are in tokens; durations are derived by the engine model.
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence


class ValidationError(ValueError):
    """A program violates a structural invariant.

    ``reason`` is one of ``"cycle"``, ``"dangling parent"``,
    ``"decode_tokens"``, ``"negative"``, ``"duplicate call_id"``, ``"empty"``.
    """

    def __init__(self, reason: str, program_id: str, call_id: str | None = None, detail: str = ""):
        self.reason = reason
        self.program_id = program_id
        self.call_id = call_id
        where = f"program {program_id!r}" + (f", call {call_id!r}" if call_id is not None else "")
        msg = f"{reason}: {where}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TraceError(ValueError):
    """A trace line could not be parsed or failed validation."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class CallSpec:
    call_id: str
    prefill_tokens: int
    decode_tokens: int
    parents: tuple[str, ...] = ()
    interrupt_delay: float = 0.0

    def __post_init__(self):
        # accept lists from callers; keep the dataclass hashable
        if not isinstance(self.parents, tuple):
            object.__setattr__(self, "parents", tuple(self.parents))


@dataclass(frozen=True)
class ProgramSpec:
    program_id: str
    arrival_time: float
    calls: tuple[CallSpec, ...]
    system_prompt_tokens: int = 0

    def __post_init__(self):
        if not isinstance(self.calls, tuple):
            object.__setattr__(self, "calls", tuple(self.calls))

    def index(self) -> dict[str, CallSpec]:
        return {c.call_id: c for c in self.calls}

    def children(self) -> dict[str, list[str]]:
        kids: dict[str, list[str]] = {c.call_id: [] for c in self.calls}
        for c in self.calls:
            for p in c.parents:
                kids[p].append(c.call_id)
        return kids

    @property
    def roots(self) -> list[str]:
        return [c.call_id for c in self.calls if not c.parents]

    @property
    def is_chain(self) -> bool:
        """True when the calls form a single path (a single-threaded program)."""
        kids = self.children()
        return (len(self.roots) == 1
                and all(len(c.parents) <= 1 for c in self.calls)
                and all(len(k) <= 1 for k in kids.values()))

    @property
    def total_decode_tokens(self) -> int:
        return sum(c.decode_tokens for c in self.calls)

    def topological_order(self) -> list[str]:
        """Call ids in dependency order; ties keep declaration order."""
        order = {c.call_id: i for i, c in enumerate(self.calls)}
        indeg = {c.call_id: len(c.parents) for c in self.calls}
        kids = self.children()
        frontier = sorted((cid for cid, d in indeg.items() if d == 0), key=order.__getitem__)
        out = []
        while frontier:
            cid = frontier.pop(0)
            out.append(cid)
            for k in kids[cid]:
                indeg[k] -= 1
                if indeg[k] == 0:
                    frontier.append(k)
            frontier.sort(key=order.__getitem__)
        return out

    def history_tokens(self) -> dict[str, int]:
        """Tokens of conversation history preceding each call.

        History follows the longest-token ancestor chain: a call sees the
        prompt and output of each ancestor along that chain.
        """
        idx = self.index()
        hist: dict[str, int] = {}
        for cid in self.topological_order():
            c = idx[cid]
            hist[cid] = max((hist[p] + idx[p].prefill_tokens + idx[p].decode_tokens for p in c.parents),
                            default=0)
        return hist

    def input_tokens(self) -> dict[str, int]:
        """Full prompt length per call: system prompt + history + new prefill."""
        idx = self.index()
        return {cid: self.system_prompt_tokens + h + idx[cid].prefill_tokens
                for cid, h in self.history_tokens().items()}

    def bottom_levels(self) -> dict[str, int]:
        """Longest decode-token path from each call (inclusive) to a sink."""
        idx = self.index()
        kids = self.children()
        bl: dict[str, int] = {}
        for cid in reversed(self.topological_order()):
            bl[cid] = idx[cid].decode_tokens + max((bl[k] for k in kids[cid]), default=0)
        return bl

    def critical_path_tokens(self) -> int:
        return max(self.bottom_levels().values(), default=0)


def validate(spec: ProgramSpec) -> None:
    """Raise :class:`ValidationError` on the first violated invariant."""
    pid = spec.program_id
    if not spec.calls:
        raise ValidationError("empty", pid, detail="program has no calls")
    if spec.arrival_time < 0 or spec.system_prompt_tokens < 0:
        raise ValidationError("negative", pid, detail="arrival_time/system_prompt_tokens")
    seen: set[str] = set()
    for c in spec.calls:
        if c.call_id in seen:
            raise ValidationError("duplicate call_id", pid, c.call_id)
        seen.add(c.call_id)
    for c in spec.calls:
        if c.decode_tokens < 1:
            raise ValidationError("decode_tokens", pid, c.call_id, "decode_tokens must be >= 1")
        if c.prefill_tokens < 0 or c.interrupt_delay < 0:
            raise ValidationError("negative", pid, c.call_id, "prefill_tokens/interrupt_delay")
        for p in c.parents:
            if p not in seen:
                raise ValidationError("dangling parent", pid, c.call_id, f"unknown parent {p!r}")
    # iterative DFS keeps deep chains (LATS-sized) off the recursion limit
    parents = {c.call_id: c.parents for c in spec.calls}
    state = dict.fromkeys(parents, 0)  # 0 new, 1 on stack, 2 finished
    for start in parents:
        if state[start]:
            continue
        stack = [(start, iter(parents[start]))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state[nxt] == 1:
                raise ValidationError("cycle", pid, nxt)
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(parents[nxt])))


class CallState(enum.Enum):
    PENDING = "pending"
    INTERRUPTED = "interrupted"
    READY = "ready"
    QUEUED = "queued"
    RUNNING = "running"
    PREEMPTED = "preempted"
    DONE = "done"


_WAITING_FOR_SUBMIT = (CallState.PENDING, CallState.INTERRUPTED, CallState.READY)


@dataclass
class ProgramRuntime:
    """Per-program progress during a simulation (single writer)."""

    spec: ProgramSpec
    state: dict[str, CallState] = field(default_factory=dict)
    completion: dict[str, float] = field(default_factory=dict)
    attained: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._idx = self.spec.index()
        self._kids = self.spec.children()
        self._missing = {c.call_id: len(c.parents) for c in self.spec.calls}
        for c in self.spec.calls:
            self.state.setdefault(c.call_id, CallState.PENDING)
            self.attained.setdefault(c.call_id, 0)

    def ready_time(self, call_id: str) -> float | None:
        """When the call reaches the serving layer, or None if a parent is unfinished."""
        c = self._idx[call_id]
        if any(self.state[p] is not CallState.DONE for p in c.parents):
            return None
        base = max((self.completion[p] for p in c.parents), default=self.spec.arrival_time)
        return base + c.interrupt_delay

    def ready_calls(self, now: float) -> list[str]:
        """Calls that can be submitted at ``now``, in declaration order."""
        out = []
        for c in self.spec.calls:
            if self.state[c.call_id] in _WAITING_FOR_SUBMIT:
                t = self.ready_time(c.call_id)
                if t is not None and t <= now:
                    out.append(c.call_id)
        return out

    def complete(self, call_id: str, now: float) -> list[str]:
        """Mark ``call_id`` done; return children whose parents are now all done."""
        self.state[call_id] = CallState.DONE
        self.completion[call_id] = now
        self.attained[call_id] = self._idx[call_id].decode_tokens
        unlocked = []
        for k in self._kids[call_id]:
            self._missing[k] -= 1
            if self._missing[k] == 0:
                self.state[k] = CallState.INTERRUPTED
                unlocked.append(k)
        return unlocked

    @property
    def done(self) -> bool:
        return all(s is CallState.DONE for s in self.state.values())


def ready_calls(rt: ProgramRuntime, now: float) -> list[str]:
    return rt.ready_calls(now)


# -- JSONL trace format ---------------------------------------------------------

_PROGRAM_KEYS = ("program_id", "arrival_time", "system_prompt_tokens", "calls")
_CALL_KEYS = ("call_id", "prefill_tokens", "decode_tokens", "parents", "interrupt_delay")


def program_to_dict(spec: ProgramSpec) -> dict:
    return {
        "program_id": spec.program_id,
        "arrival_time": spec.arrival_time,
        "system_prompt_tokens": spec.system_prompt_tokens,
        "calls": [
            {"call_id": c.call_id, "prefill_tokens": c.prefill_tokens,
             "decode_tokens": c.decode_tokens, "parents": list(c.parents),
             "interrupt_delay": c.interrupt_delay}
            for c in spec.calls
        ],
    }


def _int(v, name):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"{name} must be an integer")
    return v


def _num(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"{name} must be a number")
    return float(v)


def program_from_dict(d: dict, strict: bool = True) -> ProgramSpec:
    if not isinstance(d, dict):
        raise ValueError("expected a JSON object")
    if strict:
        extra = set(d) - set(_PROGRAM_KEYS)
        if extra:
            raise ValueError(f"unknown keys {sorted(extra)}")
    missing = [k for k in ("program_id", "calls") if k not in d]
    if missing:
        raise ValueError(f"missing keys {missing}")
    calls = []
    for cd in d["calls"]:
        if not isinstance(cd, dict):
            raise ValueError("calls must be objects")
        if strict:
            extra = set(cd) - set(_CALL_KEYS)
            if extra:
                raise ValueError(f"unknown call keys {sorted(extra)}")
        calls.append(CallSpec(
            call_id=str(cd["call_id"]),
            prefill_tokens=_int(cd.get("prefill_tokens", 0), "prefill_tokens"),
            decode_tokens=_int(cd["decode_tokens"], "decode_tokens"),
            parents=tuple(str(p) for p in cd.get("parents", [])),
            interrupt_delay=_num(cd.get("interrupt_delay", 0.0), "interrupt_delay"),
        ))
    return ProgramSpec(
        program_id=str(d["program_id"]),
        arrival_time=_num(d.get("arrival_time", 0.0), "arrival_time"),
        calls=tuple(calls),
        system_prompt_tokens=_int(d.get("system_prompt_tokens", 0), "system_prompt_tokens"),
    )


def _lines(source) -> Iterator[str]:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    elif isinstance(source, str):
        source = io.StringIO(source)
    for raw in source:
        yield raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw


def load_trace(source: IO | bytes | str | Iterable, strict: bool = True) -> list[ProgramSpec]:
    """Parse a JSONL trace (file object, bytes, or text); blank lines are skipped."""
    specs = []
    for n, line in enumerate(_lines(source), start=1):
        if not line.strip():
            continue
        try:
            spec = program_from_dict(json.loads(line), strict=strict)
        except (ValueError, KeyError, TypeError) as exc:
            raise TraceError(n, f"malformed program: {exc}") from exc
        try:
            validate(spec)
        except ValidationError as exc:
            raise TraceError(n, str(exc)) from exc
        specs.append(spec)
    return specs


def serialize(specs: Sequence[ProgramSpec]) -> bytes:
    return "".join(json.dumps(program_to_dict(s)) + "\n" for s in specs).encode("utf-8")


def dump_trace(specs: Sequence[ProgramSpec], path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(specs))
