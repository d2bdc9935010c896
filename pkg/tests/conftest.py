from __future__ import annotations

import sys

import pytest

from agentsched.workload import CallSpec, ProgramSpec


def chain(pid: str, decodes, arrival: float = 0.0, delays=None, prefill=0, system_prompt=0) -> ProgramSpec:
    """A single-threaded program c0 -> c1 -> ... with the given decode lengths."""
    delays = delays or [0.0] * len(decodes)
    calls = [CallSpec(f"c{i}", prefill, d, (f"c{i - 1}",) if i else (), delays[i] if i else 0.0)
             for i, d in enumerate(decodes)]
    return ProgramSpec(pid, arrival, tuple(calls), system_prompt)


@pytest.fixture
def make_chain():
    return chain


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
