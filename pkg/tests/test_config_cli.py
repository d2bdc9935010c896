from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import pytest

from agentsched import cli
from agentsched.config import (ConfigError, apply_overrides, config_from_dict, config_to_dict, dump_toml,
                               load_config, parse_override)
from agentsched.engine import BulkSwap
from agentsched.events import EventLog
from agentsched.workload import load_trace


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_and_file(tmp_path):
    c = config_from_dict({})
    assert c.policy == "plas" and len(c.engines) == 1 and c.queue.K == 8 and c.queue.beta == 2.0
    p = write(tmp_path, """
seed = 7
[engine]
count = 2
max_batch_size = 8
swap_model = "bulk"
swap_fixed_cost = 1.5
swap_cost_per_block_bulk = 0.1
[scheduler]
policy = "atlas"
boundaries = [2.0]
quanta = [1.0, inf]
beta = 3.0
[balancer]
policy = "round_robin"
[workload]
preset = "lats"
count = 10
rate = 0.5
""")
    c = load_config(p)
    assert c.seed == 7 and len(c.engines) == 2 and c.engines[0].max_batch_size == 8
    assert c.engines[0].swap_model == BulkSwap(1.5, 0.1)
    assert c.queue.edges == (2.0,) and math.isinf(c.queue.quanta[1]) and c.queue.beta == 3.0
    assert c.balancer.policy == "round_robin" and c.workload.count == 10


def test_round_trip_through_toml(tmp_path):
    c = load_config(None, ["engine.count=3", "scheduler.beta=inf", "workload.preset=sharegpt"])
    p = write(tmp_path, dump_toml(config_to_dict(c)))
    assert load_config(p) == c


@pytest.mark.parametrize("d, msg", [
    ({"bogus": 1}, "unknown key"),
    ({"engine": {"colour": 1}}, "unknown key"),
    ({"scheduler": {"policy": "lottery"}}, "unknown policy"),
    ({"scheduler": {"boundaries": [1.0]}}, "together"),
    ({"engine": {"count": 0}}, "count"),
    ({"engine": {"max_batch_size": 0}}, "max_batch_size"),
    ({"workload": {"preset": "a", "trace": "b"}}, "mutually exclusive"),
    ({"mode": "batch"}, "mode"),
    ({"horizon": {"max_ticks": 0}}, "max_ticks"),
])
def test_config_errors(d, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(d)


def test_overrides():
    assert parse_override("scheduler.beta=4.0") == (["scheduler", "beta"], 4.0)
    assert parse_override("workload.preset=lats") == (["workload", "preset"], "lats")
    assert parse_override("scheduler.quanta=[1, inf]") == (["scheduler", "quanta"], [1, math.inf])
    with pytest.raises(ConfigError):
        parse_override("novalue")
    d = apply_overrides({"scheduler": {"beta": 1.0}}, ["scheduler.beta=5", "seed=2"])
    assert d == {"scheduler": {"beta": 5}, "seed": 2}
    with pytest.raises(ConfigError):
        apply_overrides({"engines": [{}]}, ["engine.max_batch_size=2"])


def test_missing_config_file_is_config_error():
    with pytest.raises(ConfigError, match="not found"):
        load_config("nope.toml")


# -- CLI ---------------------------------------------------------------------------------

def test_cli_golden(capsys):
    assert cli.main(["golden", "fig2"]) == 0
    out = capsys.readouterr().out
    assert "fcfs" in out and " 18 " in out and "fig2: PASS" in out
    assert cli.main(["golden", "fig9"]) == 0


def test_cli_gen(tmp_path):
    out = tmp_path / "t.jsonl"
    assert cli.main(["gen", "sharegpt", "100", str(out), "--seed", "3"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 100
    assert len(load_trace(out.read_bytes())) == 100
    assert cli.main(["gen", "fig2", "4", str(out)]) == 0
    assert [p.program_id for p in load_trace(out.read_bytes())] == ["A", "B", "C", "D"]


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["simulate", str(tmp_path / "missing.cfg")]) == 2
    assert "not found" in capsys.readouterr().err
    assert cli.main(["bogus"]) == 64
    assert cli.main(["simulate", "--no-such-flag"]) == 64
    assert cli.main(["report", str(tmp_path / "none.jsonl")]) == 66
    assert cli.main(["simulate", "--trace", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")]) == 66
    bad = write(tmp_path, "[engine\n")
    assert cli.main(["simulate", str(bad)]) == 2
    assert cli.main(["simulate", "--preset", "sharegpt", "--count", "10", "--set", "engine.kv_capacity_blocks=8",
                     "--set", "engine.swap_space_blocks=1", "--out", str(tmp_path / "o")]) == 3


def test_cli_simulate_outputs_and_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path, '[scheduler]\npolicy = "mlfq"\nbeta = 1.0\n[workload]\npreset = "fig2"\n')
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    # file < --set < named flag
    assert cli.main(["simulate", str(cfg), "--set", "scheduler.policy=atlas", "--set", "scheduler.beta=5.0",
                     "--policy", "fcfs", "--batch-size", "2"]) == 0
    out = tmp_path / "envout"
    names = sorted(p.name for p in out.iterdir())
    assert names == ["config.toml", "engine_log.csv", "events.jsonl", "gantt.csv", "programs.csv", "report.json",
                     "routing_log.csv", "scheduler_log.csv"]
    resolved = load_config(out / "config.toml")
    assert resolved.policy == "fcfs" and resolved.queue.beta == 5.0
    rep = json.loads((out / "report.json").read_text())
    assert rep["schema_version"] == 1 and rep["summary"]["total_wait"] == 18
    rows = list(csv.DictReader(io.StringIO((out / "routing_log.csv").read_text())))
    assert {r["policy_branch"] for r in rows} == {"short"}
    first = (out / "events.jsonl").read_bytes()
    assert cli.main(["simulate", str(cfg), "--set", "scheduler.policy=atlas", "--set", "scheduler.beta=5.0",
                     "--policy", "fcfs", "--batch-size", "2", "--out", str(tmp_path / "again")]) == 0
    # output fully determined by (config, seed)
    for n in names:
        assert (tmp_path / "again" / n).read_bytes() == (out / n).read_bytes()
    assert EventLog.from_jsonl(first).to_jsonl() == first


def test_cli_report_formats(tmp_path, capsys):
    assert cli.main(["simulate", "--preset", "fig2", "--policy", "plas", "--batch-size", "2",
                     "--set", "scheduler.boundaries=[2.0]", "--set", "scheduler.quanta=[1.0, inf]",
                     "--set", "scheduler.beta=3.0", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "events.jsonl"), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["summary"]["total_wait"] == 12
    assert cli.main(["report", str(tmp_path / "events.jsonl"), "--format", "gantt_csv",
                     "--out", str(tmp_path / "g.csv")]) == 0
    assert (tmp_path / "g.csv").read_bytes() == (tmp_path / "gantt.csv").read_bytes()
    (tmp_path / "junk.jsonl").write_text("not json\n")
    assert cli.main(["report", str(tmp_path / "junk.jsonl")]) == 66


def test_cli_sweep(tmp_path, capsys):
    assert cli.main(["sweep", "--preset", "sharegpt", "--count", "10", "--rates", "0.001,0.002",
                     "--policies", "fcfs,plas", "--reps", "1"]) == 0
    cap = capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO(cap.out)))
    assert len(rows) == 4 and rows[0]["policy"] == "fcfs"
    assert "sweep: 4/4 runs" in cap.err
    assert cli.main(["sweep", "--rates", "a,b"]) == 64
    assert cli.main(["sweep", "--preset", "sharegpt", "--rates", "0.1", "--policies", "nope"]) == 2


def test_lenient_trace_flag(tmp_path):
    t = tmp_path / "t.jsonl"
    t.write_text('{"program_id": "p", "arrival_time": 0, "system_prompt_tokens": 0, "x": 1, '
                 '"calls": [{"call_id": "c0", "prefill_tokens": 0, "decode_tokens": 2, "parents": [], '
                 '"interrupt_delay": 0}]}\n')
    assert cli.main(["simulate", "--trace", str(t), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["simulate", "--trace", str(t), "--lenient", "--out", str(tmp_path / "o")]) == 0
