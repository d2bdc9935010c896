"""Command-line entry point.

Exit codes: 0 success, 1 golden mismatch or stuck simulation, 2 configuration
error, 3 simulated out-of-memory, 64 usage error, 66 unreadable input file.
The default output directory comes from ``$AGENTSCHED_OUT`` (else
``./agentsched-out``). Progress goes to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, InputFileError, apply_overrides, config_from_dict, config_to_dict, \
    dump_toml, load_config_dict
from .engine import SimulationError
from .events import EventLog
from .generators import PRESET_NAMES, gen_workload, preset
from .golden import GOLDEN, format_rows
from .metrics import build_report, export
from .sim import SWEEP_COLUMNS, run, sweep
from .workload import serialize

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_OOM, EXIT_USAGE, EXIT_NOINPUT = 0, 1, 2, 3, 64, 66
OUT_ENV = "AGENTSCHED_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _info(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _flag_overrides(a: argparse.Namespace) -> list[str]:
    """Dedicated flags as dotted overrides (applied after ``--set``)."""
    pairs = [("policy", "scheduler.policy", str), ("beta", "scheduler.beta", float),
             ("seed", "seed", int), ("engines", "engine.count", int),
             ("batch_size", "engine.max_batch_size", int), ("rate", "workload.rate", float),
             ("count", "workload.count", int), ("preset", "workload.preset", str),
             ("trace", "workload.trace", str), ("balancer", "balancer.policy", str),
             ("mode", "mode", str)]
    out = []
    for attr, key, typ in pairs:
        v = getattr(a, attr, None)
        if v is None:
            continue
        out.append(f'{key}="{v}"' if typ is str else f"{key}={v}")
    if getattr(a, "no_fast_forward", False):
        out.append("fast_forward=false")
    if getattr(a, "lenient", False):
        out.append("workload.strict=false")
    return out


def _resolve(a: argparse.Namespace):
    d = load_config_dict(a.config)
    d = apply_overrides(d, list(a.set or []) + _flag_overrides(a))
    if d.get("workload", {}).get("trace") and d["workload"].get("preset"):
        # a trace given on the command line replaces a preset from the file, and vice versa
        if a.trace:
            d["workload"].pop("preset")
        elif a.preset:
            d["workload"].pop("trace")
    base = Path(a.config).parent if a.config else None
    return config_from_dict(d, base)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="TOML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted override, e.g. scheduler.beta=4.0 (repeatable)")
    p.add_argument("--policy")
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--engines", type=int, help="engine count")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--balancer")
    p.add_argument("--mode", choices=("online", "offline_batch"))
    p.add_argument("--rate", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--trace")
    p.add_argument("--lenient", action="store_true", help="ignore unknown keys in trace files")
    p.add_argument("--no-fast-forward", action="store_true", dest="no_fast_forward")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agentsched", description="Program-aware LLM serving simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run one simulation and write reports")
    _add_config_args(p)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./agentsched-out)")

    p = sub.add_parser("sweep", help="latency versus arrival rate for several policies")
    _add_config_args(p)
    p.add_argument("--rates", required=True, help="comma-separated arrival rates")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--policies", help="comma-separated policies (default: the configured one)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV output file (default stdout)")

    p = sub.add_parser("golden", help="replay a worked example against its known answers")
    p.add_argument("name", choices=sorted(GOLDEN))

    p = sub.add_parser("gen", help="write a synthetic JSONL trace")
    p.add_argument("preset", choices=PRESET_NAMES)
    p.add_argument("count", type=int)
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float)
    p.add_argument("--offline", action="store_true", help="all arrivals at t=0")

    p = sub.add_parser("report", help="recompute metrics from an event log")
    p.add_argument("eventlog")
    p.add_argument("--format", choices=("csv", "json", "gantt_csv"), default="json")
    p.add_argument("--out", help="output file (default stdout)")
    return parser


def _write_out(data: bytes, path: str | None) -> None:
    if path:
        Path(path).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def cmd_simulate(a) -> int:
    cfg = _resolve(a)
    out = Path(a.out or os.environ.get(OUT_ENV) or "agentsched-out")
    _info(f"simulating policy={cfg.policy} engines={len(cfg.engines)} seed={cfg.seed}")
    log, rep = run(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(config_to_dict(cfg)))
    (out / "events.jsonl").write_bytes(log.to_jsonl())
    (out / "report.json").write_bytes(export(rep, "json"))
    (out / "programs.csv").write_bytes(export(rep, "csv"))
    (out / "gantt.csv").write_bytes(export(rep, "gantt_csv"))
    (out / "engine_log.csv").write_bytes(log.engine_csv())
    (out / "scheduler_log.csv").write_bytes(log.scheduler_csv())
    (out / "routing_log.csv").write_bytes(log.routing_csv())
    _info(f"finished {rep.finished}/{rep.n_programs} programs in {rep.ticks} ticks; wrote {out}")
    return EXIT_OK


def cmd_sweep(a) -> int:
    cfg = _resolve(a)
    try:
        rates = [float(x) for x in a.rates.split(",") if x.strip()]
    except ValueError:
        raise UsageError("--rates must be comma-separated numbers") from None
    policies = [p.strip() for p in a.policies.split(",")] if a.policies else None
    if a.reps < 0:
        raise UsageError("--reps must be non-negative")
    rows = sweep(cfg, rates, a.reps, policies, jobs=max(1, a.jobs),
                 progress=lambda i, n: _info(f"sweep: {i}/{n} runs"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in SWEEP_COLUMNS])
    _write_out(buf.getvalue().encode(), a.out)
    return EXIT_OK


def cmd_golden(a) -> int:
    rows = GOLDEN[a.name]()
    print(format_rows(a.name, rows))
    ok = all(r.passed is not False for r in rows)
    print(f"{a.name}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gen(a) -> int:
    if a.count < 0:
        raise UsageError("count must be non-negative")
    p = preset(a.preset)
    if isinstance(p, list):
        if a.count != len(p):
            _info(f"gen: {a.preset} is a fixed trace of {len(p)} programs; count ignored")
        specs = p
    else:
        specs = gen_workload(p, a.count, seed=a.seed, rate=a.rate, offline=a.offline)
    try:
        Path(a.out).write_bytes(serialize(specs))
    except OSError as exc:
        raise InputFileError(f"cannot write {a.out}: {exc}") from exc
    _info(f"gen: wrote {len(specs)} programs to {a.out}")
    return EXIT_OK


def cmd_report(a) -> int:
    try:
        data = Path(a.eventlog).read_bytes()
    except OSError as exc:
        raise InputFileError(f"cannot read {a.eventlog}: {exc}") from exc
    try:
        log = EventLog.from_jsonl(data)
    except (ValueError, IndexError, TypeError, json.JSONDecodeError) as exc:
        raise InputFileError(f"{a.eventlog}: not an event log ({exc})") from exc
    _write_out(export(build_report(log), a.format), a.out)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "golden": cmd_golden, "gen": cmd_gen,
            "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        a = build_parser().parse_args(argv)
        return COMMANDS[a.command](a)
    except UsageError as exc:
        _info(str(exc))
        return EXIT_USAGE
    except InputFileError as exc:
        _info(f"error: {exc}")
        return EXIT_NOINPUT
    except ConfigError as exc:
        _info(f"config error: {exc}")
        return EXIT_CONFIG
    except SimulationError as exc:
        _info(f"simulation aborted ({exc.kind}): {exc}")
        return EXIT_OOM if exc.kind == "oom" else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
