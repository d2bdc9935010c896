"""Simulation configuration and its TOML file form.

Precedence, lowest to highest: built-in defaults, the config file, ``--set
dotted.key=value`` overrides, then dedicated CLI flags (which are translated
into overrides and applied last).

File layout::

    seed = 0
    mode = "online"            # or "offline_batch"
    fast_forward = true

    [engine]                   # template; repeated ``count`` times
    count = 1
    max_batch_size = 2
    swap_model = "per_block"   # or "bulk"
    ...

    [scheduler]
    policy = "plas"
    K = 8                      # exponential banding when boundaries is absent
    base = 2.0
    growth = 4.0
    # boundaries = [2.0]       # explicit K-1 cut points, with quanta of length K
    # quanta = [1.0, inf]
    beta = 2.0

    [balancer]
    policy = "locality"
    token_threshold = 2048

    [workload]
    preset = "sharegpt"        # or trace = "path.jsonl"
    count = 100
    rate = 0.05

    [horizon]
    max_ticks = 1000000
"""

from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .balancer import BalancerConfig
from .engine import BulkSwap, EngineConfig, PerBlockSwap
from .scheduler import POLICIES, QueueConfig
from .workload import ProgramSpec

MODES = ("online", "offline_batch")


class ConfigError(ValueError):
    pass


class InputFileError(ConfigError):
    """A file named by the configuration could not be read."""


@dataclass
class WorkloadConfig:
    preset: str | None = None
    trace: str | None = None
    count: int = 100
    rate: float | None = None
    seed: int | None = None
    strict: bool = True
    programs: list[ProgramSpec] | None = None


@dataclass
class HorizonConfig:
    max_ticks: int | None = None
    max_programs: int | None = None

    def __post_init__(self):
        for name in ("max_ticks", "max_programs"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"horizon.{name} must be positive")


@dataclass
class SimConfig:
    engines: list[EngineConfig] = field(default_factory=lambda: [EngineConfig()])
    policy: str = "plas"
    queue: QueueConfig = field(default_factory=QueueConfig.exponential)
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    mode: str = "online"
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    seed: int = 0
    fast_forward: bool = True

    def __post_init__(self):
        if not self.engines:
            raise ConfigError("need at least one engine")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    def with_policy(self, policy: str) -> "SimConfig":
        return replace(self, policy=policy)


# -- dict <-> config --------------------------------------------------------------

_ENGINE_KEYS = {f.name for f in fields(EngineConfig)} - {"swap_model"}
_SWAP_KEYS = {"swap_model", "swap_cost_per_block", "swap_fixed_cost", "swap_cost_per_block_bulk"}
_SCHED_KEYS = {"policy", "K", "base", "growth", "boundaries", "quanta", "beta", "mlfq_wait_threshold",
               "last_quantum"}
_TOP_KEYS = {"seed", "mode", "fast_forward", "engine", "engines", "scheduler", "balancer", "workload",
             "horizon"}


def _check_keys(section: str, d: dict, allowed: set[str]) -> None:
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")


def _engine_from_dict(d: dict) -> tuple[EngineConfig, int]:
    d = dict(d)
    count = d.pop("count", 1)
    _check_keys("engine", d, _ENGINE_KEYS | _SWAP_KEYS)
    model = d.pop("swap_model", "per_block")
    per_block = d.pop("swap_cost_per_block", 0.0)
    fixed = d.pop("swap_fixed_cost", 0.0)
    bulk = d.pop("swap_cost_per_block_bulk", 0.0)
    if model == "per_block":
        swap = PerBlockSwap(per_block)
    elif model == "bulk":
        swap = BulkSwap(fixed, bulk)
    else:
        raise ConfigError("engine.swap_model must be 'per_block' or 'bulk'")
    if not isinstance(count, int) or count < 1:
        raise ConfigError("engine.count must be a positive integer")
    return EngineConfig(swap_model=swap, **d), count


def _queue_from_dict(d: dict) -> QueueConfig:
    beta = float(d.get("beta", 2.0))
    thr = float(d.get("mlfq_wait_threshold", 1000.0))
    if "boundaries" in d or "quanta" in d:
        if "boundaries" not in d or "quanta" not in d:
            raise ConfigError("scheduler.boundaries and scheduler.quanta must be given together")
        return QueueConfig(edges=tuple(d["boundaries"]), quanta=tuple(d["quanta"]), beta=beta,
                           mlfq_wait_threshold=thr)
    return QueueConfig.exponential(K=int(d.get("K", 8)), base=float(d.get("base", 2.0)),
                                   growth=float(d.get("growth", 4.0)), beta=beta,
                                   last_quantum=float(d.get("last_quantum", math.inf)),
                                   mlfq_wait_threshold=thr)


def config_from_dict(d: dict, base_dir: Path | None = None) -> SimConfig:
    try:
        _check_keys("top level", d, _TOP_KEYS)
        if "engine" in d and "engines" in d:
            raise ConfigError("use either [engine] or [[engines]], not both")
        engines: list[EngineConfig] = []
        if "engines" in d:
            for ed in d["engines"]:
                e, n = _engine_from_dict(ed)
                engines.extend([e] * n)
        else:
            e, n = _engine_from_dict(d.get("engine", {}))
            engines = [e] * n
        sd = dict(d.get("scheduler", {}))
        _check_keys("scheduler", sd, _SCHED_KEYS)
        queue = _queue_from_dict(sd)
        bd = dict(d.get("balancer", {}))
        _check_keys("balancer", bd, {"policy", "token_threshold"})
        balancer = BalancerConfig(**bd)
        wd = dict(d.get("workload", {}))
        _check_keys("workload", wd, {"preset", "trace", "count", "rate", "seed", "strict"})
        if wd.get("trace") and wd.get("preset"):
            raise ConfigError("workload.trace and workload.preset are mutually exclusive")
        if wd.get("trace") and base_dir is not None and not Path(wd["trace"]).is_absolute():
            wd["trace"] = str(base_dir / wd["trace"])
        workload = WorkloadConfig(**wd)
        if workload.count < 0:
            raise ConfigError("workload.count must be non-negative")
        if workload.rate is not None and workload.rate <= 0:
            raise ConfigError("workload.rate must be positive")
        hd = dict(d.get("horizon", {}))
        _check_keys("horizon", hd, {"max_ticks", "max_programs"})
        return SimConfig(
            engines=engines,
            policy=sd.get("policy", "plas"),
            queue=queue,
            balancer=balancer,
            workload=workload,
            mode=d.get("mode", "online"),
            horizon=HorizonConfig(**hd),
            seed=int(d.get("seed", 0)),
            fast_forward=bool(d.get("fast_forward", True)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: SimConfig) -> dict:
    """Inverse of :func:`config_from_dict` (engines written as a list)."""
    engines = []
    for e in cfg.engines:
        ed = {f.name: getattr(e, f.name) for f in fields(EngineConfig) if f.name != "swap_model"}
        if isinstance(e.swap_model, BulkSwap):
            ed.update(swap_model="bulk", swap_fixed_cost=e.swap_model.fixed_cost,
                      swap_cost_per_block_bulk=e.swap_model.cost_per_block_bulk)
        else:
            ed.update(swap_model="per_block", swap_cost_per_block=e.swap_model.cost_per_block)
        engines.append({k: v for k, v in ed.items() if v is not None})
    q = cfg.queue
    w = cfg.workload
    return {
        "seed": cfg.seed,
        "mode": cfg.mode,
        "fast_forward": cfg.fast_forward,
        "engines": engines,
        "scheduler": {"policy": cfg.policy, "boundaries": list(q.edges), "quanta": list(q.quanta),
                      "beta": q.beta, "mlfq_wait_threshold": q.mlfq_wait_threshold},
        "balancer": {"policy": cfg.balancer.policy, "token_threshold": cfg.balancer.token_threshold},
        "workload": {k: v for k, v in (("preset", w.preset), ("trace", w.trace), ("count", w.count),
                                       ("rate", w.rate), ("seed", w.seed), ("strict", w.strict))
                     if v is not None},
        "horizon": {k: v for k, v in (("max_ticks", cfg.horizon.max_ticks),
                                      ("max_programs", cfg.horizon.max_programs)) if v is not None},
    }


def dump_toml(d: dict) -> str:
    """Minimal TOML writer for the shapes produced by :func:`config_to_dict`."""
    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return ("inf" if v > 0 else "-inf") if math.isinf(v) else repr(v)
        if isinstance(v, int):
            return str(v)
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        raise TypeError(f"cannot write {v!r} as TOML")

    lines = [f"{k} = {val(v)}" for k, v in d.items() if not isinstance(v, (dict, list)) or
             (isinstance(v, list) and not (v and isinstance(v[0], dict)))]
    for k, v in d.items():
        if isinstance(v, dict):
            lines += ["", f"[{k}]"] + [f"{kk} = {val(vv)}" for kk, vv in v.items()]
        elif isinstance(v, list) and v and isinstance(v[0], dict):
            for item in v:
                lines += ["", f"[[{k}]]"] + [f"{kk} = {val(vv)}" for kk, vv in item.items()]
    return "\n".join(lines) + "\n"


# -- overrides ------------------------------------------------------------------------

def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form dotted.key=value")
    path, raw = text.split("=", 1)
    keys = [k.strip() for k in path.strip().split(".")]
    if not all(keys):
        raise ConfigError(f"bad override key {path!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare words are strings
    return keys, value


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    d = copy.deepcopy(d)
    for text in overrides:
        keys, value = parse_override(text)
        node = d
        for k in keys[:-1]:
            if k == "engine" and "engines" in node:
                raise ConfigError("engine.* overrides need the [engine] form, not [[engines]]")
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-table")
        node[keys[-1]] = value
    return d


def load_config_dict(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> SimConfig:
    d = apply_overrides(load_config_dict(path), overrides)
    return config_from_dict(d, Path(path).parent if path else None)
