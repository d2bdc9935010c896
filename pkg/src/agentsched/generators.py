"""Synthetic workloads: distribution-parameterized program generators,
Poisson arrivals, and named presets.

The ShareGPT/BFCL/LATS presets only pin the summary statistics that are
known for those traces (means and maxima); everything else about the
distribution shape is a modeling choice made here. Long-tailed quantities use
a log-normal truncated to ``[lo, hi]`` whose ``tail_quantile`` quantile sits
at ``hi`` and whose (rounded, truncated) mean matches the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import Sequence, Union

import numpy as np
from scipy import optimize, stats

from .workload import CallSpec, ProgramSpec, load_trace


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based (Philox) generator so streams are stable across platforms."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


# -- distribution descriptors --------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("Fixed value must be non-negative")

    @property
    def mean(self) -> float:
        return float(self.value)

    @property
    def support_min(self) -> float:
        return float(self.value)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        if size is None:
            rng.random()  # keep stream consumption uniform across families
            return self.value
        rng.random(size)
        return np.full(size, self.value)


@dataclass(frozen=True)
class UniformInt:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError("UniformInt needs 0 <= lo <= hi")

    @property
    def mean(self) -> float:
        return (self.lo + self.hi) / 2

    @property
    def support_min(self) -> float:
        return float(self.lo)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        u = rng.random(size)
        v = self.lo + np.floor(u * (self.hi - self.lo + 1)).astype(np.int64)
        return int(v) if size is None else v


@dataclass(frozen=True)
class Exponential:
    """Continuous exponential with the given mean (used for delays)."""

    mean: float

    def __post_init__(self):
        if self.mean <= 0:
            raise ValueError("Exponential mean must be positive")

    @property
    def support_min(self) -> float:
        return 0.0

    def sample(self, rng: np.random.Generator, size: int | None = None):
        u = rng.random(size)
        v = -np.log1p(-u) * self.mean
        return float(v) if size is None else v


@dataclass(frozen=True)
class TruncLogNormal:
    """Log-normal truncated to ``[lo, hi]``, fitted to a target mean.

    ``sigma`` is solved so that the untruncated ``tail_quantile`` quantile is
    ``hi`` and the mean of the truncated (and, if ``integer``, rounded)
    variable equals ``target_mean``. Pass ``sigma`` explicitly to skip the
    quantile condition and fit only the location.
    """

    target_mean: float
    hi: float
    lo: float = 1.0
    integer: bool = True
    tail_quantile: float = 0.999
    sigma: float | None = None

    def __post_init__(self):
        if not (0 <= self.lo < self.target_mean < self.hi):
            raise ValueError(f"need 0 <= lo < mean < hi, got lo={self.lo} mean={self.target_mean} hi={self.hi}")
        if not 0.5 < self.tail_quantile < 1:
            raise ValueError("tail_quantile must be in (0.5, 1)")
        if self.lo == 0 and not self.integer:
            raise ValueError("continuous log-normal needs lo > 0")

    @property
    def support_min(self) -> float:
        return float(self.lo)

    @cached_property
    def params(self) -> tuple[float, float]:
        """(mu, sigma) of the underlying normal in log space."""
        z = stats.norm.ppf(self.tail_quantile)
        lhi = math.log(self.hi)
        if self.sigma is not None:
            s = self.sigma
            llo = math.log(max(self.lo, 1e-12))
            # a few sigmas beyond the support keeps the truncated mass representable
            mu = optimize.brentq(lambda m: self._mean(m, s) - self.target_mean, llo - 5 * s, lhi + 5 * s)
            return mu, s

        def gap(s):
            return self._mean(lhi - z * s, s) - self.target_mean

        # mean(sigma) falls from ~hi then rises again; take the first crossing
        grid = np.geomspace(1e-3, 6.0, 400)
        vals = [gap(s) for s in grid]
        for a, b, fa, fb in zip(grid, grid[1:], vals, vals[1:]):
            if fa > 0 >= fb:
                s = optimize.brentq(gap, a, b, xtol=1e-12)
                return lhi - z * s, s
        raise ValueError(f"cannot fit log-normal with mean {self.target_mean} and max {self.hi}")

    def _mean(self, mu: float, s: float) -> float:
        lo = max(self.lo, 1e-12)
        if not self.integer:
            la, lb = math.log(lo), math.log(self.hi)
            den = stats.norm.cdf((lb - mu) / s) - stats.norm.cdf((la - mu) / s)
            num = stats.norm.cdf((lb - mu - s * s) / s) - stats.norm.cdf((la - mu - s * s) / s)
            return math.exp(mu + s * s / 2) * num / den
        ks = np.arange(int(self.lo), int(self.hi) + 1)
        edges = np.concatenate([[lo], ks[1:] - 0.5, [self.hi]])
        cdf = stats.norm.cdf((np.log(edges) - mu) / s)
        p = np.diff(cdf)
        return float((ks * p).sum() / p.sum())

    @property
    def mean(self) -> float:
        return self._mean(*self.params)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        mu, s = self.params
        lo = max(self.lo, 1e-12)
        a = stats.norm.cdf((math.log(lo) - mu) / s)
        b = stats.norm.cdf((math.log(self.hi) - mu) / s)
        u = rng.random(size)
        x = np.exp(mu + s * stats.norm.ppf(a + u * (b - a)))
        if self.integer:
            x = np.clip(np.floor(x + 0.5), self.lo, self.hi).astype(np.int64)
            return int(x) if size is None else x
        return float(x) if size is None else x


Dist = Union[Fixed, UniformInt, Exponential, TruncLogNormal]


# -- DAG shapes ------------------------------------------------------------------

@dataclass(frozen=True)
class Chain:
    """Single-threaded: call k depends on call k-1."""


@dataclass(frozen=True)
class ForkJoin:
    """``depth`` rounds of (fork ``width`` parallel calls, then one join call)."""

    width: Dist
    depth: Dist


@dataclass(frozen=True)
class Mcts:
    """Tree-search rounds: expand ``expansion`` children off the last join,
    then join them, until the sampled call count is reached."""

    expansion: int = 5

    def __post_init__(self):
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")


DagShape = Union[Chain, ForkJoin, Mcts]


@dataclass(frozen=True)
class WorkloadParams:
    calls_per_program: Dist
    prefill_tokens: Dist
    decode_tokens: Dist
    dag_shape: DagShape = Chain()
    interrupt_delay: Dist = Fixed(0.0)
    arrival_rate: float = 1.0
    system_prompt_tokens: int = 0
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be positive")
        if self.system_prompt_tokens < 0:
            raise ValueError("system_prompt_tokens must be non-negative")
        if self.decode_tokens.support_min < 1:
            raise ValueError("decode_tokens support must start at >= 1")
        if self.calls_per_program.support_min < 1:
            raise ValueError("calls_per_program support must start at >= 1")


@dataclass(frozen=True)
class MixedParams:
    """Equal-probability mixture over component workloads."""

    components: tuple[WorkloadParams, ...]
    arrival_rate: float = 1.0
    seed: int = 0
    name: str = "mixed"


def _dag_parents(shape: DagShape, n_calls: int, rng: np.random.Generator) -> list[list[int]]:
    if isinstance(shape, Chain):
        return [[]] + [[k - 1] for k in range(1, n_calls)]
    if isinstance(shape, Mcts):
        parents: list[list[int]] = [[]]
        join = 0
        while len(parents) < n_calls:
            kids = []
            for _ in range(shape.expansion):
                if len(parents) >= n_calls:
                    break
                parents.append([join])
                kids.append(len(parents) - 1)
            if len(parents) >= n_calls:
                break
            parents.append(kids)
            join = len(parents) - 1
        return parents
    if isinstance(shape, ForkJoin):
        depth = int(shape.depth.sample(rng))
        parents = [[]]
        join = 0
        for _ in range(max(depth, 0)):
            w = max(int(shape.width.sample(rng)), 1)
            kids = []
            for _ in range(w):
                parents.append([join])
                kids.append(len(parents) - 1)
            parents.append(kids)
            join = len(parents) - 1
        return parents
    raise TypeError(f"unknown dag shape {shape!r}")


def gen_program(params: WorkloadParams | MixedParams, rng: np.random.Generator,
                program_id: str = "p0", arrival_time: float = 0.0) -> ProgramSpec:
    """Draw one program. ``ForkJoin`` ignores ``calls_per_program``."""
    if isinstance(params, MixedParams):
        k = int(rng.integers(len(params.components)))
        return gen_program(params.components[k], rng, program_id, arrival_time)
    n = int(params.calls_per_program.sample(rng))
    parents = _dag_parents(params.dag_shape, n, rng)
    m = len(parents)
    prefill = np.atleast_1d(params.prefill_tokens.sample(rng, m))
    decode = np.atleast_1d(params.decode_tokens.sample(rng, m))
    delay = np.atleast_1d(params.interrupt_delay.sample(rng, m))
    calls = []
    for k, ps in enumerate(parents):
        calls.append(CallSpec(
            call_id=f"c{k}",
            prefill_tokens=int(prefill[k]),
            decode_tokens=max(int(decode[k]), 1),
            parents=tuple(f"c{p}" for p in ps),
            # roots are submitted when the program arrives
            interrupt_delay=float(delay[k]) if ps else 0.0,
        ))
    return ProgramSpec(program_id=program_id, arrival_time=float(arrival_time), calls=tuple(calls),
                       system_prompt_tokens=params.system_prompt_tokens)


def gen_arrivals(rate: float, count: int, rng: np.random.Generator) -> list[float]:
    """Poisson arrival times via inverse-CDF exponential gaps, starting after 0."""
    if rate <= 0:
        raise ValueError("arrival rate must be positive")
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    gaps = -np.log1p(-rng.random(count)) / rate
    return np.cumsum(gaps).tolist()


def gen_workload(params: WorkloadParams | MixedParams, count: int, seed: int | None = None,
                 rate: float | None = None, offline: bool = False) -> list[ProgramSpec]:
    """``count`` programs with Poisson arrivals (or all at t=0 when ``offline``).

    Program bodies and arrival gaps use independent streams, so changing the
    rate rescales arrival times without changing the programs.
    """
    seed = params.seed if seed is None else seed
    body_ss, arrival_ss = np.random.SeedSequence(seed).spawn(2)
    body_rng = make_rng(body_ss)
    if offline:
        times = [0.0] * count
    else:
        times = gen_arrivals(rate if rate is not None else params.arrival_rate, count, make_rng(arrival_ss))
    width = max(len(str(max(count - 1, 0))), 4)
    return [gen_program(params, body_rng, f"p{i:0{width}d}", t) for i, t in enumerate(times)]


# -- presets ----------------------------------------------------------------------

SHAREGPT = WorkloadParams(
    name="sharegpt",
    calls_per_program=TruncLogNormal(6.66, 80),
    prefill_tokens=TruncLogNormal(256, 2048),
    decode_tokens=TruncLogNormal(277, 2048),
    dag_shape=Chain(),
    interrupt_delay=Exponential(50.0),
    system_prompt_tokens=64,
)

BFCL = WorkloadParams(
    name="bfcl",
    calls_per_program=TruncLogNormal(10.75, 70),
    prefill_tokens=TruncLogNormal(735.06, 4096),
    decode_tokens=TruncLogNormal(34.14, 512),
    dag_shape=Chain(),
    interrupt_delay=Exponential(5.0),
    system_prompt_tokens=512,
)

LATS = WorkloadParams(
    name="lats",
    calls_per_program=TruncLogNormal(159.7, 512),
    prefill_tokens=TruncLogNormal(467.2, 2048),
    decode_tokens=TruncLogNormal(72.6, 512),
    dag_shape=Mcts(expansion=5),
    interrupt_delay=Exponential(2.0),
    system_prompt_tokens=256,
)

MIXED = MixedParams(components=(SHAREGPT, BFCL, LATS))

PRESET_NAMES = ("sharegpt", "bfcl", "lats", "mixed", "fig2", "fig9")


def fig2_trace() -> list[ProgramSpec]:
    """Four chains submitted together: A {4,3,1,1}, B {3,3,4}, C {1,2}, D {4}."""
    return _bundled("fig2.jsonl")


def fig9_trace() -> list[ProgramSpec]:
    """One fork-join DAG whose critical path (r-a-d-s) is 11 decode steps.

    On a batch-size-2 engine, longest-remaining-path-first finishes it in 11
    steps and shortest-remaining-path-first in 14.
    """
    return _bundled("fig9.jsonl")


def _bundled(name: str) -> list[ProgramSpec]:
    data = resources.files("agentsched").joinpath("data", name).read_bytes()
    return load_trace(data)


def preset(name: str) -> WorkloadParams | MixedParams | list[ProgramSpec]:
    """Named workload: parameters for the synthetic ones, a fixed trace for fig2/fig9."""
    table = {"sharegpt": SHAREGPT, "bfcl": BFCL, "lats": LATS, "mixed": MIXED}
    if name in table:
        return table[name]
    if name == "fig2":
        return fig2_trace()
    if name == "fig9":
        return fig9_trace()
    raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def with_rate(params: WorkloadParams | MixedParams, rate: float) -> WorkloadParams | MixedParams:
    return replace(params, arrival_rate=rate)
