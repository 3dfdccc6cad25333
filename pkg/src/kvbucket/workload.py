"""Request traces: JSONL loading and synthetic heavy-tailed, drifting generation.

A trace is a list of :class:`Request` sorted by arrival time. Synthetic traces
draw arrivals from a Poisson process and lengths from a per-segment
distribution, so workloads can shift mid-trace.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np


class TraceError(ValueError):
    """Raised for malformed trace files or invalid distribution parameters."""


@dataclass(frozen=True)
class Request:
    """One serving request.

    ``true_gen_len`` is the realized generation length; only oracle-style
    predictors may look at it before decoding finishes.
    """

    id: int
    arrival_time: float
    prompt_len: int
    true_gen_len: int
    meta: dict = field(default_factory=dict)

    @property
    def total_tokens(self) -> int:
        """Prompt plus generation tokens, the request's full KV footprint."""
        return self.prompt_len + self.true_gen_len


class LengthDist:
    """Base class for generation/prompt length distributions.

    Subclasses draw a continuous positive sample; callers round up to an
    integer token count with a floor of 1.
    """

    def sample(self, rng: np.random.Generator) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class Lognormal(LengthDist):
    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise TraceError(f"lognormal sigma must be positive, got {self.sigma}")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.lognormal(self.mu, self.sigma))

    def median(self) -> float:
        return math.exp(self.mu)


@dataclass(frozen=True)
class LognormalMixture(LengthDist):
    """Mixture of lognormal components, given as (weight, mu, sigma) triples."""

    components: tuple

    def __post_init__(self) -> None:
        if not self.components:
            raise TraceError("mixture needs at least one component")
        total = 0.0
        for w, mu, sigma in self.components:
            if w <= 0:
                raise TraceError(f"mixture weight must be positive, got {w}")
            if sigma <= 0:
                raise TraceError(f"lognormal sigma must be positive, got {sigma}")
            total += w
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "_total_weight", total)

    def sample(self, rng: np.random.Generator) -> float:
        pick = rng.random() * self._total_weight
        acc = 0.0
        for w, mu, sigma in self.components:
            acc += w
            if pick <= acc:
                return float(rng.lognormal(mu, sigma))
        w, mu, sigma = self.components[-1]
        return float(rng.lognormal(mu, sigma))


@dataclass(frozen=True)
class EmpiricalHistogram(LengthDist):
    """Draws integer lengths proportionally to observed counts."""

    values: tuple
    counts: tuple

    def __post_init__(self) -> None:
        if not self.values or len(self.values) != len(self.counts):
            raise TraceError("histogram needs matching non-empty values and counts")
        for v in self.values:
            if not isinstance(v, int) or v < 1:
                raise TraceError(f"histogram values must be integers >= 1, got {v!r}")
        for c in self.counts:
            if c <= 0:
                raise TraceError(f"histogram counts must be positive, got {c}")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "counts", tuple(self.counts))

    def sample(self, rng: np.random.Generator) -> float:
        weights = np.asarray(self.counts, dtype=float)
        idx = rng.choice(len(self.values), p=weights / weights.sum())
        return float(self.values[idx])


@dataclass(frozen=True)
class Segment:
    """A stationary stretch of the workload starting at ``start_time``."""

    start_time: float
    gen: LengthDist
    prompt: LengthDist | None = None


# Prompt lengths default to a modest lognormal; segments may override it.
DEFAULT_PROMPT_DIST = Lognormal(mu=4.0, sigma=0.5)


@dataclass(frozen=True)
class DriftSchedule:
    """Piecewise-stationary workload: segment switches at fixed times."""

    segments: tuple
    prompt: LengthDist = DEFAULT_PROMPT_DIST

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        if not segs:
            raise TraceError("schedule needs at least one segment")
        if segs[0].start_time != 0:
            raise TraceError("first segment must start at time 0")
        for a, b in zip(segs, segs[1:]):
            if b.start_time <= a.start_time:
                raise TraceError("segment start times must be strictly increasing")
        object.__setattr__(self, "segments", segs)

    def segment_at(self, t: float) -> Segment:
        starts = [s.start_time for s in self.segments]
        return self.segments[bisect_right(starts, t) - 1]


def _round_length(x: float) -> int:
    # Continuous draws become whole tokens; never zero-length.
    return max(1, math.ceil(x))


def synth_trace(
    schedule: DriftSchedule,
    n: int,
    arrival_rate: float,
    seed: int,
) -> list[Request]:
    """Generate ``n`` requests with Poisson arrivals at ``arrival_rate`` req/s.

    Lengths are drawn from the segment active at each request's arrival time.
    Deterministic for a fixed ``(schedule, n, arrival_rate, seed)``.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if arrival_rate <= 0:
        raise ValueError(f"arrival_rate must be positive, got {arrival_rate}")
    rng = np.random.default_rng(seed)
    requests: list[Request] = []
    t = 0.0
    for i in range(n):
        t += float(rng.exponential(1.0 / arrival_rate))
        seg = schedule.segment_at(t)
        prompt_dist = seg.prompt if seg.prompt is not None else schedule.prompt
        prompt_len = _round_length(prompt_dist.sample(rng))
        gen_len = _round_length(seg.gen.sample(rng))
        requests.append(Request(i, t, prompt_len, gen_len))
    return requests


def load_trace(path) -> list[Request]:
    """Load a JSONL trace, returning requests sorted by arrival time.

    Required keys per line: ``id``, ``arrival_time``, ``prompt_len``,
    ``true_gen_len``; optional ``meta`` map. Unknown keys are ignored.
    Raises :class:`TraceError` naming the offending line.
    """
    requests: list[Request] = []
    seen_ids: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            requests.append(_parse_record(raw, lineno, seen_ids))
    requests.sort(key=lambda r: r.arrival_time)
    return requests


def _parse_record(raw, lineno: int, seen_ids: dict[int, int]) -> Request:
    if not isinstance(raw, dict):
        raise TraceError(f"line {lineno}: expected a JSON object")
    try:
        rid = raw["id"]
        arrival = raw["arrival_time"]
        prompt_len = raw["prompt_len"]
        gen_len = raw["true_gen_len"]
    except KeyError as exc:
        raise TraceError(f"line {lineno}: missing key {exc.args[0]!r}") from exc
    if not isinstance(rid, int) or isinstance(rid, bool):
        raise TraceError(f"line {lineno}: id must be an integer")
    if not isinstance(arrival, (int, float)) or isinstance(arrival, bool):
        raise TraceError(f"line {lineno}: arrival_time must be a number")
    for key, val in (("prompt_len", prompt_len), ("true_gen_len", gen_len)):
        if not isinstance(val, int) or isinstance(val, bool):
            raise TraceError(f"line {lineno}: {key} must be an integer")
        if val < 1:
            raise TraceError(f"line {lineno}: {key} must be >= 1, got {val}")
    if rid in seen_ids:
        raise TraceError(
            f"line {lineno}: duplicate id {rid} (first seen on line {seen_ids[rid]})"
        )
    seen_ids[rid] = lineno
    meta = raw.get("meta", {})
    if not isinstance(meta, dict):
        raise TraceError(f"line {lineno}: meta must be an object")
    return Request(rid, float(arrival), prompt_len, gen_len, meta)


def save_trace(requests: list[Request], path) -> None:
    """Write requests as JSONL in the trace file format."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in requests:
            rec = {
                "id": r.id,
                "arrival_time": r.arrival_time,
                "prompt_len": r.prompt_len,
                "true_gen_len": r.true_gen_len,
            }
            if r.meta:
                rec["meta"] = r.meta
            fh.write(json.dumps(rec) + "\n")
