"""Experiment configuration: file loading, defaults, and validation.

Configs are TOML (or JSON with the same structure). Every knob has a default;
validation errors name the offending key so the CLI can exit with a precise
message. The resolved config is JSON-serializable for echoing next to results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import racm
from .buckets import round_up
from .pool import ModelShape
from .workload import (
    DriftSchedule,
    EmpiricalHistogram,
    LengthDist,
    Lognormal,
    LognormalMixture,
    Request,
    Segment,
    load_trace,
    synth_trace,
)


class ConfigError(ValueError):
    """Invalid or missing configuration value; message names the key."""


_SECTIONS = ("model", "racm", "devices", "predictor", "buckets", "scheduler", "workload")
_TOP_KEYS = {"seed", "policies", "out_dir", "events", *_SECTIONS}


@dataclass
class ExperimentConfig:
    """Fully resolved experiment parameters."""

    seed: int
    model: ModelShape
    racm: racm.RacmParams
    layout: str
    device_count: int
    device_capacity_bytes: int
    predictor_kind: str
    alpha: float
    tau: float
    sigma_rel: float
    bias: float
    bin_edges: list | None
    bucket_count: int
    window_size: int
    align: int
    refresh_period: int
    max_refreshes: int
    reserve_fraction: float
    large_bound: object  # int or "auto"
    initial_bounds: list | None
    share_policy: str
    max_batch: int
    workload: dict
    policies: list
    out_dir: str
    events: bool

    def resolve_large_bound(self, trace: list[Request]) -> int:
        """Concrete top block size: explicit tokens, or aligned trace maximum."""
        if self.large_bound != "auto":
            return int(self.large_bound)
        biggest = max((r.total_tokens for r in trace), default=1)
        return round_up(biggest, self.align)

    def make_trace(self) -> list[Request]:
        """Load the trace file or synthesize per the workload section."""
        wl = self.workload
        if "trace" in wl:
            return load_trace(wl["trace"])
        return synth_trace(build_schedule(wl), wl["n"], wl["rate"], self.seed)

    def to_dict(self) -> dict:
        """Sectioned, JSON-ready dict; loading it back reproduces this config."""
        r = self.racm
        return {
            "seed": self.seed,
            "policies": list(self.policies),
            "out_dir": self.out_dir,
            "events": self.events,
            "model": {
                "layers": self.model.layers,
                "kv_heads": self.model.kv_heads,
                "head_dim": self.model.head_dim,
                "dtype_bytes": self.model.dtype_bytes,
            },
            "racm": {
                "b_seq": r.b_seq,
                "b_rand": r.b_rand,
                "compute_base": r.compute_base,
                "copy_factor": r.copy_factor,
                "layout": self.layout,
            },
            "devices": {
                "count": self.device_count,
                "capacity_bytes": self.device_capacity_bytes,
            },
            "predictor": {
                "kind": self.predictor_kind,
                "alpha": self.alpha,
                "tau": self.tau,
                "sigma_rel": self.sigma_rel,
                "bias": self.bias,
                **({"bin_edges": self.bin_edges} if self.bin_edges else {}),
            },
            "buckets": {
                "count": self.bucket_count,
                "window": self.window_size,
                "align": self.align,
                "refresh_period": self.refresh_period,
                "max_refreshes": self.max_refreshes,
                "reserve_fraction": self.reserve_fraction,
                "large_bound": self.large_bound,
                "share_policy": self.share_policy,
                **({"initial_bounds": self.initial_bounds} if self.initial_bounds else {}),
            },
            "scheduler": {"max_batch": self.max_batch},
            "workload": self.workload,
        }


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}")


def _section(raw: dict, name: str, allowed: set) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a table/object")
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}: unknown key")
    return sec


def from_dict(raw: dict) -> ExperimentConfig:
    """Apply defaults and validate a parsed config mapping."""
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"{key}: unknown key")

    seed = raw.get("seed", 0)
    _check(isinstance(seed, int), "seed", f"must be an integer, got {seed!r}")

    model_raw = _section(raw, "model", {"layers", "kv_heads", "head_dim", "dtype_bytes"})
    try:
        model = ModelShape(
            layers=model_raw.get("layers", 2),
            kv_heads=model_raw.get("kv_heads", 2),
            head_dim=model_raw.get("head_dim", 64),
            dtype_bytes=model_raw.get("dtype_bytes", 2),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc

    racm_raw = _section(
        raw, "racm",
        {"preset", "b_seq", "b_rand", "compute_base", "copy_factor", "layout"},
    )
    preset = racm_raw.get("preset", "mlu370-like")
    overrides = {
        k: racm_raw[k]
        for k in ("b_seq", "b_rand", "compute_base", "copy_factor")
        if k in racm_raw
    }
    try:
        racm_params = racm.from_preset(preset, **overrides)
    except ValueError as exc:
        raise ConfigError(f"racm: {exc}") from exc
    layout = racm_raw.get("layout", racm.CONTIGUOUS)
    _check(layout in (racm.CONTIGUOUS, racm.PAGED), "racm.layout",
           f"must be 'contiguous' or 'paged', got {layout!r}")

    dev_raw = _section(raw, "devices", {"count", "capacity_bytes"})
    device_count = dev_raw.get("count", 4)
    capacity = dev_raw.get("capacity_bytes", 2**30)
    _check(isinstance(device_count, int) and device_count >= 1,
           "devices.count", f"must be a positive integer, got {device_count!r}")
    _check(isinstance(capacity, int) and capacity > 0,
           "devices.capacity_bytes", f"must be a positive integer, got {capacity!r}")

    pred_raw = _section(
        raw, "predictor", {"kind", "alpha", "tau", "sigma_rel", "bias", "bin_edges"}
    )
    kind = pred_raw.get("kind", "oracle")
    _check(kind in ("oracle", "noisy-oracle", "online-histogram"), "predictor.kind",
           f"must be one of oracle, noisy-oracle, online-histogram, got {kind!r}")
    alpha = float(pred_raw.get("alpha", 0.1))
    _check(alpha >= 0, "predictor.alpha", f"must be >= 0, got {alpha}")
    tau = float(pred_raw.get("tau", 0.8))
    _check(0.0 <= tau <= 1.0, "predictor.tau", f"must be in [0, 1], got {tau}")
    sigma_rel = float(pred_raw.get("sigma_rel", 0.0))
    _check(sigma_rel >= 0, "predictor.sigma_rel", f"must be >= 0, got {sigma_rel}")
    bias = float(pred_raw.get("bias", 0.0))
    bin_edges = pred_raw.get("bin_edges")

    bucket_raw = _section(
        raw, "buckets",
        {"count", "window", "align", "refresh_period", "max_refreshes",
         "reserve_fraction", "large_bound", "initial_bounds", "share_policy"},
    )
    bucket_count = bucket_raw.get("count", 4)
    _check(isinstance(bucket_count, int) and bucket_count >= 1,
           "buckets.count", f"must be a positive integer, got {bucket_count!r}")
    window = bucket_raw.get("window", 1024)
    _check(isinstance(window, int) and window >= 1,
           "buckets.window", f"must be a positive integer, got {window!r}")
    align = bucket_raw.get("align", 16)
    _check(isinstance(align, int) and align >= 1,
           "buckets.align", f"must be a positive integer, got {align!r}")
    refresh_period = bucket_raw.get("refresh_period", max(1, window // 2))
    _check(isinstance(refresh_period, int) and refresh_period >= 1,
           "buckets.refresh_period", f"must be a positive integer, got {refresh_period!r}")
    max_refreshes = bucket_raw.get("max_refreshes", -1)
    _check(isinstance(max_refreshes, int), "buckets.max_refreshes",
           f"must be an integer (-1 for unlimited), got {max_refreshes!r}")
    reserve_fraction = float(bucket_raw.get("reserve_fraction", 0.1))
    _check(0.0 < reserve_fraction < 1.0, "buckets.reserve_fraction",
           f"must be in (0, 1), got {reserve_fraction}")
    large_bound = bucket_raw.get("large_bound", "auto")
    if large_bound != "auto":
        _check(isinstance(large_bound, int) and large_bound >= align,
               "buckets.large_bound",
               f"must be 'auto' or an integer >= align, got {large_bound!r}")
        _check(large_bound % align == 0, "buckets.large_bound",
               f"{large_bound} is not a multiple of align={align}")
    initial_bounds = bucket_raw.get("initial_bounds")
    share_policy = bucket_raw.get("share_policy", "equal")
    _check(share_policy in ("equal", "demand"), "buckets.share_policy",
           f"must be 'equal' or 'demand', got {share_policy!r}")

    sched_raw = _section(raw, "scheduler", {"max_batch"})
    max_batch = sched_raw.get("max_batch", 16)
    _check(isinstance(max_batch, int) and max_batch >= 1,
           "scheduler.max_batch", f"must be a positive integer, got {max_batch!r}")

    workload = _parse_workload(raw.get("workload", {}))

    policies = raw.get("policies", ["adaptive", "static", "oracle"])
    _check(isinstance(policies, list) and policies, "policies",
           f"must be a non-empty list, got {policies!r}")
    for p in policies:
        _check(p in ("adaptive", "static", "oracle"), "policies",
               f"unknown policy {p!r}")

    out_dir = raw.get("out_dir", "out")
    events = bool(raw.get("events", False))

    return ExperimentConfig(
        seed=seed, model=model, racm=racm_params, layout=layout,
        device_count=device_count, device_capacity_bytes=capacity,
        predictor_kind=kind, alpha=alpha, tau=tau, sigma_rel=sigma_rel,
        bias=bias, bin_edges=bin_edges, bucket_count=bucket_count,
        window_size=window, align=align, refresh_period=refresh_period,
        max_refreshes=max_refreshes, reserve_fraction=reserve_fraction,
        large_bound=large_bound, initial_bounds=initial_bounds,
        share_policy=share_policy, max_batch=max_batch, workload=workload,
        policies=policies, out_dir=out_dir, events=events,
    )


def _parse_workload(wl: dict) -> dict:
    if not isinstance(wl, dict):
        raise ConfigError("workload: expected a table/object")
    for key in wl:
        if key not in {"trace", "n", "rate", "segments", "prompt"}:
            raise ConfigError(f"workload.{key}: unknown key")
    if "trace" in wl:
        _check(isinstance(wl["trace"], str), "workload.trace",
               f"must be a path string, got {wl['trace']!r}")
        return {"trace": wl["trace"]}
    out = dict(wl)
    out.setdefault("n", 100)
    out.setdefault("rate", 10.0)
    out.setdefault("segments", [{"start": 0.0, "family": "lognormal", "mu": 4.0, "sigma": 1.0}])
    _check(isinstance(out["n"], int) and out["n"] >= 0, "workload.n",
           f"must be an integer >= 0, got {out['n']!r}")
    _check(out["rate"] > 0, "workload.rate", f"must be positive, got {out['rate']!r}")
    build_schedule(out)  # validate segment specs eagerly
    return out


def _parse_dist(spec: dict, key: str) -> LengthDist:
    family = spec.get("family", "lognormal")
    try:
        if family == "lognormal":
            return Lognormal(mu=float(spec["mu"]), sigma=float(spec["sigma"]))
        if family == "mixture":
            comps = tuple((float(w), float(mu), float(s)) for w, mu, s in spec["components"])
            return LognormalMixture(comps)
        if family == "histogram":
            return EmpiricalHistogram(tuple(spec["values"]), tuple(spec["counts"]))
    except ConfigError:
        raise
    except KeyError as exc:
        raise ConfigError(f"{key}: missing field {exc.args[0]!r} for family {family!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    raise ConfigError(f"{key}.family: unknown family {family!r}")


def build_schedule(wl: dict) -> DriftSchedule:
    """Turn the workload section into a drift schedule."""
    segments = []
    for i, seg in enumerate(wl.get("segments", [])):
        key = f"workload.segments[{i}]"
        if not isinstance(seg, dict):
            raise ConfigError(f"{key}: expected a table/object")
        start = float(seg.get("start", 0.0))
        gen = _parse_dist({k: v for k, v in seg.items() if k != "start"}, key)
        segments.append(Segment(start_time=start, gen=gen))
    kwargs = {}
    if "prompt" in wl:
        kwargs["prompt"] = _parse_dist(wl["prompt"], "workload.prompt")
    try:
        return DriftSchedule(tuple(segments), **kwargs)
    except ValueError as exc:
        raise ConfigError(f"workload.segments: {exc}") from exc


def load_raw(path) -> dict:
    """Parse a TOML or JSON config file into a plain mapping."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix == ".json":
        raw = json.loads(p.read_text())
    else:
        with open(p, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a table/object")
    return raw


def resolve_trace_path(exp: ExperimentConfig, base_dir) -> None:
    """Anchor a relative trace path at the config file and require it to exist."""
    wl = exp.workload
    if "trace" not in wl:
        return
    p = Path(wl["trace"])
    if not p.is_absolute():
        p = Path(base_dir) / p
    if not p.exists():
        raise ConfigError(f"workload.trace: file not found: {p}")
    wl["trace"] = str(p)


def load_config(path) -> ExperimentConfig:
    """Read, validate, and resolve a config file."""
    exp = from_dict(load_raw(path))
    resolve_trace_path(exp, Path(path).parent)
    return exp
