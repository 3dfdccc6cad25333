"""Evaluation quantities computed purely from the simulation event stream.

Utilization and efficiency integrate the piecewise-constant byte totals the
engine embeds in each event, so re-aggregating a saved event log reproduces
the metrics of the original run exactly.

Definitions (documented because reasonable people define these differently):

* ``device_mem_utilization`` — time-averaged live useful KV bytes divided by
  total cluster capacity. Static over-reservation shows up as waste here.
* ``reservation_efficiency`` — time-averaged useful bytes divided by
  time-averaged reserved bytes (how full live blocks are on average).
* ``tps`` — generated tokens per simulated second over the whole run.
* ``bucket_accuracy`` — fraction of requests whose estimated and realized
  footprints land in the same bucket of the config they were tagged under.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

from .buckets import bucket_index


@dataclass(frozen=True)
class SimMetrics:
    """Summary of one policy run."""

    device_mem_utilization: float
    reservation_efficiency: float
    tps: float
    bucket_accuracy: float
    overflow_rate: float
    large_bucket_rate: float
    fallback_rate: float
    p50_latency: float
    p99_latency: float
    completed: int
    generated_tokens: int
    sim_time: float
    migrations: int
    large_reserves: int
    uncertainty_routed: int
    spill_routed: int
    fallback_reserves: int
    reserves: int
    refreshes: int
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def zero(cls) -> "SimMetrics":
        return cls(*(0 if f.type == "int" else 0.0 for f in fields(cls)))


def _nearest_rank(sorted_values: list[float], num: int, den: int) -> float:
    n = len(sorted_values)
    if n == 0:
        return 0.0
    rank = max(1, (num * n + den - 1) // den)
    return sorted_values[rank - 1]


def aggregate(events: list[dict]) -> SimMetrics:
    """Fold an event stream into :class:`SimMetrics`.

    A zero-duration run (e.g. an empty trace) yields all-zero metrics.
    """
    capacity = 0
    last_t = 0.0
    last_useful = 0
    last_reserved = 0
    acc_useful = 0.0
    acc_reserved = 0.0
    est_by_id: dict[int, tuple[int, tuple]] = {}
    latencies: list[float] = []
    hits = 0
    completed = 0
    generated = 0
    migrations = 0
    large_reserves = 0
    uncertainty_routed = 0
    spill_routed = 0
    fallback_reserves = 0
    reserves = 0
    refreshes = 0
    steps = 0

    for rec in events:
        t = rec["t"]
        acc_useful += (t - last_t) * last_useful
        acc_reserved += (t - last_t) * last_reserved
        last_t = t
        if "useful" in rec:
            last_useful = rec["useful"]
            last_reserved = rec["reserved"]
        kind = rec["e"]
        if kind == "start":
            capacity = rec["capacity_bytes"]
        elif kind == "tag":
            est_by_id[rec["id"]] = (rec["est_total"], tuple(rec["bounds"]))
            if rec["routed"] == "uncertainty":
                uncertainty_routed += 1
            elif rec["routed"] == "spill":
                spill_routed += 1
        elif kind == "reserve":
            reserves += 1
            if rec["fallback"]:
                fallback_reserves += 1
            if rec["cls"] == "large":
                large_reserves += 1
        elif kind == "step":
            steps += 1
        elif kind == "migrate":
            migrations += 1
        elif kind == "refresh":
            refreshes += 1
        elif kind == "done":
            completed += 1
            generated += rec["gen"]
            latencies.append(rec["latency"])
            est, bounds = est_by_id[rec["id"]]
            if bucket_index(bounds, est) == bucket_index(bounds, rec["realized_total"]):
                hits += 1

    total_time = last_t
    if total_time <= 0 or completed == 0:
        return SimMetrics.zero()
    latencies.sort()
    return SimMetrics(
        device_mem_utilization=acc_useful / (total_time * capacity) if capacity else 0.0,
        reservation_efficiency=acc_useful / acc_reserved if acc_reserved > 0 else 0.0,
        tps=generated / total_time,
        bucket_accuracy=hits / completed,
        overflow_rate=migrations / completed,
        large_bucket_rate=large_reserves / completed,
        fallback_rate=fallback_reserves / reserves if reserves else 0.0,
        p50_latency=_nearest_rank(latencies, 1, 2),
        p99_latency=_nearest_rank(latencies, 99, 100),
        completed=completed,
        generated_tokens=generated,
        sim_time=total_time,
        migrations=migrations,
        large_reserves=large_reserves,
        uncertainty_routed=uncertainty_routed,
        spill_routed=spill_routed,
        fallback_reserves=fallback_reserves,
        reserves=reserves,
        refreshes=refreshes,
        steps=steps,
    )


def _run_one(args):
    from .engine import run

    exp, policy, trace = args
    return run(exp, policy, trace)


def run_policies(exp, trace, policies=None, parallel: bool = False) -> dict:
    """Run each policy on identical inputs; returns name -> (metrics, events)."""
    names = list(policies) if policies is not None else list(exp.policies)
    jobs = [(exp, name, trace) for name in names]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    return dict(zip(names, results))


_DELTA_FIELDS = ("device_mem_utilization", "reservation_efficiency", "tps", "bucket_accuracy")


def deltas(metrics_by_policy: dict) -> dict:
    """Pairwise absolute and percentage differences on the headline metrics."""
    names = list(metrics_by_policy)
    out: dict[str, dict] = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            entry = {}
            for f in _DELTA_FIELDS:
                va = getattr(metrics_by_policy[a], f)
                vb = getattr(metrics_by_policy[b], f)
                entry[f] = {
                    "abs": va - vb,
                    "pct": ((va - vb) / vb * 100.0) if vb else None,
                }
            out[f"{a}_vs_{b}"] = entry
    return out


def compare(exp, trace, policies=None, parallel: bool = False) -> dict:
    """Run policies on identical inputs; returns {"metrics": ..., "deltas": ...}."""
    results = run_policies(exp, trace, policies, parallel)
    metrics = {name: m for name, (m, _) in results.items()}
    return {"metrics": metrics, "deltas": deltas(metrics)}


def to_csv(metrics_by_policy: dict) -> str:
    """One row per policy with stable columns, ready for plotting."""
    columns = ["policy"] + [f.name for f in fields(SimMetrics)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for name, metrics in metrics_by_policy.items():
        writer.writerow({"policy": name, **metrics.to_dict()})
    return buf.getvalue()
