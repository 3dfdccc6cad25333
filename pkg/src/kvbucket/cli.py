"""Experiment runner CLI.

Subcommands:

* ``run``       — load a config, simulate the configured policies on one trace,
                  write metrics JSON, a comparison CSV, the resolved config, and
                  (optionally) per-policy event logs.
* ``gen-trace`` — synthesize a JSONL trace from a drift schedule.
* ``replay``    — re-aggregate a saved event log into the same metrics JSON.

Exit codes: 0 success, 1 runtime error, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (
    ConfigError,
    build_schedule,
    from_dict,
    load_raw,
    resolve_trace_path,
)
from .engine import SimulationError
from .metrics import deltas, run_policies, to_csv
from .metrics import aggregate
from .workload import TraceError, save_trace, synth_trace


def _metrics_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True)


def _apply_overrides(raw: dict, args: argparse.Namespace) -> None:
    """Fold command-line knob overrides into the raw config mapping."""
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.policies is not None:
        raw["policies"] = [p.strip() for p in args.policies.split(",") if p.strip()]
    if args.out_dir is not None:
        raw["out_dir"] = args.out_dir
    if args.events:
        raw["events"] = True
    pred = raw.setdefault("predictor", {})
    for key in ("alpha", "tau", "sigma_rel", "bias"):
        value = getattr(args, key)
        if value is not None:
            pred[key] = value
    buckets = raw.setdefault("buckets", {})
    for arg, key in (
        ("buckets", "count"),
        ("window", "window"),
        ("align", "align"),
        ("refresh_period", "refresh_period"),
        ("max_refreshes", "max_refreshes"),
        ("reserve_fraction", "reserve_fraction"),
    ):
        value = getattr(args, arg)
        if value is not None:
            buckets[key] = value
    if args.max_batch is not None:
        raw.setdefault("scheduler", {})["max_batch"] = args.max_batch


def _summary_table(metrics_by_policy: dict) -> str:
    cols = [
        ("policy", "{}"),
        ("util", "{:.4f}"),
        ("res_eff", "{:.4f}"),
        ("tps", "{:.1f}"),
        ("accuracy", "{:.4f}"),
        ("overflow", "{:.4f}"),
        ("large", "{:.4f}"),
        ("p99_lat", "{:.2f}"),
    ]
    lines = ["  ".join(f"{name:>10}" for name, _ in cols)]
    for name, m in metrics_by_policy.items():
        values = [
            name, m.device_mem_utilization, m.reservation_efficiency, m.tps,
            m.bucket_accuracy, m.overflow_rate, m.large_bucket_rate, m.p99_latency,
        ]
        lines.append("  ".join(f"{fmt.format(v):>10}" for (_, fmt), v in zip(cols, values)))
    return "\n".join(lines)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        raw = load_raw(args.config)
        _apply_overrides(raw, args)
        exp = from_dict(raw)
        resolve_trace_path(exp, Path(args.config).parent)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        trace = exp.make_trace()
        results = run_policies(exp, trace, parallel=args.parallel)
    except (TraceError, SimulationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_by_policy = {name: m for name, (m, _) in results.items()}
    payload = {
        "policies": {name: m.to_dict() for name, m in metrics_by_policy.items()},
        "deltas": deltas(metrics_by_policy),
    }
    (out / "metrics.json").write_text(_metrics_json(payload) + "\n")
    (out / "comparison.csv").write_text(to_csv(metrics_by_policy))
    (out / "config.json").write_text(json.dumps(exp.to_dict(), indent=2, sort_keys=True) + "\n")
    if exp.events:
        for name, (_, events) in results.items():
            with open(out / f"events_{name}.jsonl", "w") as fh:
                for rec in events:
                    fh.write(json.dumps(rec) + "\n")
    print(_summary_table(metrics_by_policy))
    print(f"\nwrote {out / 'metrics.json'}, {out / 'comparison.csv'}, {out / 'config.json'}"
          + (", event logs" if exp.events else ""))
    return 0


def cmd_gen_trace(args: argparse.Namespace) -> int:
    try:
        if args.schedule:
            wl = load_raw(args.schedule)
            schedule = build_schedule(wl.get("workload", wl))
        else:
            spec = {"segments": [{"start": 0.0, "family": "lognormal",
                                  "mu": args.mu, "sigma": args.sigma}]}
            schedule = build_schedule(spec)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        trace = synth_trace(schedule, args.n, args.rate, args.seed)
        save_trace(trace, args.out)
    except (TraceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    gen_lengths = sorted(r.true_gen_len for r in trace)
    if gen_lengths:
        n = len(gen_lengths)
        median = gen_lengths[max(1, (n + 1) // 2) - 1]
        p99 = gen_lengths[max(1, (99 * n + 99) // 100) - 1]
    else:
        median = p99 = 0
    print(f"wrote {args.out}: count={len(trace)} median={median} p99={p99}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        events = []
        with open(args.events) as fh:
            for line in fh:
                if line.strip():
                    events.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    metrics = aggregate(events)
    print(_metrics_json(metrics.to_dict()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvbucket",
        description="Bucketed contiguous KV-cache allocation simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured policy comparison")
    run_p.add_argument("--config", required=True, help="TOML or JSON experiment config")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--alpha", type=float, default=None, help="inflation factor")
    run_p.add_argument("--tau", type=float, default=None, help="uncertainty routing threshold")
    run_p.add_argument("--sigma-rel", dest="sigma_rel", type=float, default=None)
    run_p.add_argument("--bias", type=float, default=None)
    run_p.add_argument("--buckets", type=int, default=None, help="regular bucket count")
    run_p.add_argument("--window", type=int, default=None, help="sliding window size")
    run_p.add_argument("--align", type=int, default=None, help="token alignment unit")
    run_p.add_argument("--refresh-period", dest="refresh_period", type=int, default=None)
    run_p.add_argument("--max-refreshes", dest="max_refreshes", type=int, default=None)
    run_p.add_argument("--reserve-fraction", dest="reserve_fraction", type=float, default=None)
    run_p.add_argument("--max-batch", dest="max_batch", type=int, default=None)
    run_p.add_argument("--policies", default=None, help="comma-separated policy list")
    run_p.add_argument("--out-dir", dest="out_dir", default=None)
    run_p.add_argument("--events", action="store_true", help="write per-policy event JSONL")
    run_p.add_argument("--parallel", action="store_true", help="run policies concurrently")
    run_p.set_defaults(func=cmd_run)

    gen_p = sub.add_parser("gen-trace", help="synthesize a JSONL trace")
    gen_p.add_argument("--out", required=True)
    gen_p.add_argument("--n", type=int, default=1000)
    gen_p.add_argument("--rate", type=float, default=10.0, help="arrival rate (req/s)")
    gen_p.add_argument("--seed", type=int, default=0)
    gen_p.add_argument("--mu", type=float, default=4.0, help="lognormal mu")
    gen_p.add_argument("--sigma", type=float, default=1.0, help="lognormal sigma")
    gen_p.add_argument("--schedule", default=None,
                       help="TOML/JSON file with a workload section (overrides --mu/--sigma)")
    gen_p.set_defaults(func=cmd_gen_trace)

    replay_p = sub.add_parser("replay", help="recompute metrics from an event log")
    replay_p.add_argument("--events", required=True, help="event JSONL from a run")
    replay_p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
