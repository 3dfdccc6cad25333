"""Discrete-event serving loop: task pool, tag-aware admission, decode steps.

One global clock drives arrivals, per-device decode steps, completions, and
periodic bucket refreshes. Every state change is emitted as a structured event
record; metrics are derived purely from that stream, so a saved event log
replays to identical numbers.

Three allocation policies share the loop:

* ``adaptive``  — predictor + dynamic buckets + large-bucket safety net.
* ``static``    — every request reserved at the maximum supported length.
* ``oracle``    — exact-fit reservations at each request's true footprint.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .buckets import BucketConfig, BucketManager, BucketTag, select_bucket
from .pool import DevicePool, ExactFitPool, OutOfMemoryError, StallError
from .predictor import Prediction, make_predictor
from .racm import copy_time, step_time
from .workload import Request

QUEUED = "queued"
RUNNING = "running"
STALLED = "stalled"
DONE = "done"

POLICIES = ("adaptive", "static", "oracle")


class SimulationError(RuntimeError):
    """Raised when a run cannot make progress or inputs cannot be served."""


@dataclass
class Task:
    """A request moving through the serving pipeline."""

    request: Request
    state: str = QUEUED
    prediction: Prediction | None = None
    tag: BucketTag | None = None
    est_total: int = 0
    bounds: tuple = ()
    routed: str = "regular"
    device: int = -1
    finish_time: float = -1.0


@dataclass
class _Device:
    idx: int
    pool: object
    running: list[Task] = field(default_factory=list)
    stalled: list[Task] = field(default_factory=list)
    busy: bool = False
    participants: list[Task] = field(default_factory=list)
    step_bytes: int = 0
    step_dt: float = 0.0
    ready_at: float = 0.0


class Simulation:
    """One policy run over one trace. Deterministic for a fixed config."""

    def __init__(self, exp, policy: str, trace: list[Request]):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r} (have {POLICIES})")
        self.exp = exp
        self.policy = policy
        self.trace = trace
        self.shape = exp.model
        self.bpt = self.shape.bytes_per_token
        self.large_bound = exp.resolve_large_bound(trace)
        self._validate_trace()

        self.manager: BucketManager | None = None
        self.predictor = None
        if policy == "adaptive":
            self.manager = BucketManager(
                bucket_count=exp.bucket_count,
                window_size=exp.window_size,
                align=exp.align,
                large_bound=self.large_bound,
                refresh_period=exp.refresh_period,
                max_refreshes=exp.max_refreshes,
                initial_bounds=exp.initial_bounds,
            )
            self.predictor = make_predictor(
                exp.predictor_kind,
                alpha=exp.alpha,
                sigma_rel=exp.sigma_rel,
                bias=exp.bias,
                bin_edges=exp.bin_edges,
                seed=exp.seed,
            )
        self.static_config = BucketConfig(
            (self.large_bound,), self.large_bound, exp.align, version=0
        )

        self.devices = [
            _Device(i, self._make_pool()) for i in range(exp.device_count)
        ]
        self.queued: list[Task] = []
        self.tasks: list[Task] = []
        self.events: list[dict] = []
        self.clock = 0.0
        self._seq = 0
        self._heap: list = []

    # -- setup ----------------------------------------------------------------

    def _demand_weights(self, config) -> list[float] | None:
        """Byte demand per bound: window occupancy times bound size."""
        if self.policy != "adaptive" or self.exp.share_policy != "demand":
            return None
        occupancy = self.manager.bucket_occupancy(config)
        return [occ * bound for occ, bound in zip(occupancy, config.bounds)]

    def _make_pool(self):
        exp = self.exp
        if self.policy == "oracle":
            return ExactFitPool(exp.device_capacity_bytes, self.shape, exp.align)
        if self.policy == "adaptive":
            config = self.manager.config
            return DevicePool(
                exp.device_capacity_bytes, config, self.shape, exp.reserve_fraction,
                demand_weights=self._demand_weights(config),
                share_policy=exp.share_policy,
            )
        return DevicePool(
            exp.device_capacity_bytes, self.static_config, self.shape, exp.reserve_fraction
        )

    def _validate_trace(self) -> None:
        too_big = [r.id for r in self.trace if r.total_tokens > self.large_bound]
        if too_big:
            raise SimulationError(
                f"{len(too_big)} request(s) exceed large_bound={self.large_bound} "
                f"tokens (first ids: {too_big[:5]}); raise large_bound or use 'auto'"
            )

    # -- event plumbing ---------------------------------------------------------

    def _emit(self, kind: str, **fields) -> None:
        rec = {"e": kind, "t": self.clock}
        rec.update(fields)
        self.events.append(rec)

    def _totals(self) -> dict:
        useful = sum(d.pool.useful_bytes for d in self.devices)
        reserved = sum(d.pool.reserved_bytes for d in self.devices)
        return {"useful": useful, "reserved": reserved}

    # -- annotation and admission -------------------------------------------

    def _annotate(self, task: Task) -> None:
        req = task.request
        if self.policy == "adaptive":
            pred = self.predictor.predict(req)
            config = self.manager.config
            est_total = min(req.prompt_len + pred.l_eff, self.large_bound)
            tag = select_bucket(config, est_total, pred.u, self.exp.tau)
            if tag.is_large:
                task.routed = "uncertainty" if pred.u > self.exp.tau else "spill"
            task.prediction = pred
            task.tag = tag
            task.est_total = est_total
            task.bounds = config.bounds
            self._emit(
                "tag", id=req.id, l_hat=pred.l_hat, u=pred.u, l_eff=pred.l_eff,
                est_total=est_total, bucket=tag.kind, index=tag.index,
                version=tag.version, routed=task.routed, bounds=list(task.bounds),
            )
        elif self.policy == "static":
            task.tag = BucketTag.regular(1, 0)
            task.est_total = self.large_bound
            task.bounds = self.static_config.bounds
            self._emit(
                "tag", id=req.id, l_hat=self.large_bound, u=0.0,
                l_eff=self.large_bound, est_total=self.large_bound,
                bucket="regular", index=1, version=0, routed="regular",
                bounds=list(task.bounds),
            )
        else:  # oracle: exact knowledge, no bucketing
            task.est_total = req.total_tokens
            task.bounds = (self.large_bound,)
            self._emit(
                "tag", id=req.id, l_hat=req.true_gen_len, u=0.0,
                l_eff=req.true_gen_len, est_total=req.total_tokens,
                bucket="exact", index=0, version=0, routed="regular",
                bounds=list(task.bounds),
            )

    def _free_bytes(self, dev: _Device, task: Task) -> int:
        if self.policy == "oracle":
            return dev.pool.free_bytes()
        return dev.pool.free_bytes_for(task.tag, task.est_total)

    def _try_reserve(self, dev: _Device, task: Task) -> bool:
        req = task.request
        try:
            if self.policy == "oracle":
                block = dev.pool.reserve_exact(req.id, req.total_tokens, req.prompt_len)
            else:
                block = dev.pool.reserve(
                    req.id, task.tag, req.prompt_len, min_tokens=task.est_total
                )
        except OutOfMemoryError:
            return False
        task.state = RUNNING
        task.device = dev.idx
        dev.running.append(task)
        self._emit(
            "reserve", id=req.id, dev=dev.idx, cls=block.class_key,
            offset=block.offset, size=block.size, fallback=block.fallback,
            **self._totals(),
        )
        return True

    def _place(self, task: Task) -> bool:
        ranked = sorted(
            self.devices, key=lambda d: (-self._free_bytes(d, task), d.idx)
        )
        for dev in ranked:
            if len(dev.running) >= self.exp.max_batch:
                continue
            if self._try_reserve(dev, task):
                return True
        return False

    def _admit_one(self, task: Task) -> None:
        """Arrival-time admission: nothing was freed, so older queued tasks
        cannot newly fit and only the fresh task needs an attempt."""
        if self._place(task):
            self.queued.remove(task)

    def _requirement(self, task: Task) -> int:
        """Token footprint a block must cover for this task.

        Large-tagged tasks always need a large block, so any failure blocks
        the whole group; encode that as requirement 0.
        """
        if self.policy == "oracle":
            return task.request.total_tokens
        if task.tag.is_large:
            return 0
        return task.est_total

    def _admit(self) -> None:
        """Group queued tasks by tag and place each on the freest device.

        Same-tag tasks are tried consecutively (co-batching). Within a group,
        once a task of some footprint fails on every device, only strictly
        smaller footprints can still fit (an admission pass only consumes
        capacity), so larger ones are skipped without another scan.
        """
        if not self.queued:
            return
        groups: dict[tuple, list[Task]] = {}
        for task in self.queued:
            key = (task.tag.kind, task.tag.index) if task.tag else ("exact", 0)
            groups.setdefault(key, []).append(task)
        for group in groups.values():
            min_failed = None
            for task in group:
                req = self._requirement(task)
                if min_failed is not None and req >= min_failed:
                    continue
                if not self._place(task):
                    min_failed = req
        self.queued = [t for t in self.queued if t.state == QUEUED]

    # -- decode steps -----------------------------------------------------------

    def _schedule_steps(self) -> None:
        for dev in self.devices:
            if dev.busy or not dev.running:
                continue
            participants = list(dev.running)
            nbytes = sum(
                dev.pool.live[t.request.id].tokens_written for t in participants
            ) * self.bpt
            dt = step_time(self.exp.racm, nbytes, self.exp.layout)
            start = max(self.clock, dev.ready_at)
            dev.busy = True
            dev.participants = participants
            dev.step_bytes = nbytes
            dev.step_dt = dt
            self._push(start + dt, "step", dev.idx)

    def _push(self, t: float, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, payload))

    def _handle_step(self, dev: _Device) -> None:
        dev.busy = False
        participants = dev.participants
        dev.participants = []
        for task in participants:
            dev.pool.advance(task.request.id)
        self._emit(
            "step", dev=dev.idx, n=len(participants), bytes=dev.step_bytes,
            dt=dev.step_dt, **self._totals(),
        )
        completions = 0
        for task in participants:
            req = task.request
            block = dev.pool.live[req.id]
            if block.tokens_written >= req.total_tokens:
                dev.pool.release(req.id)
                dev.running.remove(task)
                task.state = DONE
                task.finish_time = self.clock
                completions += 1
                if self.policy == "adaptive":
                    self.manager.record(req.total_tokens)
                    self.predictor.observe(req, req.true_gen_len)
                self._emit(
                    "done", id=req.id, realized_total=req.total_tokens,
                    gen=req.true_gen_len, latency=self.clock - req.arrival_time,
                    **self._totals(),
                )
            elif block.tokens_written >= block.capacity_tokens:
                self._migrate(dev, task)
        if completions and self.policy == "adaptive" and self.manager.refresh_due:
            config = self.manager.refresh()
            weights = self._demand_weights(config)
            for d in self.devices:
                d.pool.adopt_config(config, weights)
            self._emit(
                "refresh", version=config.version, bounds=list(config.bounds),
                window=len(self.manager.window),
            )
        if completions:
            self._retry_stalled(dev)

    def _migrate(self, dev: _Device, task: Task) -> None:
        req = task.request
        try:
            _, copied = dev.pool.migrate_to_large(req.id)
        except StallError:
            task.state = STALLED
            dev.running.remove(task)
            dev.stalled.append(task)
            self._emit("stall", id=req.id, dev=dev.idx)
            return
        delay = copy_time(self.exp.racm, copied)
        dev.ready_at = max(dev.ready_at, self.clock) + delay
        self._emit(
            "migrate", id=req.id, dev=dev.idx, copied=copied, delay=delay,
            **self._totals(),
        )

    def _retry_stalled(self, dev: _Device) -> None:
        for task in list(dev.stalled):
            req = task.request
            try:
                _, copied = dev.pool.migrate_to_large(req.id)
            except StallError:
                break
            dev.stalled.remove(task)
            task.state = RUNNING
            dev.running.append(task)
            delay = copy_time(self.exp.racm, copied)
            dev.ready_at = max(dev.ready_at, self.clock) + delay
            self._emit(
                "migrate", id=req.id, dev=dev.idx, copied=copied, delay=delay,
                retried=True, **self._totals(),
            )

    # -- main loop -----------------------------------------------------------------

    def run(self) -> list[dict]:
        """Process the whole trace; returns the event stream."""
        exp = self.exp
        self._heap = []
        self._emit(
            "start", policy=self.policy, seed=exp.seed, devices=exp.device_count,
            capacity_bytes=exp.device_capacity_bytes * exp.device_count,
            large_bound=self.large_bound, bytes_per_token=self.bpt,
            requests=len(self.trace),
        )
        for req in self.trace:
            self._push(req.arrival_time, "arrival", req)
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            self.clock = t
            if kind == "arrival":
                task = Task(request=payload)
                self.tasks.append(task)
                self._emit("arrive", id=payload.id, prompt=payload.prompt_len)
                self._annotate(task)
                self.queued.append(task)
                self._admit_one(task)
            else:
                self._handle_step(self.devices[payload])
                self._admit()
            self._schedule_steps()
        unfinished = [t for t in self.tasks if t.state != DONE]
        if unfinished:
            by_state: dict[str, int] = {}
            for t in unfinished:
                by_state[t.state] = by_state.get(t.state, 0) + 1
            raise SimulationError(
                f"no progress possible with {len(unfinished)} unfinished tasks "
                f"({by_state}); likely too little memory for the largest class"
            )
        done = sum(1 for t in self.tasks if t.state == DONE)
        generated = sum(t.request.true_gen_len for t in self.tasks if t.state == DONE)
        self._emit("end", completed=done, generated=generated)
        return self.events


def run(exp, policy: str, trace: list[Request]):
    """Simulate one policy over a trace; returns (SimMetrics, event stream)."""
    from .metrics import aggregate

    events = Simulation(exp, policy, trace).run()
    return aggregate(events), events
