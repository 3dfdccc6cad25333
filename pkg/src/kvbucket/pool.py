"""Per-device contiguous KV memory pools.

:class:`DevicePool` carves a device's byte range into fixed-size block classes
(one region per regular bucket plus a reserved large region) with LIFO free
lists, and supports mid-decode migration into the large region.
:class:`ExactFitPool` is a first-fit interval allocator used by the oracle
baseline that reserves exactly the bytes each request needs.

Bucket refreshes never move live blocks: a region adopts a new block size only
once every block carved from it has been released (two-generation carving).
"""

from __future__ import annotations

import math
from bisect import insort
from dataclasses import dataclass, field

from .buckets import LARGE, BucketConfig, BucketTag, round_up


class OutOfMemoryError(RuntimeError):
    """All candidate free lists are empty; admission should defer."""


class StallError(RuntimeError):
    """Large region exhausted mid-migration; request stays in its old block."""


@dataclass(frozen=True)
class ModelShape:
    """Model geometry that fixes the KV bytes stored per token."""

    layers: int
    kv_heads: int
    head_dim: int
    dtype_bytes: int

    def __post_init__(self) -> None:
        for name in ("layers", "kv_heads", "head_dim", "dtype_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def bytes_per_token(self) -> int:
        # Factor 2: keys and values.
        return 2 * self.layers * self.kv_heads * self.head_dim * self.dtype_bytes


@dataclass
class Block:
    """A live contiguous reservation inside a pool."""

    offset: int
    size: int
    owner: int
    tag: BucketTag | None
    tokens_written: int
    capacity_tokens: int
    class_key: str
    fallback: bool = False


@dataclass
class _BlockClass:
    """One fixed byte region carved into equal blocks of one capacity."""

    key: str
    region_start: int
    region_bytes: int
    capacity_tokens: int
    block_bytes: int
    free: list[int] = field(default_factory=list)   # LIFO stack of offsets
    carved: int = 0
    live_count: int = 0
    pending_bound: int | None = None

    def carve(self, capacity_tokens: int, block_bytes: int) -> None:
        self.capacity_tokens = capacity_tokens
        self.block_bytes = block_bytes
        self.carved = self.region_bytes // block_bytes if block_bytes > 0 else 0
        # Stack holds the highest offset on top so the first reserve uses the
        # region start, which keeps small tests easy to read.
        self.free = [self.region_start + i * block_bytes for i in range(self.carved)][::-1]

    @property
    def free_bytes(self) -> int:
        return len(self.free) * self.block_bytes


def apportion(weights: list[float], slots: int) -> list[int]:
    """Largest-remainder apportionment of ``slots`` across ``weights``."""
    total = sum(weights)
    if total <= 0 or slots <= 0:
        return [0] * len(weights)
    quotas = [w / total * slots for w in weights]
    counts = [int(q) for q in quotas]
    remainders = sorted(
        range(len(weights)), key=lambda i: (quotas[i] - counts[i], i), reverse=True
    )
    for i in remainders[: slots - sum(counts)]:
        counts[i] += 1
    return counts


class DevicePool:
    """Bucket-class slab pool for one simulated device.

    The non-reserved capacity is split into equal-byte regions; each region is
    carved into blocks of one bucket bound and re-carves only when fully free.
    Under ``share_policy='equal'`` a region always re-carves to the bound at
    its own index. Under ``'demand'`` a draining region retargets the most
    under-allocated bound, where each bound's target share of regions follows
    demand weights supplied with the config (occupancy times bound size). The
    large region is sized by ``reserve_fraction`` rounded down to whole large
    blocks and never changes.
    """

    def __init__(
        self,
        capacity: int,
        config: BucketConfig,
        shape: ModelShape,
        reserve_fraction: float,
        demand_weights=None,
        share_policy: str = "equal",
    ):
        bpt = shape.bytes_per_token
        large_block_bytes = config.large_bound * bpt
        if capacity <= large_block_bytes:
            raise ValueError(
                f"capacity {capacity} must exceed one large block ({large_block_bytes} bytes)"
            )
        if not 0 < reserve_fraction < 1:
            raise ValueError(f"reserve_fraction must be in (0, 1), got {reserve_fraction}")
        if share_policy not in ("equal", "demand"):
            raise ValueError(f"share_policy must be 'equal' or 'demand', got {share_policy!r}")
        self.capacity = capacity
        self.shape = shape
        self.bytes_per_token = bpt
        self.align_tokens = config.align
        self.reserve_fraction = reserve_fraction
        self.share_policy = share_policy
        self.live: dict[int, Block] = {}
        self.reserved_bytes = 0
        self.useful_tokens = 0
        self._configs: dict[int, BucketConfig] = {config.version: config}
        self._bounds: tuple = config.bounds
        self._weights: list[float] = self._effective_weights(demand_weights)

        n_large = math.floor(capacity * reserve_fraction) // large_block_bytes
        large_region_bytes = n_large * large_block_bytes
        self.large = _BlockClass("large", 0, large_region_bytes, 0, 0)
        self.large.carve(config.large_bound, large_block_bytes)

        regular_bytes = capacity - large_region_bytes
        count = len(config.bounds)
        # Demand mode splits the regular area into finer quanta so re-carving
        # can approximate arbitrary byte shares; equal mode keeps one region
        # per bound, each re-carving positionally.
        n_regions = count * (2 if share_policy == "demand" else 1)
        quantum = regular_bytes // n_regions
        self.regions: list[_BlockClass] = []
        start = large_region_bytes
        for i in range(n_regions):
            region_bytes = quantum if i < n_regions - 1 else capacity - start
            self.regions.append(_BlockClass(f"r{i}", start, region_bytes, 0, 0))
            start += region_bytes
        if share_policy == "equal":
            for i, cls in enumerate(self.regions):
                bound = config.bounds[i]
                cls.carve(bound, bound * bpt)
                if cls.carved == 0:
                    raise ValueError(
                        f"capacity too small: bucket class {i} ({bound} tokens) "
                        f"gets zero blocks from {cls.region_bytes} bytes"
                    )
        else:
            targets = self._target_counts()
            if not any(targets.values()):
                raise ValueError(
                    "capacity too small: no region can hold a single block of any bound"
                )
            order: list[int] = []
            for bound in sorted(targets, reverse=True):
                order.extend([bound] * targets[bound])
            for cls, bound in zip(self.regions, order):
                cls.carve(bound, bound * bpt)

    # -- config lifecycle -----------------------------------------------------

    def _effective_weights(self, demand_weights) -> list[float]:
        # Default demand: equal-occupancy buckets, so byte demand scales with
        # the bound itself.
        if demand_weights is None:
            return [float(b) for b in self._bounds]
        if len(demand_weights) != len(self._bounds):
            raise ValueError(
                f"need {len(self._bounds)} demand weights, got {len(demand_weights)}"
            )
        return [max(float(w), 1e-9) for w in demand_weights]

    def _feasible(self, bound: int) -> bool:
        return bound * self.bytes_per_token <= min(c.region_bytes for c in self.regions)

    def _target_counts(self) -> dict[int, int]:
        """Regions each current bound should hold, by demand apportionment.

        Bounds too large for a region quantum get no share; theirs flows to
        the largest feasible bound (those requests fall back to the large
        region at reserve time).
        """
        feasible = [b for b in self._bounds if self._feasible(b)]
        counts = {b: 0 for b in self._bounds}
        if not feasible:
            return counts
        weights = []
        for b, w in zip(self._bounds, self._weights):
            if b in feasible:
                weights.append(w)
            else:
                weights[-1] += w  # infeasible bounds are larger; fold downward
        for b, n in zip(feasible, apportion(weights, len(self.regions))):
            counts[b] = n
        return counts

    def adopt_config(self, config: BucketConfig, demand_weights=None) -> None:
        """Register a refreshed config; regions re-carve lazily once drained."""
        self._configs[config.version] = config
        self._bounds = config.bounds
        self._weights = self._effective_weights(demand_weights)
        if self.share_policy == "equal":
            bounds = config.bounds
            for i, cls in enumerate(self.regions):
                target = bounds[min(i, len(bounds) - 1)]
                cls.pending_bound = None if target == cls.capacity_tokens else target
        for cls in self.regions:
            self._maybe_recarve(cls)

    def _pick_bound(self, cls: _BlockClass) -> int | None:
        """Most under-allocated current bound this region could serve."""
        targets = self._target_counts()
        current: dict[int, int] = {b: 0 for b in self._bounds}
        for other in self.regions:
            if other is not cls and other.capacity_tokens in current:
                current[other.capacity_tokens] += 1
        best = None
        best_deficit = None
        for bound in self._bounds:
            if bound * self.bytes_per_token > cls.region_bytes:
                continue
            deficit = targets[bound] - current[bound]
            # Prefer the bigger bound on ties: tail capacity is the scarce side.
            if best_deficit is None or deficit > best_deficit or (
                deficit == best_deficit and bound > best
            ):
                best = bound
                best_deficit = deficit
        return best

    def _maybe_recarve(self, cls: _BlockClass) -> None:
        if cls is self.large or cls.live_count > 0:
            return
        if self.share_policy == "equal":
            target = cls.pending_bound
            if target is None:
                return
            cls.pending_bound = None
            block_bytes = target * self.bytes_per_token
            if cls.region_bytes // block_bytes == 0:
                return  # region too small for the new bound; keep the old carve
            cls.carve(target, block_bytes)
            return
        target = self._pick_bound(cls)
        if target is None or target == cls.capacity_tokens:
            return
        cls.carve(target, target * self.bytes_per_token)

    def config_for(self, version: int) -> BucketConfig:
        return self._configs[version]

    # -- operations ---------------------------------------------------------

    def _candidates(self, tag: BucketTag, min_tokens: int | None) -> list[_BlockClass]:
        if tag.is_large:
            return [self.large] if self.large.carved else []
        required = min_tokens if min_tokens is not None else self._configs[tag.version].bound_for(tag)
        fits = [c for c in self.regions if c.capacity_tokens >= required]
        fits.sort(key=lambda c: (c.capacity_tokens, c.region_start))
        if self.large.carved:
            fits.append(self.large)
        return fits

    def reserve(
        self,
        request_id: int,
        tag: BucketTag,
        prompt_tokens: int = 0,
        min_tokens: int | None = None,
    ) -> Block:
        """Pop a free block covering the request; falls back upward on exhaustion.

        A block qualifies when its capacity covers ``min_tokens`` (the
        request's estimated footprint; defaults to the tag's bound). Matching
        on the footprint rather than the bound lets regions still carved under
        an older config serve requests tagged under a newer one. Fallback
        order: larger regular classes by capacity, then the large region.
        Raises :class:`OutOfMemoryError` with the pool unchanged when every
        candidate is empty.
        """
        if request_id in self.live:
            raise ValueError(f"request {request_id} already holds a block")
        candidates = self._candidates(tag, min_tokens)
        if not candidates:
            raise OutOfMemoryError(f"no block class can serve tag {tag}")
        chosen = None
        for cls in candidates:
            if cls.free:
                chosen = cls
                break
        if chosen is None:
            raise OutOfMemoryError(f"all free lists empty for tag {tag}")
        if prompt_tokens > chosen.capacity_tokens:
            raise ValueError(
                f"prompt of {prompt_tokens} tokens exceeds block capacity "
                f"{chosen.capacity_tokens}"
            )
        fallback = chosen is not candidates[0] or (not tag.is_large and chosen is self.large)
        offset = chosen.free.pop()
        chosen.live_count += 1
        block = Block(
            offset=offset,
            size=chosen.block_bytes,
            owner=request_id,
            tag=tag,
            tokens_written=prompt_tokens,
            capacity_tokens=chosen.capacity_tokens,
            class_key=chosen.key,
            fallback=fallback,
        )
        self.live[request_id] = block
        self.reserved_bytes += block.size
        self.useful_tokens += prompt_tokens
        return block

    def release(self, request_id: int) -> Block:
        """Return the request's block to the free list it was carved from."""
        block = self.live.pop(request_id, None)
        if block is None:
            raise ValueError(f"unknown request {request_id}")
        cls = self._class_by_key(block.class_key)
        cls.free.append(block.offset)
        cls.live_count -= 1
        self.reserved_bytes -= block.size
        self.useful_tokens -= block.tokens_written
        self._maybe_recarve(cls)
        return block

    def advance(self, request_id: int, tokens: int = 1) -> Block:
        """Account newly written KV tokens inside a live block."""
        block = self.live[request_id]
        if block.tokens_written + tokens > block.capacity_tokens:
            raise ValueError(
                f"request {request_id} would exceed block capacity "
                f"{block.capacity_tokens} (at {block.tokens_written}, +{tokens})"
            )
        block.tokens_written += tokens
        self.useful_tokens += tokens
        return block

    def migrate_to_large(self, request_id: int) -> tuple[Block, int]:
        """Move a request into a large block via a streaming copy.

        Returns the new block and the copied byte count. On large-region
        exhaustion raises :class:`StallError` with the pool unchanged; the
        request keeps its old block and can be retried after any release.
        """
        block = self.live.get(request_id)
        if block is None:
            raise ValueError(f"unknown request {request_id}")
        if block.class_key == self.large.key:
            raise ValueError(f"request {request_id} is already in the large region")
        if self.large.block_bytes <= block.size:
            raise ValueError("large blocks are not larger than the current block")
        if not self.large.free:
            raise StallError(f"large region exhausted; request {request_id} stalled")
        old_cls = self._class_by_key(block.class_key)
        new_offset = self.large.free.pop()
        self.large.live_count += 1
        copied_bytes = block.tokens_written * self.bytes_per_token
        old_cls.free.append(block.offset)
        old_cls.live_count -= 1
        self.reserved_bytes += self.large.block_bytes - block.size
        tag_version = block.tag.version if block.tag is not None else 0
        new_block = Block(
            offset=new_offset,
            size=self.large.block_bytes,
            owner=request_id,
            tag=BucketTag.large(tag_version),
            tokens_written=block.tokens_written,
            capacity_tokens=self.large.capacity_tokens,
            class_key=self.large.key,
            fallback=block.fallback,
        )
        self.live[request_id] = new_block
        self._maybe_recarve(old_cls)
        return new_block, copied_bytes

    # -- introspection --------------------------------------------------------

    def _class_by_key(self, key: str) -> _BlockClass:
        if key == self.large.key:
            return self.large
        return self.regions[int(key[1:])]

    @property
    def useful_bytes(self) -> int:
        return self.useful_tokens * self.bytes_per_token

    def free_bytes_for(self, tag: BucketTag, min_tokens: int | None = None) -> int:
        """Free bytes across classes that can serve the tag (admission signal)."""
        if tag.is_large:
            return self.large.free_bytes
        required = min_tokens if min_tokens is not None else self._configs[tag.version].bound_for(tag)
        return sum(c.free_bytes for c in self.regions if c.capacity_tokens >= required)

    def stats(self) -> dict:
        """Per-class snapshot: free/live blocks, useful and reserved bytes."""
        per_class = {}
        useful_by_class: dict[str, int] = {}
        for block in self.live.values():
            useful_by_class[block.class_key] = (
                useful_by_class.get(block.class_key, 0)
                + block.tokens_written * self.bytes_per_token
            )
        for cls in [*self.regions, self.large]:
            per_class[cls.key] = {
                "capacity_tokens": cls.capacity_tokens,
                "free_blocks": len(cls.free),
                "live_blocks": cls.live_count,
                "live_useful_bytes": useful_by_class.get(cls.key, 0),
                "reserved_bytes": cls.live_count * cls.block_bytes,
                "carved_bytes": cls.carved * cls.block_bytes,
                "region_bytes": cls.region_bytes,
            }
        return per_class

    def check_invariants(self) -> None:
        """Interval-sweep disjointness plus per-class conservation; raises on breach."""
        blocks = sorted(self.live.values(), key=lambda b: b.offset)
        prev_end = 0
        for b in blocks:
            if b.offset < prev_end:
                raise AssertionError(f"overlapping live blocks at offset {b.offset}")
            if b.offset + b.size > self.capacity:
                raise AssertionError(f"block at {b.offset} extends past capacity")
            if b.tokens_written * self.bytes_per_token > b.size:
                raise AssertionError(f"block at {b.offset} over-full")
            prev_end = b.offset + b.size
        for cls in [*self.regions, self.large]:
            if (len(cls.free) + cls.live_count) != cls.carved:
                raise AssertionError(f"class {cls.key}: free+live != carved")
            for off in cls.free:
                if not cls.region_start <= off <= cls.region_start + cls.region_bytes - cls.block_bytes:
                    raise AssertionError(f"class {cls.key}: free offset {off} outside region")
        if self.reserved_bytes != sum(b.size for b in self.live.values()):
            raise AssertionError("reserved byte counter out of sync")
        if self.useful_tokens != sum(b.tokens_written for b in self.live.values()):
            raise AssertionError("useful token counter out of sync")


class ExactFitPool:
    """First-fit interval allocator reserving exactly each request's footprint.

    Oracle-baseline reference: no buckets, no migration, coalescing on free.
    Sizes are rounded up to the alignment granularity.
    """

    def __init__(self, capacity: int, shape: ModelShape, align_tokens: int):
        self.capacity = capacity
        self.shape = shape
        self.bytes_per_token = shape.bytes_per_token
        self.align_tokens = align_tokens
        self.live: dict[int, Block] = {}
        self.reserved_bytes = 0
        self.useful_tokens = 0
        self._free: list[tuple[int, int]] = [(0, capacity)]  # (start, end) sorted

    def reserve_exact(self, request_id: int, total_tokens: int, prompt_tokens: int = 0) -> Block:
        if request_id in self.live:
            raise ValueError(f"request {request_id} already holds a block")
        nbytes = round_up(total_tokens, self.align_tokens) * self.bytes_per_token
        for i, (start, end) in enumerate(self._free):
            if end - start >= nbytes:
                if end - start == nbytes:
                    self._free.pop(i)
                else:
                    self._free[i] = (start + nbytes, end)
                block = Block(
                    offset=start,
                    size=nbytes,
                    owner=request_id,
                    tag=None,
                    tokens_written=prompt_tokens,
                    capacity_tokens=nbytes // self.bytes_per_token,
                    class_key="exact",
                )
                self.live[request_id] = block
                self.reserved_bytes += nbytes
                self.useful_tokens += prompt_tokens
                return block
        raise OutOfMemoryError(f"no interval of {nbytes} bytes free")

    def release(self, request_id: int) -> Block:
        block = self.live.pop(request_id, None)
        if block is None:
            raise ValueError(f"unknown request {request_id}")
        self.reserved_bytes -= block.size
        self.useful_tokens -= block.tokens_written
        insort(self._free, (block.offset, block.offset + block.size))
        self._coalesce()
        return block

    def advance(self, request_id: int, tokens: int = 1) -> Block:
        block = self.live[request_id]
        if block.tokens_written + tokens > block.capacity_tokens:
            raise ValueError(f"request {request_id} would exceed its exact reservation")
        block.tokens_written += tokens
        self.useful_tokens += tokens
        return block

    def _coalesce(self) -> None:
        merged: list[tuple[int, int]] = []
        for start, end in self._free:
            if merged and merged[-1][1] == start:
                merged[-1] = (merged[-1][0], end)
            else:
                merged.append((start, end))
        self._free = merged

    @property
    def useful_bytes(self) -> int:
        return self.useful_tokens * self.bytes_per_token

    def free_bytes(self) -> int:
        return sum(end - start for start, end in self._free)

    def check_invariants(self) -> None:
        spans = sorted(
            [(b.offset, b.offset + b.size, "live") for b in self.live.values()]
            + [(s, e, "free") for s, e in self._free]
        )
        prev_end = 0
        covered = 0
        for start, end, _ in spans:
            if start < prev_end:
                raise AssertionError(f"overlapping spans at {start}")
            covered += end - start
            prev_end = end
        if covered != self.capacity:
            raise AssertionError(f"live+free covers {covered} of {self.capacity} bytes")
