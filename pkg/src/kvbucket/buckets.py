"""Dynamic bucket boundaries from sliding-window quantiles, plus tag routing.

Bucket upper bounds are nearest-rank quantiles of recently observed KV
footprints, rounded up to the allocation granularity. Refreshing produces a
new immutable config version; tags and blocks handed out under older versions
are never touched.
"""

from __future__ import annotations

from bisect import bisect_left
from collections import Counter, deque
from dataclasses import dataclass


class UnsatisfiableRequestError(ValueError):
    """Request footprint exceeds the maximum supported block size."""


LARGE = "large"
REGULAR = "regular"


@dataclass(frozen=True)
class BucketTag:
    """Allocation class assigned to a request before decoding."""

    kind: str      # REGULAR or LARGE
    index: int     # 1-based bucket index; 0 for the large bucket
    version: int   # config version the tag was minted under

    @classmethod
    def regular(cls, index: int, version: int) -> "BucketTag":
        return cls(REGULAR, index, version)

    @classmethod
    def large(cls, version: int) -> "BucketTag":
        return cls(LARGE, 0, version)

    @property
    def is_large(self) -> bool:
        return self.kind == LARGE


@dataclass(frozen=True)
class BucketConfig:
    """Ordered regular-bucket upper bounds plus the large-bucket bound.

    All bounds are token capacities and multiples of ``align``.
    """

    bounds: tuple
    large_bound: int
    align: int
    version: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "bounds", tuple(int(b) for b in self.bounds))
        if self.align < 1:
            raise ValueError(f"align must be >= 1, got {self.align}")
        if not self.bounds:
            raise ValueError("config needs at least one bucket bound")
        if self.large_bound % self.align != 0:
            raise ValueError(
                f"large_bound {self.large_bound} not a multiple of align {self.align}"
            )
        prev = 0
        for b in self.bounds:
            if b <= prev:
                raise ValueError(f"bounds must be strictly increasing, got {self.bounds}")
            if b % self.align != 0:
                raise ValueError(f"bound {b} not a multiple of align {self.align}")
            prev = b
        if self.bounds[-1] > self.large_bound:
            raise ValueError(
                f"top bound {self.bounds[-1]} exceeds large_bound {self.large_bound}"
            )

    @property
    def bucket_count(self) -> int:
        return len(self.bounds)

    def bound_for(self, tag: BucketTag) -> int:
        """Token capacity the tag asks for."""
        if tag.is_large:
            return self.large_bound
        if not 1 <= tag.index <= len(self.bounds):
            raise ValueError(f"tag index {tag.index} out of range for {self.bounds}")
        return self.bounds[tag.index - 1]


def bucket_index(bounds, value: int) -> int:
    """0-based index of the smallest bound >= value; len(bounds) if none."""
    return bisect_left(bounds, value)


class LengthWindow:
    """Ring buffer of realized KV footprints with an exact-count histogram."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"window capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._samples: deque[int] = deque()
        self._counts: Counter[int] = Counter()

    def __len__(self) -> int:
        return len(self._samples)

    @property
    def samples(self) -> list[int]:
        return list(self._samples)

    @property
    def histogram(self) -> dict[int, int]:
        return dict(self._counts)

    def record(self, realized_len: int) -> None:
        """Append a sample, evicting the oldest when the window is full."""
        if realized_len < 1:
            raise ValueError(f"realized length must be >= 1, got {realized_len}")
        if len(self._samples) == self.capacity:
            old = self._samples.popleft()
            self._counts[old] -= 1
            if self._counts[old] == 0:
                del self._counts[old]
        self._samples.append(realized_len)
        self._counts[realized_len] += 1

    def quantile_bounds(self, bucket_count: int) -> list[int]:
        """Nearest-rank quantiles at levels i/B for i = 1..B, pre-alignment.

        Walks the value histogram in sorted order with cumulative counts, so a
        sort of the raw samples is never materialized. May contain duplicates.
        """
        n = len(self._samples)
        if n == 0:
            raise ValueError("cannot take quantiles of an empty window")
        if bucket_count < 1:
            raise ValueError(f"bucket_count must be >= 1, got {bucket_count}")
        # Exact integer ranks: ceil(i*n/B) without float quantile levels.
        ranks = [(i * n + bucket_count - 1) // bucket_count for i in range(1, bucket_count + 1)]
        bounds: list[int] = []
        items = sorted(self._counts.items())
        cum = 0
        pos = 0
        for rank in ranks:
            while cum < rank:
                value, count = items[pos]
                cum += count
                pos += 1
            bounds.append(items[pos - 1][0])
        return bounds


def round_up(value: int, align: int) -> int:
    return ((value + align - 1) // align) * align


def refresh(
    window: LengthWindow,
    bucket_count: int,
    align: int,
    large_bound: int,
    version: int,
) -> BucketConfig:
    """Derive a fresh config from window quantiles.

    Bounds are rounded up to ``align``, capped at ``large_bound``, and equal
    bounds merged (shrinking the effective bucket count). Raises on an empty
    window; the caller keeps its previous config in that case.
    """
    raw = window.quantile_bounds(bucket_count)
    aligned = [min(round_up(b, align), large_bound) for b in raw]
    merged = sorted(set(aligned))
    return BucketConfig(tuple(merged), large_bound, align, version)


def select_bucket(config: BucketConfig, l_eff: int, u: float, tau: float) -> BucketTag:
    """Route an effective footprint to a bucket tag.

    Uncertainty above ``tau`` bypasses regular buckets; footprints beyond the
    top regular bound spill to the large bucket.
    """
    if l_eff < 0:
        raise ValueError(f"l_eff must be >= 0, got {l_eff}")
    if l_eff > config.large_bound:
        raise UnsatisfiableRequestError(
            f"footprint {l_eff} exceeds large bound {config.large_bound}"
        )
    if u > tau:
        return BucketTag.large(config.version)
    idx = bucket_index(config.bounds, l_eff)
    if idx == len(config.bounds):
        return BucketTag.large(config.version)
    return BucketTag.regular(idx + 1, config.version)


def even_ladder(bucket_count: int, align: int, large_bound: int) -> tuple:
    """Cold-start bounds: an even split of [0, large_bound], aligned and merged.

    The top rung always equals ``large_bound`` so nothing spills before the
    first data-driven refresh.
    """
    raw = [round_up(max(1, (i * large_bound) // bucket_count), align) for i in range(1, bucket_count + 1)]
    raw[-1] = large_bound
    return tuple(sorted(set(min(b, large_bound) for b in raw)))


class BucketManager:
    """Owns the length window and the current immutable bucket config.

    ``record`` feeds realized footprints; ``refresh_due``/``refresh`` drive the
    periodic boundary update. Config versions only ever increase.
    """

    def __init__(
        self,
        bucket_count: int,
        window_size: int,
        align: int,
        large_bound: int,
        refresh_period: int | None = None,
        max_refreshes: int = -1,
        initial_bounds=None,
    ):
        if bucket_count < 1:
            raise ValueError(f"bucket_count must be >= 1, got {bucket_count}")
        self.bucket_count = bucket_count
        self.window = LengthWindow(window_size)
        self.align = align
        self.large_bound = large_bound
        self.refresh_period = refresh_period if refresh_period is not None else max(1, window_size // 2)
        self.max_refreshes = max_refreshes
        self.refreshes_done = 0
        self._since_refresh = 0
        bounds = tuple(initial_bounds) if initial_bounds else even_ladder(bucket_count, align, large_bound)
        self.config = BucketConfig(bounds, large_bound, align, version=0)

    def record(self, realized_len: int) -> None:
        self.window.record(realized_len)
        self._since_refresh += 1

    @property
    def refresh_due(self) -> bool:
        if self.max_refreshes >= 0 and self.refreshes_done >= self.max_refreshes:
            return False
        return len(self.window) > 0 and self._since_refresh >= self.refresh_period

    def refresh(self) -> BucketConfig:
        """Swap in a new config derived from the current window."""
        self.config = refresh(
            self.window, self.bucket_count, self.align, self.large_bound,
            version=self.config.version + 1,
        )
        self.refreshes_done += 1
        self._since_refresh = 0
        return self.config

    def bucket_occupancy(self, config: BucketConfig | None = None) -> list[float]:
        """Fraction of window samples falling in each regular bucket.

        Samples beyond the top bound count toward the last bucket. Used for
        demand-proportional pool carving; equal shares when the window is empty.
        """
        cfg = config if config is not None else self.config
        b = len(cfg.bounds)
        if len(self.window) == 0:
            return [1.0 / b] * b
        counts = [0] * b
        for value, count in self.window.histogram.items():
            counts[min(bucket_index(cfg.bounds, value), b - 1)] += count
        total = len(self.window)
        return [c / total for c in counts]
