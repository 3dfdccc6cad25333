"""Cost model for random-access-constrained device memory.

Streaming traffic runs at ``b_seq`` bytes/s; small-granularity random traffic
only at ``b_rand`` <= ``b_seq``. Decode-step and migration-copy times are a
fixed compute term plus bytes over the effective bandwidth. Setting
b_rand == b_seq gives an HBM-like control where layout stops mattering.
"""

from __future__ import annotations

from dataclasses import dataclass

CONTIGUOUS = "contiguous"
PAGED = "paged"


@dataclass(frozen=True)
class RacmParams:
    """Bandwidth pair plus per-step compute overhead.

    ``copy_factor`` models read+write double counting on migration copies
    (default 2.0; set 1.0 to count one direction only).
    """

    b_seq: float
    b_rand: float
    compute_base: float = 0.0
    copy_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.b_seq <= 0:
            raise ValueError(f"b_seq must be positive, got {self.b_seq}")
        if not 0 < self.b_rand <= self.b_seq:
            raise ValueError(
                f"b_rand must satisfy 0 < b_rand <= b_seq, got {self.b_rand} vs {self.b_seq}"
            )
        if self.compute_base < 0:
            raise ValueError(f"compute_base must be >= 0, got {self.compute_base}")
        if self.copy_factor <= 0:
            raise ValueError(f"copy_factor must be positive, got {self.copy_factor}")

    @property
    def alpha_ratio(self) -> float:
        """Random-to-streaming bandwidth ratio in (0, 1]."""
        return self.b_rand / self.b_seq


def step_time(params: RacmParams, batch_kv_bytes: float, layout: str = CONTIGUOUS) -> float:
    """Seconds for one decode step reading ``batch_kv_bytes`` of KV state."""
    if batch_kv_bytes < 0:
        raise ValueError(f"batch_kv_bytes must be >= 0, got {batch_kv_bytes}")
    if layout == CONTIGUOUS:
        b_eff = params.b_seq
    elif layout == PAGED:
        b_eff = params.b_rand
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return params.compute_base + batch_kv_bytes / b_eff


def copy_time(params: RacmParams, nbytes: float) -> float:
    """Seconds for a contiguous streaming copy of ``nbytes``."""
    if nbytes < 0:
        raise ValueError(f"bytes must be >= 0, got {nbytes}")
    return params.copy_factor * nbytes / params.b_seq


# MLU370-X4-like card: 307.2 GB/s streaming peak, random at half of it.
# hbm-like removes the random-access penalty entirely (alpha ratio 1.0).
PRESETS: dict[str, dict] = {
    "mlu370-like": {"b_seq": 307.2e9, "b_rand": 153.6e9, "compute_base": 0.02},
    "hbm-like": {"b_seq": 307.2e9, "b_rand": 307.2e9, "compute_base": 0.02},
}


def from_preset(name: str, **overrides) -> RacmParams:
    """Build params from a named preset, with per-field overrides."""
    if name not in PRESETS:
        raise ValueError(f"unknown racm preset {name!r} (have {sorted(PRESETS)})")
    fields = dict(PRESETS[name])
    fields.update(overrides)
    return RacmParams(**fields)
