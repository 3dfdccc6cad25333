"""Generation-length estimation ahead of decoding.

Each predictor maps a request to a point estimate ``l_hat`` plus an
uncertainty score ``u`` in [0, 1], then applies uncertainty-aware inflation to
get the effective length used for bucket selection. Oracle variants exist for
controlled experiments; the online-histogram variant learns from realized
lengths with no training pipeline.
"""

from __future__ import annotations

import math
from bisect import bisect_right, insort
from dataclasses import dataclass

import numpy as np

from .buckets import BucketConfig, bucket_index

# NoisyOracle maps configured relative noise to uncertainty as u = min(1, 2*sigma_rel):
# a two-sigma relative error band, deterministic per configuration.
NOISY_U_SCALE = 2.0


@dataclass(frozen=True)
class Prediction:
    """Predictor output: point estimate, uncertainty, and inflated length."""

    l_hat: int
    u: float
    l_eff: int

    def __post_init__(self) -> None:
        if self.l_hat < 0:
            raise ValueError(f"l_hat must be >= 0, got {self.l_hat}")
        if not 0.0 <= self.u <= 1.0:
            raise ValueError(f"u must be in [0, 1], got {self.u}")
        if self.l_eff < self.l_hat:
            raise ValueError(f"l_eff {self.l_eff} below l_hat {self.l_hat}")


def inflate(l_hat: int, u: float, alpha: float) -> int:
    """Inflated token count: ceil of l_hat * (1 + alpha*u).

    Products within 1e-9 (relative) of an integer are treated as that integer,
    so decimal-looking inputs like alpha=0.1, u=0.5 round exactly.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    raw = l_hat * (1.0 + alpha * u)
    nearest = round(raw)
    if abs(raw - nearest) <= 1e-9 * max(1.0, abs(raw)):
        return int(nearest)
    return math.ceil(raw)


class Predictor:
    """Base predictor. ``predict`` is read-only; ``observe`` mutates state."""

    def __init__(self, alpha: float = 0.0):
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        self.alpha = alpha

    def estimate(self, request) -> tuple[int, float]:
        """Return (l_hat, u) for a request."""
        raise NotImplementedError

    def predict(self, request) -> Prediction:
        l_hat, u = self.estimate(request)
        return Prediction(l_hat, u, inflate(l_hat, u, self.alpha))

    def observe(self, request, realized_len: int) -> None:
        """Feed back a realized generation length. No-op by default."""
        if realized_len < 1:
            raise ValueError(f"realized length must be >= 1, got {realized_len}")


class OraclePredictor(Predictor):
    """Returns the true generation length with zero uncertainty."""

    def estimate(self, request) -> tuple[int, float]:
        return request.true_gen_len, 0.0


class NoisyOraclePredictor(Predictor):
    """Oracle corrupted by multiplicative Gaussian noise.

    l_hat = round(true * (1 + eps)) with eps ~ Normal(bias, sigma_rel), clamped
    to at least one token. With sigma_rel = bias = 0 this reduces exactly to
    the oracle.
    """

    def __init__(self, sigma_rel: float, bias: float = 0.0, alpha: float = 0.0, seed: int = 0):
        super().__init__(alpha)
        if sigma_rel < 0:
            raise ValueError(f"sigma_rel must be >= 0, got {sigma_rel}")
        self.sigma_rel = sigma_rel
        self.bias = bias
        self._rng = np.random.default_rng(seed)

    def estimate(self, request) -> tuple[int, float]:
        eps = float(self._rng.normal(self.bias, self.sigma_rel))
        l_hat = max(1, int(round(request.true_gen_len * (1.0 + eps))))
        u = min(1.0, NOISY_U_SCALE * self.sigma_rel)
        return l_hat, u


class OnlineHistogramPredictor(Predictor):
    """Per-prompt-length-bin running medians of realized generation lengths.

    Bins are power-of-two prompt-length ranges by default (custom edges
    supported); every positive prompt length lands in some bin. Uncertainty is
    the bin's interquartile range over its median, clamped to [0, 1]. Bins with
    no observations fall back to the global median with u = 1, which routes
    unseen workload slices to the large bucket rather than failing.
    """

    def __init__(self, bin_edges=None, alpha: float = 0.0):
        super().__init__(alpha)
        self.bin_edges = sorted(bin_edges) if bin_edges else None
        self._bins: dict[int, list[int]] = {}
        self._all: list[int] = []

    def _bin_of(self, prompt_len: int) -> int:
        if self.bin_edges is None:
            return prompt_len.bit_length() - 1
        return bisect_right(self.bin_edges, prompt_len)

    def estimate(self, request) -> tuple[int, float]:
        samples = self._bins.get(self._bin_of(request.prompt_len))
        if not samples:
            if not self._all:
                return 1, 1.0
            return int(round(_median(self._all))), 1.0
        med = _median(samples)
        q1 = _nearest_rank(samples, 1, 4)
        q3 = _nearest_rank(samples, 3, 4)
        u = min(1.0, max(0.0, (q3 - q1) / med))
        return int(round(med)), u

    def observe(self, request, realized_len: int) -> None:
        super().observe(request, realized_len)
        insort(self._bins.setdefault(self._bin_of(request.prompt_len), []), realized_len)
        insort(self._all, realized_len)


def _median(sorted_samples: list[int]) -> float:
    n = len(sorted_samples)
    mid = n // 2
    if n % 2 == 1:
        return float(sorted_samples[mid])
    return (sorted_samples[mid - 1] + sorted_samples[mid]) / 2.0


def _nearest_rank(sorted_samples: list[int], num: int, den: int) -> int:
    """Nearest-rank quantile at level num/den over an already-sorted list."""
    n = len(sorted_samples)
    rank = max(1, (num * n + den - 1) // den)
    return sorted_samples[rank - 1]


def bucket_accuracy(predictions, realized, config: BucketConfig) -> float:
    """Fraction of requests whose predicted and realized buckets match.

    ``predictions`` may hold :class:`Prediction` objects or plain effective
    lengths. Both sides are bucketed as the smallest bound covering the value,
    with everything beyond the top bound counting as the large bucket.
    """
    if len(predictions) != len(realized):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(realized)} realized"
        )
    if not predictions:
        return 1.0
    hits = 0
    for pred, real in zip(predictions, realized):
        l_eff = pred.l_eff if isinstance(pred, Prediction) else int(pred)
        if bucket_index(config.bounds, l_eff) == bucket_index(config.bounds, real):
            hits += 1
    return hits / len(predictions)


def make_predictor(
    kind: str,
    alpha: float = 0.0,
    sigma_rel: float = 0.0,
    bias: float = 0.0,
    bin_edges=None,
    seed: int = 0,
) -> Predictor:
    """Build a predictor from config-file fields."""
    if kind == "oracle":
        return OraclePredictor(alpha)
    if kind == "noisy-oracle":
        return NoisyOraclePredictor(sigma_rel, bias, alpha, seed)
    if kind == "online-histogram":
        return OnlineHistogramPredictor(bin_edges, alpha)
    raise ValueError(f"unknown predictor kind {kind!r}")
