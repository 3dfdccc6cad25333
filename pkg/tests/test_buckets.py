import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvbucket.buckets import (
    BucketConfig,
    BucketManager,
    BucketTag,
    LengthWindow,
    UnsatisfiableRequestError,
    bucket_index,
    even_ladder,
    refresh,
    round_up,
    select_bucket,
)


def brute_force_bounds(samples, bucket_count):
    """Independent oracle: sort and index at nearest rank ceil(i*n/B)."""
    ordered = sorted(samples)
    n = len(ordered)
    out = []
    for i in range(1, bucket_count + 1):
        rank = math.ceil(i * n / bucket_count)
        out.append(ordered[rank - 1])
    return out


def window_of(samples, capacity=None):
    w = LengthWindow(capacity or max(len(samples), 1))
    for s in samples:
        w.record(s)
    return w


class TestLengthWindow:
    def test_record_and_evict_fifo(self):
        w = LengthWindow(4)
        w.record(10)
        assert w.samples == [10]
        for s in (20, 30, 40):
            w.record(s)
        w.record(50)
        assert w.samples == [20, 30, 40, 50]

    def test_histogram_counts(self):
        w = window_of([5, 5, 5])
        assert w.histogram == {5: 3}

    def test_histogram_tracks_eviction(self):
        w = LengthWindow(2)
        for s in (1, 2, 3):
            w.record(s)
        assert w.histogram == {2: 1, 3: 1}
        assert sum(w.histogram.values()) == len(w)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            LengthWindow(4).record(0)


class TestQuantiles:
    def test_example_window(self):
        w = window_of([10, 20, 30, 40])
        assert w.quantile_bounds(2) == [20, 40]

    def test_empty_window_error(self):
        with pytest.raises(ValueError):
            LengthWindow(4).quantile_bounds(2)

    def test_matches_brute_force_oracle(self):
        rng = random.Random(1234)
        for _ in range(300):
            n = rng.randint(1, 64)
            samples = [rng.randint(1, 50) for _ in range(n)]
            bucket_count = rng.randint(1, 8)
            w = window_of(samples)
            assert w.quantile_bounds(bucket_count) == brute_force_bounds(samples, bucket_count)


class TestRefresh:
    def test_derived_example_align_1(self):
        cfg = refresh(window_of([10, 20, 30, 40]), 2, align=1, large_bound=10000, version=1)
        assert cfg.bounds == (20, 40)
        assert cfg.version == 1

    def test_derived_example_align_16(self):
        cfg = refresh(window_of([10, 20, 30, 40]), 2, align=16, large_bound=10000 * 16, version=1)
        assert cfg.bounds == (32, 48)

    def test_constant_window_merges_to_one(self):
        cfg = refresh(window_of([7, 7, 7, 7]), 3, align=1, large_bound=100, version=1)
        assert cfg.bounds == (7,)

    def test_cap_at_large_bound(self):
        cfg = refresh(window_of([10, 500]), 2, align=16, large_bound=256, version=1)
        assert cfg.bounds[-1] == 256
        assert all(b <= 256 for b in cfg.bounds)

    @given(st.lists(st.integers(1, 1000), min_size=1, max_size=64),
           st.integers(1, 8))
    @settings(max_examples=200, deadline=None)
    def test_property_oracle_equivalence(self, samples, bucket_count):
        w = window_of(samples)
        assert w.quantile_bounds(bucket_count) == brute_force_bounds(samples, bucket_count)

    @given(st.lists(st.integers(1, 10000), min_size=1, max_size=64),
           st.integers(1, 6), st.integers(1, 64))
    @settings(max_examples=200, deadline=None)
    def test_property_alignment_and_monotonicity(self, samples, bucket_count, align):
        large = round_up(20000, align)
        cfg = refresh(window_of(samples), bucket_count, align, large, version=1)
        assert all(b % align == 0 for b in cfg.bounds)
        assert list(cfg.bounds) == sorted(set(cfg.bounds))
        assert cfg.bounds[-1] == min(round_up(max(samples), align), large)


class TestSelectBucket:
    CFG = BucketConfig((128, 512, 2048), large_bound=8192, align=1, version=3)

    def test_regular_pick(self):
        tag = select_bucket(self.CFG, 300, u=0.1, tau=0.8)
        assert tag == BucketTag.regular(2, 3)

    def test_uncertainty_routes_large(self):
        tag = select_bucket(self.CFG, 300, u=0.9, tau=0.8)
        assert tag.is_large and tag.version == 3

    def test_beyond_top_bound_routes_large(self):
        assert select_bucket(self.CFG, 3000, u=0.0, tau=0.8).is_large

    def test_unsatisfiable(self):
        with pytest.raises(UnsatisfiableRequestError):
            select_bucket(self.CFG, 8193, u=0.0, tau=0.8)

    def test_boundary_inclusive(self):
        assert select_bucket(self.CFG, 128, 0.0, 0.5) == BucketTag.regular(1, 3)
        assert select_bucket(self.CFG, 129, 0.0, 0.5) == BucketTag.regular(2, 3)

    def test_u_equal_tau_stays_regular(self):
        assert not select_bucket(self.CFG, 300, 0.8, 0.8).is_large

    @given(st.integers(0, 8192), st.integers(0, 8192))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_l_eff(self, a, b):
        lo, hi = sorted((a, b))
        t_lo = select_bucket(self.CFG, lo, 0.0, 0.5)
        t_hi = select_bucket(self.CFG, hi, 0.0, 0.5)
        cap = lambda t: self.CFG.bound_for(t)
        assert cap(t_lo) <= cap(t_hi)


class TestBucketConfig:
    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            BucketConfig((100, 100), 200, 1, 0)

    def test_rejects_misaligned(self):
        with pytest.raises(ValueError):
            BucketConfig((100,), 200, 16, 0)

    def test_rejects_bound_above_large(self):
        with pytest.raises(ValueError):
            BucketConfig((300,), 200, 1, 0)

    def test_bound_for(self):
        cfg = BucketConfig((128, 512), 2048, 1, 5)
        assert cfg.bound_for(BucketTag.regular(1, 5)) == 128
        assert cfg.bound_for(BucketTag.large(5)) == 2048


class TestBucketManager:
    def make(self, **kw):
        kw.setdefault("bucket_count", 4)
        kw.setdefault("window_size", 16)
        kw.setdefault("align", 16)
        kw.setdefault("large_bound", 4096)
        return BucketManager(**kw)

    def test_initial_ladder_covers_range(self):
        mgr = self.make()
        assert mgr.config.bounds[-1] == 4096
        assert mgr.config.version == 0

    def test_refresh_increments_version(self):
        mgr = self.make(refresh_period=4)
        for v in (100, 120, 80, 90):
            mgr.record(v)
        assert mgr.refresh_due
        cfg = mgr.refresh()
        assert cfg.version == 1
        assert not mgr.refresh_due

    def test_refresh_isolation(self):
        mgr = self.make(refresh_period=1)
        mgr.record(100)
        old = mgr.config
        tag = select_bucket(old, 100, 0.0, 0.5)
        mgr.refresh()
        # Old config object and previously minted tags are untouched.
        assert tag.version == 0
        assert old.version == 0
        assert mgr.config.version == 1

    def test_max_refreshes_freezes(self):
        mgr = self.make(refresh_period=1, max_refreshes=1)
        mgr.record(100)
        mgr.refresh()
        mgr.record(200)
        assert not mgr.refresh_due

    def test_occupancy_balance(self):
        # Equal-mass bounds put close to 1/B of distinct samples per bucket.
        rng = random.Random(99)
        samples = rng.sample(range(1, 100000), 1000)
        mgr = self.make(window_size=1000, align=1, large_bound=200000)
        for s in samples:
            mgr.record(s)
        cfg = mgr.refresh()
        b = len(cfg.bounds)
        occ = mgr.bucket_occupancy(cfg)
        for frac in occ:
            assert abs(frac - 1.0 / b) <= 2.0 / b

    def test_even_ladder_merges_duplicates(self):
        bounds = even_ladder(4, 16, 64)
        assert bounds == (16, 32, 48, 64)
        assert even_ladder(8, 32, 64) == (32, 64)


def test_bucket_index():
    bounds = (128, 512, 2048)
    assert bucket_index(bounds, 0) == 0
    assert bucket_index(bounds, 128) == 0
    assert bucket_index(bounds, 129) == 1
    assert bucket_index(bounds, 2048) == 2
    assert bucket_index(bounds, 2049) == 3
