import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvbucket.buckets import BucketConfig
from kvbucket.predictor import (
    NoisyOraclePredictor,
    OnlineHistogramPredictor,
    OraclePredictor,
    Prediction,
    bucket_accuracy,
    inflate,
    make_predictor,
)
from kvbucket.workload import Request


def req(rid=0, prompt=10, gen=50):
    return Request(rid, 0.0, prompt, gen)


class TestInflate:
    def test_u_zero_identity(self):
        for alpha in (0.0, 0.1, 1.0, 7.5):
            assert inflate(100, 0.0, alpha) == 100

    def test_spec_value(self):
        assert inflate(100, 0.5, 0.1) == 105

    def test_zero_l_hat(self):
        assert inflate(0, 1.0, 1.0) == 0

    def test_matches_exact_decimal_grid(self):
        # Oracle: exact rational arithmetic over the 0.05 grid.
        for k in range(21):
            u = k / 20
            expected = math.ceil(Fraction(100) * (1 + Fraction(1, 10) * Fraction(k, 20)))
            assert inflate(100, u, 0.1) == expected, (u, expected)

    def test_rejects_negative_alpha(self):
        with pytest.raises(ValueError):
            inflate(10, 0.5, -0.1)

    @given(st.integers(0, 10000), st.floats(0, 1), st.floats(0, 4))
    @settings(max_examples=300, deadline=None)
    def test_monotone_and_bounded_below(self, l_hat, u, alpha):
        out = inflate(l_hat, u, alpha)
        assert out >= l_hat
        assert out >= inflate(l_hat, u / 2, alpha) >= l_hat
        assert out >= inflate(l_hat, u, alpha / 2) >= l_hat

    @given(st.integers(1, 10000), st.floats(0.01, 1), st.floats(0.01, 4))
    @settings(max_examples=200, deadline=None)
    def test_strictly_above_when_material(self, l_hat, u, alpha):
        # Strict inflation whenever the product is at least one token.
        if l_hat * alpha * u >= 1.0:
            assert inflate(l_hat, u, alpha) > l_hat


class TestOracle:
    def test_identity(self):
        p = OraclePredictor().predict(req(gen=200))
        assert p == Prediction(l_hat=200, u=0.0, l_eff=200)

    def test_observe_noop(self):
        pred = OraclePredictor()
        pred.observe(req(), 123)
        assert pred.predict(req(gen=9)).l_hat == 9


class TestNoisyOracle:
    def test_zero_noise_equals_oracle(self):
        noisy = NoisyOraclePredictor(sigma_rel=0.0, bias=0.0, alpha=0.3, seed=1)
        exact = OraclePredictor(alpha=0.3)
        for gen in (1, 5, 200, 777):
            assert noisy.predict(req(gen=gen)) == exact.predict(req(gen=gen))

    def test_uncertainty_deterministic_in_config(self):
        noisy = NoisyOraclePredictor(sigma_rel=0.25, seed=3)
        assert noisy.predict(req()).u == 0.5
        assert NoisyOraclePredictor(sigma_rel=2.0, seed=3).predict(req()).u == 1.0

    def test_noise_reproducible_per_seed(self):
        a = NoisyOraclePredictor(0.3, seed=5)
        b = NoisyOraclePredictor(0.3, seed=5)
        reqs = [req(rid=i, gen=100 + i) for i in range(20)]
        assert [a.predict(r) for r in reqs] == [b.predict(r) for r in reqs]

    def test_estimates_clamped_positive(self):
        noisy = NoisyOraclePredictor(sigma_rel=3.0, bias=-2.0, seed=0)
        for i in range(100):
            assert noisy.predict(req(rid=i, gen=10)).l_hat >= 1


class TestOnlineHistogram:
    def test_cold_start_global_fallback(self):
        pred = OnlineHistogramPredictor()
        p = pred.predict(req(prompt=10))
        assert p.u == 1.0

    def test_median_of_bin(self):
        pred = OnlineHistogramPredictor()
        for length in (100, 120, 140):
            pred.observe(req(prompt=10), length)
        assert pred.predict(req(prompt=10)).l_hat == 120

    def test_even_count_median_is_mean_of_middle(self):
        pred = OnlineHistogramPredictor()
        pred.observe(req(prompt=10), 50)
        assert pred.predict(req(prompt=10)).l_hat == 50
        pred.observe(req(prompt=10), 70)
        assert pred.predict(req(prompt=10)).l_hat == 60

    def test_cold_bin_uses_global_median_u1(self):
        pred = OnlineHistogramPredictor()
        for length in (30, 50, 90):
            pred.observe(req(prompt=8), length)
        p = pred.predict(req(prompt=4096))
        assert p.l_hat == 50 and p.u == 1.0

    def test_bins_separate_prompt_ranges(self):
        pred = OnlineHistogramPredictor()
        pred.observe(req(prompt=4), 10)
        pred.observe(req(prompt=1000), 500)
        assert pred.predict(req(prompt=5)).l_hat == 10
        assert pred.predict(req(prompt=900)).l_hat == 500

    def test_custom_edges_cover_whole_range(self):
        pred = OnlineHistogramPredictor(bin_edges=[100, 200])
        pred.observe(req(prompt=50), 11)
        pred.observe(req(prompt=150), 22)
        pred.observe(req(prompt=5000), 33)
        assert pred.predict(req(prompt=99)).l_hat == 11
        assert pred.predict(req(prompt=101)).l_hat == 22
        assert pred.predict(req(prompt=9999)).l_hat == 33

    def test_uncertainty_grows_with_spread(self):
        tight = OnlineHistogramPredictor()
        wide = OnlineHistogramPredictor()
        for i in range(9):
            tight.observe(req(prompt=10), 100 + i)
            wide.observe(req(prompt=10), 20 + 40 * i)
        assert tight.predict(req(prompt=10)).u < wide.predict(req(prompt=10)).u
        assert 0.0 <= wide.predict(req(prompt=10)).u <= 1.0


class TestBucketAccuracy:
    CFG = BucketConfig((128, 512), 2048, 1, 0)

    def test_perfect(self):
        assert bucket_accuracy([100, 300], [120, 500], self.CFG) == 1.0

    def test_miss(self):
        assert bucket_accuracy([100], [300], self.CFG) == 0.0

    def test_derived_two_thirds(self):
        cfg = BucketConfig((128, 512, 2048), 4096, 1, 0)
        assert bucket_accuracy([100, 600, 600], [120, 400, 700], cfg) == pytest.approx(2 / 3)

    def test_empty_is_one(self):
        assert bucket_accuracy([], [], self.CFG) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bucket_accuracy([1], [], self.CFG)

    def test_accepts_prediction_objects(self):
        preds = [Prediction(90, 0.0, 100), Prediction(600, 0.0, 600)]
        assert bucket_accuracy(preds, [120, 400], self.CFG) == 0.5

    def test_beyond_top_bound_is_its_own_bucket(self):
        assert bucket_accuracy([4000], [3000], self.CFG) == 1.0

    @given(st.lists(st.tuples(st.integers(0, 3000), st.integers(1, 3000)), max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_invariant_under_monotone_relabel(self, pairs):
        ests = [a for a, _ in pairs]
        reals = [b for _, b in pairs]
        base = bucket_accuracy(ests, reals, self.CFG)
        # Relabeling bucket ids by any strictly monotone map cannot change
        # match/mismatch, so accuracy against scaled bounds stays equal when
        # values scale with them.
        scaled = BucketConfig((1280, 5120), 20480, 1, 0)
        assert bucket_accuracy([e * 10 for e in ests], [r * 10 for r in reals], scaled) == base


def test_factory():
    assert isinstance(make_predictor("oracle"), OraclePredictor)
    assert isinstance(make_predictor("noisy-oracle", sigma_rel=0.1), NoisyOraclePredictor)
    assert isinstance(make_predictor("online-histogram"), OnlineHistogramPredictor)
    with pytest.raises(ValueError):
        make_predictor("transformer")
