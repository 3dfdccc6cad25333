import json
import math

import numpy as np
import pytest

from kvbucket.workload import (
    DriftSchedule,
    EmpiricalHistogram,
    Lognormal,
    LognormalMixture,
    Request,
    Segment,
    TraceError,
    load_trace,
    save_trace,
    synth_trace,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


class TestLoadTrace:
    def test_single_line(self, tmp_path):
        p = tmp_path / "t.jsonl"
        write_lines(p, ['{"id":1,"arrival_time":0.0,"prompt_len":10,"true_gen_len":50}'])
        reqs = load_trace(p)
        assert reqs == [Request(1, 0.0, 10, 50)]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text("")
        assert load_trace(p) == []

    def test_duplicate_id_names_line(self, tmp_path):
        p = tmp_path / "t.jsonl"
        lines = [
            json.dumps({"id": i, "arrival_time": float(i), "prompt_len": 1, "true_gen_len": 1})
            for i in [1, 2, 7, 4, 5, 6, 8, 9]
        ]
        lines.append(json.dumps({"id": 7, "arrival_time": 9.0, "prompt_len": 1, "true_gen_len": 1}))
        write_lines(p, lines)
        with pytest.raises(TraceError, match="line 9"):
            load_trace(p)

    def test_sorted_by_arrival(self, tmp_path):
        p = tmp_path / "t.jsonl"
        write_lines(p, [
            '{"id":1,"arrival_time":5.0,"prompt_len":2,"true_gen_len":2}',
            '{"id":2,"arrival_time":1.0,"prompt_len":2,"true_gen_len":2}',
        ])
        reqs = load_trace(p)
        assert [r.id for r in reqs] == [2, 1]

    def test_bad_json_names_line(self, tmp_path):
        p = tmp_path / "t.jsonl"
        write_lines(p, ['{"id":1,"arrival_time":0,"prompt_len":1,"true_gen_len":1}', "{oops"])
        with pytest.raises(TraceError, match="line 2"):
            load_trace(p)

    def test_nonpositive_length_rejected(self, tmp_path):
        p = tmp_path / "t.jsonl"
        write_lines(p, ['{"id":1,"arrival_time":0,"prompt_len":0,"true_gen_len":5}'])
        with pytest.raises(TraceError, match="prompt_len"):
            load_trace(p)

    def test_unknown_keys_ignored_and_meta_kept(self, tmp_path):
        p = tmp_path / "t.jsonl"
        write_lines(p, [
            '{"id":1,"arrival_time":0,"prompt_len":1,"true_gen_len":1,'
            '"meta":{"type":"chat"},"junk":42}',
        ])
        (req,) = load_trace(p)
        assert req.meta == {"type": "chat"}

    def test_roundtrip_save_load(self, tmp_path):
        reqs = [Request(0, 0.5, 3, 7, {"k": "v"}), Request(1, 1.5, 2, 9)]
        p = tmp_path / "t.jsonl"
        save_trace(reqs, p)
        assert load_trace(p) == reqs


def single_segment(mu=4.0, sigma=1.0):
    return DriftSchedule((Segment(0.0, Lognormal(mu, sigma)),))


class TestSynthTrace:
    def test_n_zero(self):
        assert synth_trace(single_segment(), 0, 1.0, seed=1) == []

    def test_deterministic(self):
        a = synth_trace(single_segment(), 500, 5.0, seed=42)
        b = synth_trace(single_segment(), 500, 5.0, seed=42)
        assert a == b
        c = synth_trace(single_segment(), 500, 5.0, seed=43)
        assert a != c

    def test_lognormal_median(self):
        # Analytic lognormal median is e^mu.
        trace = synth_trace(single_segment(mu=4.0, sigma=1.0), 10000, 100.0, seed=42)
        med = float(np.median([r.true_gen_len for r in trace]))
        assert abs(med - math.exp(4.0)) / math.exp(4.0) < 0.05

    def test_lengths_positive_integers(self):
        trace = synth_trace(single_segment(mu=0.0, sigma=2.0), 2000, 10.0, seed=3)
        for r in trace:
            assert isinstance(r.true_gen_len, int) and r.true_gen_len >= 1
            assert isinstance(r.prompt_len, int) and r.prompt_len >= 1

    def test_poisson_interarrival_mean(self):
        rate = 20.0
        trace = synth_trace(single_segment(), 10000, rate, seed=7)
        times = [r.arrival_time for r in trace]
        gaps = np.diff([0.0] + times)
        # Mean gap within 3 standard errors of 1/rate.
        se = (1.0 / rate) / math.sqrt(len(gaps))
        assert abs(gaps.mean() - 1.0 / rate) < 3 * se
        assert all(g > 0 for g in gaps)

    def test_drift_shifts_median(self):
        sched = DriftSchedule((
            Segment(0.0, Lognormal(4.0, 1.0)),
            Segment(100.0, Lognormal(6.0, 1.0)),
        ))
        trace = synth_trace(sched, 20000, 100.0, seed=5)
        early = [r.true_gen_len for r in trace if r.arrival_time < 100.0]
        late = [r.true_gen_len for r in trace if r.arrival_time >= 100.0]
        assert len(early) > 100 and len(late) > 100
        assert np.median(late) >= 2 * np.median(early)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            synth_trace(single_segment(), 10, 0.0, seed=1)


class TestDistributions:
    def test_lognormal_rejects_bad_sigma(self):
        with pytest.raises(TraceError):
            Lognormal(4.0, 0.0)

    def test_mixture_weights_positive(self):
        with pytest.raises(TraceError):
            LognormalMixture(((0.0, 4.0, 1.0),))

    def test_mixture_samples_both_components(self):
        dist = LognormalMixture(((0.5, 0.0, 0.1), (0.5, 8.0, 0.1)))
        rng = np.random.default_rng(0)
        samples = [dist.sample(rng) for _ in range(500)]
        assert min(samples) < 5 and max(samples) > 1000

    def test_histogram_values(self):
        dist = EmpiricalHistogram((10, 20), (1, 3))
        rng = np.random.default_rng(0)
        samples = [dist.sample(rng) for _ in range(400)]
        assert set(samples) == {10.0, 20.0}
        assert samples.count(20.0) > samples.count(10.0)

    def test_histogram_rejects_nonpositive(self):
        with pytest.raises(TraceError):
            EmpiricalHistogram((0, 5), (1, 1))


class TestDriftSchedule:
    def test_first_segment_must_start_at_zero(self):
        with pytest.raises(TraceError):
            DriftSchedule((Segment(1.0, Lognormal(4, 1)),))

    def test_starts_strictly_increasing(self):
        with pytest.raises(TraceError):
            DriftSchedule((
                Segment(0.0, Lognormal(4, 1)),
                Segment(0.0, Lognormal(5, 1)),
            ))

    def test_segment_lookup(self):
        sched = DriftSchedule((
            Segment(0.0, Lognormal(4, 1)),
            Segment(10.0, Lognormal(5, 1)),
        ))
        assert sched.segment_at(0.0) is sched.segments[0]
        assert sched.segment_at(9.999) is sched.segments[0]
        assert sched.segment_at(10.0) is sched.segments[1]
