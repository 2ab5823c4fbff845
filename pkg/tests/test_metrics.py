import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepmts.metrics import (
    NoComparablePairsError,
    c_index,
    dsc,
    threshold_mask,
    write_metrics_report,
)

from oracles import naive_c_index


class TestCIndex:
    def test_perfectly_concordant(self):
        assert c_index([3, 2, 1], [1, 2, 3], [1, 1, 1]) == 1.0

    def test_perfectly_discordant(self):
        assert c_index([1, 2, 3], [1, 2, 3], [1, 1, 1]) == 0.0

    def test_censoring_removes_pairs(self):
        # censored subject cannot anchor a pair
        value = c_index([0.5, 0.3, 0.7], [2, 3, 4], [1, 0, 1])
        assert value == 0.5

    def test_no_comparable_pairs(self):
        with pytest.raises(NoComparablePairsError):
            c_index([1, 2], [1, 2], [0, 0])

    def test_event_time_ties_not_comparable(self):
        with pytest.raises(NoComparablePairsError):
            c_index([1, 2], [3, 3], [1, 1])

    def test_risk_tie_scores_half(self):
        assert c_index([1, 1], [1, 2], [1, 0]) == 0.5

    def test_matches_pair_enumeration_oracle(self):
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 100:
            n = int(rng.integers(2, 31))
            risk = rng.normal(size=n)
            time = rng.exponential(size=n) + 1e-2
            event = rng.integers(0, 2, size=n)
            anchors = [i for i in range(n) if event[i] and any(time > time[i])]
            if not anchors:
                continue
            got = c_index(risk, time, event)
            want = naive_c_index(list(risk), list(time), list(event))
            assert got == pytest.approx(want, abs=1e-12)
            checked += 1

    @settings(max_examples=50, deadline=None)
    @given(st.randoms(use_true_random=False))
    def test_complement_under_negation(self, rnd):
        n = rnd.randint(3, 20)
        risk = rnd.sample(range(1000), n)   # distinct risks: no ties
        time = rnd.sample(range(1, 500), n)  # distinct times: pairs exist
        event = [1] * n
        a = c_index(risk, time, event)
        b = c_index([-r for r in risk], time, event)
        assert a + b == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.randoms(use_true_random=False))
    def test_invariant_under_monotone_transform(self, rnd):
        n = rnd.randint(3, 15)
        risk = np.array(rnd.sample(range(-500, 500), n), dtype=np.float64)
        time = rnd.sample(range(1, 500), n)
        event = [1] * n
        a = c_index(risk, time, event)
        b = c_index(risk ** 3 + 3.0, time, event)  # strictly increasing map
        assert a == pytest.approx(b, abs=1e-12)


class TestDsc:
    def test_identical_masks(self):
        m = np.zeros((4, 4, 4), dtype=np.uint8)
        m[1:3] = 1
        assert dsc(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        b = np.zeros((4, 4, 4), dtype=np.uint8)
        a[0] = 1
        b[3] = 1
        assert dsc(a, b) == 0.0

    def test_partial_overlap_counts(self):
        a = np.zeros((10, 1, 1), dtype=np.uint8)
        b = np.zeros((10, 1, 1), dtype=np.uint8)
        a[0:4] = 1      # |pred| = 4
        b[1:7] = 1      # |truth| = 6, overlap 3
        assert dsc(a, b) == pytest.approx(0.6)

    def test_both_empty_convention(self):
        z = np.zeros((3, 3, 3), dtype=np.uint8)
        assert dsc(z, z) == 1.0

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            dsc(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_threshold_rule(self):
        prob = np.array([[[0.49, 0.5], [0.51, 0.0]]])
        assert threshold_mask(prob).tolist() == [[[0, 1], [1, 0]]]


class TestMetricsReport:
    def test_text_and_json_twins(self, tmp_path):
        write_metrics_report(tmp_path, {"c_index": 0.75, "n": 40})
        text = (tmp_path / "metrics.txt").read_text().splitlines()
        assert "c_index=0.750000" in text
        assert "n=40" in text
        data = json.loads((tmp_path / "metrics.json").read_text())
        assert data["c_index"] == 0.75
