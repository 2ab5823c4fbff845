import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from deepmts.losses import NoEventError, combined_loss, cox_ph_loss, dice_loss, l2_penalty
from deepmts.nncore import ShapeError

from oracles import finite_difference_grads, naive_cox_loss, relative_errors


def _t(values, dtype=torch.float64):
    return torch.tensor(values, dtype=dtype)


class TestDiceLoss:
    def test_perfect_overlap(self):
        g = torch.zeros(4, 4, 4, dtype=torch.float64)
        g[1:3, 1:3, 1:3] = 1.0
        assert abs(dice_loss(g, g).item() + 1.0) < 1e-6

    def test_zero_prediction(self):
        g = torch.ones(3, 3, 3, dtype=torch.float64)
        p = torch.zeros_like(g)
        assert dice_loss(p, g).item() == 0.0

    def test_half_prediction_gives_minus_point_eight(self):
        g = torch.zeros(5, 5, 5, dtype=torch.float64)
        g[:2] = 1.0
        assert abs(dice_loss(g / 2, g).item() + 0.8) < 1e-6

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(torch.zeros(2, 2, 2), torch.zeros(2, 2, 3))

    def test_batched_mean(self):
        g = torch.zeros(2, 4, 4, 4, dtype=torch.float64)
        g[:, :2] = 1.0
        p = g.clone()
        p[1] = g[1] / 2  # sample 0 perfect (-1), sample 1 half (-0.8)
        assert abs(dice_loss(p, g).item() + 0.9) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        g = (rng.random((4, 4, 4)) > 0.7).astype(np.float64)
        p0 = rng.random((4, 4, 4))

        def f(params):
            return dice_loss(torch.from_numpy(params[0]), torch.from_numpy(g)).item()

        p = torch.from_numpy(p0.copy()).requires_grad_(True)
        dice_loss(p, torch.from_numpy(g)).backward()
        numeric = finite_difference_grads(f, [p0.copy()])[0]
        errs = relative_errors(p.grad.numpy(), numeric)
        assert errs.size and errs.max() <= 1e-5


class TestCoxLoss:
    def test_single_event_is_zero(self):
        assert cox_ph_loss(_t([3.7]), _t([2.0]), _t([1.0])).item() == pytest.approx(0.0)

    def test_two_equal_risks(self):
        loss = cox_ph_loss(_t([0.0, 0.0]), _t([1.0, 2.0]), _t([1.0, 1.0]))
        assert loss.item() == pytest.approx(math.log(2) / 2, abs=1e-6)
        assert loss.item() == pytest.approx(0.346574, abs=1e-6)

    def test_distinct_risks(self):
        loss = cox_ph_loss(_t([1.0, 0.0]), _t([1.0, 2.0]), _t([1.0, 1.0]))
        want = -0.5 * ((1.0 - math.log(math.exp(1.0) + 1.0)) + 0.0)
        assert loss.item() == pytest.approx(want, abs=1e-9)
        assert loss.item() == pytest.approx(0.156630, abs=1e-6)

    def test_no_events_rejected(self):
        with pytest.raises(NoEventError):
            cox_ph_loss(_t([1.0, 2.0]), _t([1.0, 2.0]), _t([0.0, 0.0]))

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            risk = rng.normal(size=n)
            time = rng.exponential(size=n) + 1e-3
            event = rng.integers(0, 2, size=n)
            if event.sum() == 0:
                event[int(rng.integers(0, n))] = 1
            got = cox_ph_loss(_t(risk), _t(time), _t(event.astype(float))).item()
            want = naive_cox_loss(risk, time, event)
            assert abs(got - want) <= 1e-10

    def test_tied_times_share_risk_sets(self):
        # both events at the same time: each risk set holds both subjects
        loss = cox_ph_loss(_t([1.0, 0.0]), _t([1.0, 1.0]), _t([1.0, 1.0]))
        want = naive_cox_loss([1.0, 0.0], [1.0, 1.0], [1, 1])
        assert loss.item() == pytest.approx(want, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-3, 3), min_size=2, max_size=8),
        st.floats(-50, 50),
        st.randoms(use_true_random=False),
    )
    def test_shift_invariance(self, risks, shift, rnd):
        n = len(risks)
        time = [rnd.uniform(0.1, 10.0) for _ in range(n)]
        event = [1] + [rnd.randint(0, 1) for _ in range(n - 1)]
        base = cox_ph_loss(_t(risks), _t(time), _t([float(e) for e in event]))
        moved = cox_ph_loss(_t([r + shift for r in risks]), _t(time),
                            _t([float(e) for e in event]))
        assert abs(base.item() - moved.item()) <= 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.randoms(use_true_random=False))
    def test_permutation_invariance(self, rnd):
        n = rnd.randint(2, 8)
        risk = [rnd.gauss(0, 1) for _ in range(n)]
        time = [rnd.uniform(0.1, 5.0) for _ in range(n)]
        event = [1] + [rnd.randint(0, 1) for _ in range(n - 1)]
        perm = list(range(n))
        rnd.shuffle(perm)
        base = cox_ph_loss(_t(risk), _t(time), _t([float(e) for e in event])).item()
        shuf = cox_ph_loss(
            _t([risk[k] for k in perm]),
            _t([time[k] for k in perm]),
            _t([float(event[k]) for k in perm]),
        ).item()
        assert abs(base - shuf) <= 1e-10

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        n = 6
        time = rng.exponential(size=n) + 0.1
        event = np.array([1, 0, 1, 1, 0, 1], dtype=float)
        h0 = rng.normal(size=n)

        def f(params):
            return cox_ph_loss(torch.from_numpy(params[0]),
                               torch.from_numpy(time),
                               torch.from_numpy(event)).item()

        h = torch.from_numpy(h0.copy()).requires_grad_(True)
        cox_ph_loss(h, torch.from_numpy(time), torch.from_numpy(event)).backward()
        numeric = finite_difference_grads(f, [h0.copy()])[0]
        errs = relative_errors(h.grad.numpy(), numeric)
        assert errs.size and errs.max() <= 1e-6


class TestCombinedLoss:
    def test_seg_only(self):
        assert combined_loss(-1.0, 0.0, 0.0, 0.1) == pytest.approx(-1.0)

    def test_arithmetic(self):
        assert combined_loss(-0.8, 0.3466, 2.0, 0.1) == pytest.approx(-0.2534)

    def test_lambda_zero_drops_regularizer(self):
        assert combined_loss(-0.5, 0.2, 123.0, 0.0) == pytest.approx(-0.3)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            combined_loss(0.0, 0.0, 0.0, -0.1)

    def test_l2_penalty_accumulates(self):
        a = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        b = torch.tensor([[3.0]], dtype=torch.float64)
        assert l2_penalty([a, b]).item() == pytest.approx(14.0)
