import numpy as np
import pytest
from hypothesis import given, strategies as st

from cpnet import tensor as T
from cpnet.tensor import Tensor
from cpnet.metrics import (ConfusionCounts, accumulate_confusion, batch_jaccard_loss,
                           binarize, compute_ber, jaccard_loss)

from oracles import fd_gradient, jaccard_reference, max_rel_error


def loss_value(y_true, y_pred, eps=1e-7):
    return jaccard_loss(Tensor(np.asarray(y_true, dtype=np.float64)),
                        Tensor(np.asarray(y_pred, dtype=np.float64)), eps).item()


class TestJaccardLoss:
    def test_perfect_overlap_is_minus_one(self):
        assert loss_value([1.0] * 4, [1.0] * 4) == -1.0

    def test_empty_empty_is_perfect_match(self):
        assert loss_value([0.0] * 4, [0.0] * 4) == -1.0

    def test_half_overlap_example(self):
        # direct evaluation: -(0.5 + eps) / (1 + 1 - 0.5 + eps) -> -1/3
        got = loss_value([1.0, 0.0], [0.5, 0.5])
        assert abs(got - (-1.0 / 3.0)) < 1e-6
        assert abs(got - jaccard_reference(np.array([1.0, 0.0]), np.array([0.5, 0.5]), 1e-7)) < 1e-15

    def test_gradient_matches_finite_differences(self, rng):
        y_t = (rng.uniform(0, 1, (8, 8)) > 0.6).astype(np.float64)
        y_vals = rng.uniform(0.05, 0.95, (8, 8))

        def forward(track=False):
            y = Tensor(y_vals, requires_grad=track)
            return y, jaccard_loss(Tensor(y_t), y)

        y, loss = forward(track=True)
        loss.backward()
        numeric = fd_gradient(lambda: forward()[1].item(), y_vals, h=1e-6)
        assert max_rel_error(y.grad, numeric) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            loss_value([1.0], [0.5, 0.5])

    def test_non_binary_truth_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            loss_value([0.5, 1.0], [0.5, 0.5])

    def test_out_of_range_prediction_rejected(self):
        with pytest.raises(ValueError, match=r"\[0,1\]"):
            loss_value([1.0, 0.0], [1.1, 0.5])
        loss_value([1.0, 0.0], [1.0 + 5e-7, 0.5])  # within tolerance

    @given(st.integers(0, 2**31 - 1), st.integers(1, 64))
    def test_bounded_in_minus_one_zero(self, seed, n):
        rng = np.random.default_rng(seed)
        y_t = (rng.uniform(0, 1, n) > rng.uniform(0, 1)).astype(np.float64)
        y = rng.uniform(0, 1, n)
        v = loss_value(y_t, y)
        assert -1.0 <= v <= 0.0

    def test_identity_on_any_binary_truth(self, rng):
        for _ in range(25):
            y_t = (rng.uniform(0, 1, 32) > rng.uniform(0.05, 0.95)).astype(np.float64)
            assert loss_value(y_t, y_t) == -1.0

    def test_monotone_in_predictions(self, rng):
        # raising y where truth=1 improves (decreases) the loss; raising
        # where truth=0 worsens it
        y_t = np.array([1.0, 1.0, 0.0, 0.0])
        y = np.array([0.4, 0.6, 0.3, 0.7])
        base = loss_value(y_t, y)
        up_pos = y.copy()
        up_pos[0] += 0.2
        assert loss_value(y_t, up_pos) < base
        up_neg = y.copy()
        up_neg[2] += 0.2
        assert loss_value(y_t, up_neg) > base

    def test_batch_mean_of_per_sample_losses(self, rng):
        y_t = (rng.uniform(0, 1, (3, 1, 4, 4)) > 0.5).astype(np.float64)
        y = rng.uniform(0, 1, (3, 1, 4, 4))
        got = batch_jaccard_loss(Tensor(y_t), Tensor(y)).item()
        expected = np.mean([jaccard_reference(y_t[i], y[i], 1e-7) for i in range(3)])
        assert abs(got - expected) < 1e-12


class TestBinarize:
    def test_threshold_cases(self):
        assert binarize(np.array([0.4, 0.6]), 0.5).tolist() == [0, 1]

    def test_tie_goes_to_one(self):
        assert binarize(np.array([0.5]), 0.5).tolist() == [1]

    def test_all_below_threshold(self):
        assert binarize(np.array([0.1, 0.2, 0.3]), 0.5).tolist() == [0, 0, 0]

    def test_threshold_range_validated(self):
        with pytest.raises(ValueError, match="threshold"):
            binarize(np.array([0.5]), 1.0)


class TestConfusion:
    def test_perfect_two_pixel_case(self):
        c = accumulate_confusion(np.array([1, 0]), np.array([1, 0]))
        assert (c.tp, c.tn, c.fp, c.fn) == (1, 1, 0, 0)

    def test_hand_counted_four_pixel_case(self):
        c = accumulate_confusion(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)

    def test_accumulation_equals_concatenation(self, rng):
        a_pred, a_truth = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
        b_pred, b_truth = rng.integers(0, 2, 70), rng.integers(0, 2, 70)
        split = accumulate_confusion(b_pred, b_truth, accumulate_confusion(a_pred, a_truth))
        joined = accumulate_confusion(np.concatenate([a_pred, b_pred]),
                                      np.concatenate([a_truth, b_truth]))
        assert split == joined

    def test_total_matches_pixel_count(self, rng):
        pred, truth = rng.integers(0, 2, 123), rng.integers(0, 2, 123)
        assert accumulate_confusion(pred, truth).total() == 123

    @given(st.integers(0, 2**31 - 1))
    def test_merge_is_commutative(self, seed):
        rng = np.random.default_rng(seed)
        a = ConfusionCounts(*rng.integers(0, 100, 4).tolist())
        b = ConfusionCounts(*rng.integers(0, 100, 4).tolist())
        assert a.merge(b) == b.merge(a)


class TestBer:
    def test_perfect_prediction(self):
        r = compute_ber(ConfusionCounts(tp=5, tn=7, fp=0, fn=0))
        assert r.ber == 0.0 and r.per_shadow == 0.0 and r.per_non_shadow == 0.0

    def test_fully_inverted_prediction(self):
        r = compute_ber(ConfusionCounts(tp=0, tn=0, fp=7, fn=5))
        assert r.ber == 1.0

    def test_hand_computed_example(self):
        # 1 - (3/4 + 2/4)/2 = 0.375
        r = compute_ber(ConfusionCounts(tp=3, fn=1, tn=2, fp=2))
        assert r.ber == 0.375
        assert r.per_shadow == 0.25
        assert r.per_non_shadow == 0.5

    def test_missing_class_is_undefined_with_note(self):
        r = compute_ber(ConfusionCounts(tp=0, fn=0, tn=5, fp=1))
        assert r.per_shadow is None and r.ber is None
        assert r.per_non_shadow == 1 / 6
        assert "undefined" in r.note
        assert "undefined" in r.as_text()

    @given(st.integers(0, 2**31 - 1))
    def test_ber_is_mean_of_per_class_rates(self, seed):
        rng = np.random.default_rng(seed)
        tp, tn, fp, fn = rng.integers(0, 1000, 4).tolist()
        c = ConfusionCounts(tp=tp + 1, tn=tn + 1, fp=fp, fn=fn)  # both classes present
        r = compute_ber(c)
        assert abs(r.ber - 0.5 * (r.per_shadow + r.per_non_shadow)) < 1e-12

    def test_order_invariance_of_accumulation(self, rng):
        imgs = [(rng.integers(0, 2, 30), rng.integers(0, 2, 30)) for _ in range(4)]
        forward = ConfusionCounts()
        for p, t in imgs:
            forward = accumulate_confusion(p, t, forward)
        backward = ConfusionCounts()
        for p, t in reversed(imgs):
            backward = accumulate_confusion(p, t, backward)
        assert compute_ber(forward) == compute_ber(backward)


class TestReportFormats:
    def test_keyvalues_format_round_trips(self):
        r = compute_ber(ConfusionCounts(tp=3, fn=1, tn=2, fp=2))
        kv = dict(line.split("=", 1) for line in r.as_keyvalues().splitlines())
        assert set(kv) == {"ber", "per_shadow", "per_non_shadow", "tp", "tn", "fp", "fn"}
        assert float(kv["ber"]) == 0.375
        assert int(kv["tp"]) == 3

    def test_text_table_mentions_all_metrics(self):
        r = compute_ber(ConfusionCounts(tp=3, fn=1, tn=2, fp=2))
        text = r.as_text()
        for key in ("ber", "per_shadow", "per_non_shadow", "tp=3"):
            assert key in text
