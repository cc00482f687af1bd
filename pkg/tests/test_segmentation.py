import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taris.segmentation import (
    UNBOUNDED,
    AttentionMask,
    CountUnit,
    GateParams,
    SegmentIndices,
    WordIndices,
    build_dynamic_mask,
    build_window_mask,
    estimated_count,
    frame_segment_indices,
    gate_alpha,
    label_word_indices,
    word_loss,
)
from helpers import brute_dynamic, brute_window, random_indices, random_window
from taris.tensor import ContractError, Tape, Tensor, grad_check

GO, SP = 0, 1
A, B, X, Y = 2, 3, 25, 26


class TestGate:
    def test_zero_params_give_half(self):
        o = Tensor(np.random.default_rng(0).standard_normal((7, 8)))
        alpha = gate_alpha(o, GateParams(Tensor(np.zeros((8, 1))), Tensor(np.zeros(1))))
        assert alpha.shape == (7,)
        np.testing.assert_array_equal(alpha.data, 0.5)

    def test_shape_contract(self):
        with pytest.raises(ContractError):
            GateParams(Tensor(np.zeros((8,))), Tensor(np.zeros(1)))

    def test_grad_wrt_weights(self):
        rng = np.random.default_rng(1)
        o = Tensor(rng.standard_normal((6, 5)))
        W = Tensor(rng.standard_normal((5, 1)), requires_grad=True)
        b = Tensor(rng.standard_normal(1), requires_grad=True)
        assert grad_check(lambda W, b: gate_alpha(o, GateParams(W, b)).sum(), [W, b]) < 1e-6


class TestSegmentIndices:
    @pytest.mark.parametrize(
        "alpha, expected",
        [([0.4, 0.4, 0.4], [0, 0, 1]), ([0.0] * 4, [0] * 4), ([0.9] * 4, [0, 1, 2, 3])],
    )
    def test_examples(self, alpha, expected):
        seg = frame_segment_indices(np.array(alpha))
        np.testing.assert_array_equal(seg.w_hat, expected)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            frame_segment_indices(np.array([0.5, 1.5]))
        with pytest.raises(ContractError):
            frame_segment_indices(np.array([-0.1]))

    def test_no_gradient_path(self):
        alpha = Tensor(np.array([0.3, 0.6]), requires_grad=True)
        seg = frame_segment_indices(alpha)
        assert isinstance(seg.w_hat, np.ndarray) and seg.w_hat.dtype.kind == "i"

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1, exclude_max=True), min_size=1, max_size=60))
    def test_monotone_unit_steps(self, alpha):
        seg = frame_segment_indices(np.array(alpha))
        steps = np.diff(np.concatenate([[0], seg.w_hat]))
        assert set(np.unique(steps)) <= {0, 1}
        np.testing.assert_array_equal(seg.w_hat, np.floor(seg.cum_alpha))


class TestWordIndices:
    def test_space_mode(self):
        np.testing.assert_array_equal(label_word_indices([GO, A, SP, B, SP]).w, [0, 0, 1, 1, 2])

    def test_go_only(self):
        np.testing.assert_array_equal(label_word_indices([GO]).w, [0])

    def test_token_mode(self):
        np.testing.assert_array_equal(label_word_indices([GO, X, Y], CountUnit.TOKEN).w, [0, 1, 2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 27), max_size=40))
    def test_unit_steps(self, toks):
        w = label_word_indices([GO] + toks).w
        assert set(np.diff(w)) <= {0, 1}
        for k in range(len(w)):
            assert w[k] == sum(1 for t in toks[:k] if t == SP)


class TestWindowMask:
    def test_offline(self):
        assert build_window_mask(3, UNBOUNDED, UNBOUNDED).admissible.all()

    def test_causal(self):
        np.testing.assert_array_equal(build_window_mask(3, UNBOUNDED, 0).admissible, np.tril(np.ones((3, 3), bool)))

    def test_lookback_lookahead_one(self):
        ok = build_window_mask(4, 1, 1).admissible
        expected = [[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]]
        np.testing.assert_array_equal(ok, np.array(expected, bool))

    def test_bias_values(self):
        bias = build_window_mask(3, 0, 0).bias
        assert set(np.unique(bias)) == {0.0, -1e9}

    def test_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(1, 13))
            lb, la = random_window(rng), random_window(rng)
            np.testing.assert_array_equal(build_window_mask(n, lb, la).admissible, brute_window(n, lb, la))


class TestDynamicMask:
    def test_example(self):
        seg = SegmentIndices(np.array([0, 0, 1, 1, 2]), np.zeros(5))
        ok = build_dynamic_mask(seg, WordIndices(np.array([0, 1, 2])), 0, 0).admissible
        expected = [[1, 1, 0, 0, 0], [0, 0, 1, 1, 0], [0, 0, 0, 0, 1]]
        np.testing.assert_array_equal(ok, np.array(expected, bool))

    def test_unbounded_admits_all_valid(self):
        seg = SegmentIndices(np.array([0, 0, 1, 3, 3]), np.zeros(5))
        fv = np.array([1, 1, 1, 1, 0], bool)
        ok = build_dynamic_mask(seg, WordIndices(np.array([0, 4, 9])), UNBOUNDED, UNBOUNDED, fv).admissible
        np.testing.assert_array_equal(ok, np.broadcast_to(fv, (3, 5)))

    def test_fallback_picks_nearest_earliest(self):
        seg = SegmentIndices(np.array([0, 0, 1, 1]), np.zeros(4))
        ok = build_dynamic_mask(seg, WordIndices(np.array([3])), 0, 0).admissible
        np.testing.assert_array_equal(ok, [[False, False, True, False]])

    def test_no_valid_frames_is_an_error(self):
        seg = SegmentIndices(np.array([0, 0]), np.zeros(2))
        with pytest.raises(ContractError):
            build_dynamic_mask(seg, WordIndices(np.array([0])), 0, 0, np.zeros(2, bool))

    def test_oracle_random(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n, l = int(rng.integers(1, 13)), int(rng.integers(1, 13))
            w_hat, w = random_indices(rng, n, l)
            fv = rng.random(n) < 0.85
            fv[rng.integers(0, n)] = True
            lb, la = random_window(rng), random_window(rng)
            got = build_dynamic_mask(SegmentIndices(w_hat, np.zeros(n)), WordIndices(w), lb, la, fv).admissible
            np.testing.assert_array_equal(got, brute_dynamic(w_hat, w, lb, la, fv))

    def test_growing_window_keeps_connections(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n, l = int(rng.integers(1, 13)), int(rng.integers(1, 13))
            w_hat, w = random_indices(rng, n, l)
            seg, words = SegmentIndices(w_hat, np.zeros(n)), WordIndices(w)
            lb, la = int(rng.integers(0, 4)), int(rng.integers(0, 4))
            small = build_dynamic_mask(seg, words, lb, la).admissible
            # rows that needed the fallback are excluded: the rule itself is what grows
            raw = small & ((w_hat[None] >= w[:, None] - lb) & (w_hat[None] <= w[:, None] + la))
            for lb2, la2 in [(lb + 1, la), (lb, la + 1), (UNBOUNDED, la), (lb, UNBOUNDED)]:
                big = build_dynamic_mask(seg, words, lb2, la2).admissible
                assert not (raw & ~big).any()

    def test_batch_equals_single(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            B = int(rng.integers(1, 5))
            n, l = int(rng.integers(1, 13)), int(rng.integers(1, 13))
            pairs = [random_indices(rng, n, l) for _ in range(B)]
            fv = rng.random((B, n)) < 0.8
            fv[:, 0] = True
            lb, la = random_window(rng), random_window(rng)
            seg = SegmentIndices(np.stack([p[0] for p in pairs]), np.zeros((B, n)))
            words = WordIndices(np.stack([p[1] for p in pairs]))
            batched = build_dynamic_mask(seg, words, lb, la, fv).admissible
            for b in range(B):
                single = build_dynamic_mask(
                    SegmentIndices(pairs[b][0], np.zeros(n)), WordIndices(pairs[b][1]), lb, la, fv[b]
                ).admissible
                np.testing.assert_array_equal(batched[b], single)

    def test_mask_has_two_values(self):
        seg = SegmentIndices(np.array([0, 1, 2]), np.zeros(3))
        m = build_dynamic_mask(seg, WordIndices(np.array([0, 2])), 0, 0)
        assert isinstance(m, AttentionMask)
        assert set(np.unique(m.bias)) == {0.0, -1e9}


class TestWordLoss:
    def test_value(self):
        alpha = Tensor(np.array([0.7] * 6))  # sum 4.2
        assert word_loss(alpha, 5).item() == pytest.approx(0.64)

    def test_zero(self):
        assert word_loss(Tensor(np.array([0.5, 0.5])), 1).item() == 0.0

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(4)
        alpha = Tensor(rng.random(8), requires_grad=True)
        fv = np.array([1, 1, 1, 1, 1, 1, 0, 0], bool)
        target = 3
        with Tape() as tape:
            loss = word_loss(alpha, target, fv)
        g = tape.backward(loss)[alpha]
        s = alpha.data[fv].sum()
        np.testing.assert_allclose(g, np.where(fv, -2 * (target - s), 0.0), rtol=1e-12)
        assert grad_check(lambda a: word_loss(a, target, fv), [alpha]) < 1e-7

    def test_batch_mean(self):
        alpha = Tensor(np.array([[0.5, 0.5], [1.0, 0.0]]))
        assert word_loss(alpha, np.array([2, 0])).item() == pytest.approx((1.0 + 1.0) / 2)


class TestEstimatedCount:
    def test_sum(self):
        assert estimated_count(np.array([0.4, 0.4, 0.4])) == pytest.approx(1.2)

    def test_empty(self):
        assert estimated_count(np.array([0.3, 0.2]), np.zeros(2, bool)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1, exclude_max=True), min_size=1, max_size=40))
    def test_bounds_final_segment(self, alpha):
        a = np.array(alpha)
        assert estimated_count(a) >= frame_segment_indices(a).w_hat[-1]


def test_gate_gradient_only_through_word_loss():
    """Masks built from the gate carry no gradient, so only the word loss reaches it."""
    rng = np.random.default_rng(5)
    o = Tensor(rng.standard_normal((6, 4)))
    W = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    with Tape() as tape:
        alpha = gate_alpha(o, GateParams(W, b))
        seg = frame_segment_indices(alpha)
        m = build_dynamic_mask(seg, WordIndices(np.array([0, 1])), 0, 0)
        loss = (Tensor(m.admissible.astype(float)) * 3.0).sum() + alpha.sum() * 0.0
    grads = tape.backward(loss)
    assert np.all(grads[W] == 0) and np.all(grads[b] == 0)
