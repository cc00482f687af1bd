import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import taris.tensor as T
from taris.tensor import ContractError, EmptyAttentionRowError, Tape, Tensor, grad_check


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def rand(rng, *shape):
    return leaf(rng.standard_normal(shape))


SHAPES = [(1,), (4,), (3, 1), (2, 5), (1, 3, 4)]


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_dot(self):
        np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])

    def test_shape_error_names_shapes(self):
        with pytest.raises(ContractError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad(self):
        rng = np.random.default_rng(0)
        a, b = rand(rng, 4, 5), rand(rng, 5, 3)
        assert grad_check(lambda a, b: (a @ b).sum() * 1.0 + T.square(a @ b).sum(), [a, b]) < 1e-6

    def test_batched_against_shared_matrix(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 2, 3, 4), rand(rng, 4, 2)
        assert grad_check(lambda a, b: T.square(a @ b).sum(), [a, b]) < 1e-6


class TestSigmoid:
    def test_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_symmetry(self):
        x = np.linspace(-30, 30, 1001)
        np.testing.assert_allclose(T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data, 1.0, atol=1e-12)

    def test_range(self):
        y = T.sigmoid(Tensor(np.linspace(-20, 20, 101))).data
        assert (y > 0).all() and (y < 1).all()

    def test_grad(self):
        x = rand(np.random.default_rng(2), 6)
        assert grad_check(lambda x: T.square(T.sigmoid(x)).sum(), [x]) < 1e-6


class TestMaskedSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.masked_softmax(Tensor([1.0, 1.0, 1.0]), np.zeros(3)).data, [1 / 3] * 3)

    def test_forced_single_source(self):
        y = T.masked_softmax(Tensor([5.0, 5.0]), np.array([0.0, -1e9])).data
        np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-9)
        assert y[1] < 1e-300

    def test_empty_row_raises(self):
        with pytest.raises(EmptyAttentionRowError, match="empty attention row"):
            T.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[0.0, -1e9, 0.0], [-1e9] * 3]))

    def test_grad(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 3, 4)
        mask = np.where(rng.random((3, 4)) < 0.3, T.NEG_LARGE, 0.0)
        mask[:, 0] = 0.0
        w = rng.standard_normal((3, 4))
        assert grad_check(lambda x: (T.masked_softmax(x, mask) * w).sum(), [x]) < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        x = rng.standard_normal((5, n)) * 10
        mask = np.where(rng.random((5, n)) < 0.5, T.NEG_LARGE, 0.0)
        mask[np.arange(5), rng.integers(0, n, 5)] = 0.0
        y = T.masked_softmax(Tensor(x), mask).data
        np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
        assert (y[mask != 0] < 1e-30).all()


class TestCumsum:
    def test_definition(self):
        np.testing.assert_allclose(T.cumsum(Tensor([0.4, 0.4, 0.4])).data, [0.4, 0.8, 1.2])

    def test_zeros(self):
        np.testing.assert_array_equal(T.cumsum(Tensor(np.zeros(5))).data, np.zeros(5))

    def test_grad(self):
        rng = np.random.default_rng(4)
        x = rand(rng, 7)
        w = rng.standard_normal(7)
        assert grad_check(lambda x: (T.cumsum(x) * w).sum(), [x]) < 1e-7

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_monotone_for_nonnegative(self, xs):
        y = T.cumsum(Tensor(np.array(xs))).data
        assert (np.diff(y) >= 0).all()


class TestLayerNorm:
    def test_constant_input_gives_bias(self):
        bias = np.array([0.5, -1.0, 2.0, 0.0])
        out = T.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(bias))
        np.testing.assert_allclose(out.data, bias, atol=1e-12)

    def test_unit_std(self):
        x = np.random.default_rng(5).standard_normal((6, 16)) * 4 + 2
        y = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-4)

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            T.layer_norm(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0)

    def test_grad(self):
        rng = np.random.default_rng(6)
        x, g, b = rand(rng, 3, 5), rand(rng, 5), rand(rng, 5)
        w = rng.standard_normal((3, 5))
        assert grad_check(lambda x, g, b: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-5


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(5.0))
        assert T.dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_eval_identity(self):
        x = Tensor(np.arange(5.0))
        assert T.dropout(x, 0.5, False, None) is x

    def test_rate_validation(self):
        with pytest.raises(ContractError):
            T.dropout(Tensor(np.ones(2)), 1.0, True, np.random.default_rng(0))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_statistics(self, seed):
        x = np.ones(100_000)
        y = T.dropout(Tensor(x), 0.1, True, np.random.default_rng(seed)).data
        kept = y != 0
        assert abs(kept.mean() - 0.9) < 0.01
        # survivors are rescaled so the expectation is preserved
        assert abs(y.mean() - 1.0) < 0.02

    def test_grad_uses_same_mask(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 20)

        def f(x):
            return T.square(T.dropout(x, 0.3, True, np.random.default_rng(11))).sum()

        assert grad_check(f, [x]) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf([1.0, 2.0, 3.0])
        with Tape() as tape:
            loss = x.sum()
        np.testing.assert_array_equal(tape.backward(loss)[x], np.ones(3))

    def test_reuse_accumulates(self):
        x = leaf([1.0, -2.0])
        with Tape() as tape:
            loss = (x + x).sum()
        np.testing.assert_array_equal(tape.backward(loss)[x], [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError, match="scalar"):
            tape.backward(y)

    def test_no_tape_no_recording(self):
        x = leaf([1.0])
        y = x * 3.0
        assert not y.requires_grad

    def test_grad_buffer_accumulates_across_calls(self):
        x = leaf([1.0, 2.0])
        for _ in range(2):
            with Tape() as tape:
                loss = T.square(x).sum()
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_tape_order_is_topological(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = T.sigmoid(x * 2.0)
            loss = (y * y).sum()
        outputs = set()
        for rec in tape.records:
            for t in rec.inputs:
                assert t is x or id(t) in outputs or not t.requires_grad
            outputs.add(id(rec.output))

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(9)
            a, b = rand(rng, 3, 4), rand(rng, 4, 2)
            with Tape() as tape:
                loss = T.square(T.sigmoid(a @ b)).sum()
            g = tape.backward(loss)
            return g[a], g[b]

        (a1, b1), (a2, b2) = run(), run()
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


class TestGradCheck:
    def test_square_sum(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            loss = T.square(x).sum()
        np.testing.assert_allclose(tape.backward(loss)[x], [2.0, 4.0])
        assert grad_check(lambda x: T.square(x).sum(), [x]) < 1e-8

    def test_detects_broken_backward(self, monkeypatch):
        monkeypatch.setattr(T, "_sigmoid_grad", lambda y, g: -g * y * (1.0 - y))
        x = rand(np.random.default_rng(10), 5)
        assert grad_check(lambda x: T.sigmoid(x).sum(), [x]) > 1e-2


ELEMENTWISE = {
    "add": lambda a, b: T.square(a + b).sum(),
    "sub": lambda a, b: T.square(a - b).sum(),
    "mul": lambda a, b: (a * b * a).sum(),
    "div": lambda a, b: (a / (T.square(b) + 1.0)).sum(),
    "exp": lambda a, b: T.exp(a * 0.5).sum() + b.sum(),
    "log": lambda a, b: T.log(T.square(a) + 1.0).sum() + b.sum(),
    "relu": lambda a, b: T.square(T.relu(a + 0.1)).sum() + b.sum(),
    "log_softmax": lambda a, b: (T.log_softmax(a) * b).sum(),
    "mean": lambda a, b: T.square(a).mean() + (b * 2.0).mean(),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@pytest.mark.parametrize("shape", SHAPES)
def test_elementwise_grads(name, shape):
    for seed in range(3):
        rng = np.random.default_rng(seed)
        a, b = rand(rng, *shape), rand(rng, *shape)
        assert grad_check(ELEMENTWISE[name], [a, b]) < 1e-5, (name, shape, seed)


def test_broadcast_bias_grad():
    rng = np.random.default_rng(12)
    x, b = rand(rng, 3, 4), rand(rng, 4)
    assert grad_check(lambda x, b: T.square(x + b).sum(), [x, b]) < 1e-7


def test_take_last_and_embedding_grads():
    rng = np.random.default_rng(13)
    x = rand(rng, 2, 3, 5)
    idx = rng.integers(0, 5, (2, 3))
    assert grad_check(lambda x: T.square(T.take_last(x, idx)).sum(), [x]) < 1e-7
    table = rand(rng, 6, 4)
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    assert grad_check(lambda t: T.square(T.embedding(t, ids)).sum(), [table]) < 1e-7
