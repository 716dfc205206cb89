"""Unit tests for the tensor engine: forward semantics and hand oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glt import optim
from glt import tensor as T
from glt.tensor import Tape, Tensor


def rand(shape, rng, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 2)))
        out = T.matmul(Tensor(np.eye(2, dtype=np.float32)), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_product(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(T.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both(self):
        a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3)))
        with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(a, b)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-7)

    def test_stability(self):
        out = T.softmax(Tensor(np.array([1000.0, 0.0])))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=5, max_size=5))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, vals):
        out = T.softmax(Tensor(np.array(vals))).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) < 1e-6


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(np.zeros(1))).data[0] == pytest.approx(0.5)

    def test_min_pairs(self):
        out = T.minimum(Tensor(np.array([0.2, 0.9])), Tensor(np.array([0.5, 0.1])))
        np.testing.assert_allclose(out.data, [0.2, 0.1])

    def test_minmax_match_scalar_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal(64), rng.standard_normal(64)
        lo = np.array([x if x < y else y for x, y in zip(a, b)])
        hi = np.array([x if x > y else y for x, y in zip(a, b)])
        assert np.array_equal(T.minimum(Tensor(a), Tensor(b)).data, lo)
        assert np.array_equal(T.maximum(Tensor(a), Tensor(b)).data, hi)

    def test_layer_norm_constant_row_gives_bias(self):
        gain = Tensor(np.full(5, 2.0))
        bias = Tensor(np.arange(5, dtype=np.float64))
        out = T.layer_norm(Tensor(np.full((3, 5), 7.0)), gain, bias)
        np.testing.assert_array_equal(out.data, np.tile(bias.data, (3, 1)))

    def test_add_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestCrossEntropy:
    def test_two_way_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros(2)), 0)
        assert loss.item() == pytest.approx(np.log(2), abs=1e-6)

    def test_confident(self):
        loss = T.cross_entropy(Tensor(np.array([10.0, -10.0])), 0)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros(3)), 5)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(1)
        logits = rand(7, rng)
        with Tape() as tape:
            loss = T.cross_entropy(logits, 4)
        tape.backward(loss)
        probs = np.exp(logits.data) / np.exp(logits.data).sum()
        expect = probs.copy()
        expect[4] -= 1.0
        np.testing.assert_allclose(logits.grad, expect, rtol=1e-10, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        rng = np.random.default_rng(2)
        x = rand((3, 4), rng)
        with Tape() as tape:
            loss = T.sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_disconnected_param_zero_grad(self):
        rng = np.random.default_rng(2)
        x, w = rand(4, rng), rand(4, rng)
        with Tape() as tape:
            loss = T.sum(x)
        tape.backward(loss, params=[x, w])
        np.testing.assert_array_equal(w.grad, np.zeros(4))

    def test_backward_twice_errors(self):
        x = rand(3, np.random.default_rng(0))
        with Tape() as tape:
            loss = T.sum(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="already called"):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = rand(3, np.random.default_rng(0))
        with Tape() as tape:
            y = T.mul(x, 2.0)
        with pytest.raises(T.DimensionError):
            tape.backward(y)

    def test_eval_mode_records_nothing(self):
        x = rand(3, np.random.default_rng(0))
        y = T.sigmoid(x)
        assert y.requires_grad is False

    def test_repeated_use_accumulates(self):
        x = rand(3, np.random.default_rng(5))
        with Tape() as tape:
            loss = T.sum(T.add(x, x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = optim.Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = optim.Adam({"p": p}, lr=0.05)
        p.grad = np.array([0.3, -1.7, 2.0])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.05, 0.05, -0.05], rtol=1e-5)

    def test_converges_on_quadratic(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        opt = optim.Adam({"w": w}, lr=0.1)
        for _ in range(100):
            w.grad = 2.0 * (w.data - 3.0)  # d/dw (w-3)^2
            opt.step()
        assert abs(w.data[0] - 3.0) < 0.1

    def test_clip_global_norm(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 10.0)
        pre = optim.clip_global_norm({"p": p}, 1.0)
        assert pre == pytest.approx(20.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-6)


class TestGatherOps:
    def test_embedding_lookup_and_scatter(self):
        table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
        ids = np.array([[0, 2], [2, 2]])
        with Tape() as tape:
            out = T.embedding(table, ids)
            loss = T.sum(out)
        assert out.shape == (2, 2, 3)
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad, [[1, 1, 1], [0, 0, 0], [3, 3, 3], [0, 0, 0]])

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding(Tensor(np.zeros((4, 3))), np.array([4]))

    def test_index_select_repeated_rows(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(3, 2), requires_grad=True)
        with Tape() as tape:
            out = T.index_select(x, np.array([1, 1, 0]))
            loss = T.sum(out)
        np.testing.assert_array_equal(out.data, [[2, 3], [2, 3], [0, 1]])
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[1, 1], [2, 2], [0, 0]])


class TestContract:
    def test_matches_einsum(self):
        rng = np.random.default_rng(7)
        a = rand((3, 4, 2), rng)
        b = rand((3, 4, 2, 5), rng)
        out = T.contract("skb,skbh->sbh", a, b)
        np.testing.assert_allclose(out.data, np.einsum("skb,skbh->sbh", a.data, b.data))

    def test_rejects_irreversible_spec(self):
        with pytest.raises(ValueError):
            T.contract("ij,jk->k", Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))
