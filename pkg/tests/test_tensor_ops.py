"""Tensor container, gradient tape, and the differentiable op set."""

import threading
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbot import ops
from fedbot.errors import ContractError, ShapeError
from fedbot.tensor import GradGraph, Tensor
from fedbot.weights import ModelWeights


class TestTensor:
    def test_defaults_to_float32(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float32
        assert t.shape == (3,)

    def test_float64_input_keeps_dtype(self):
        t = Tensor(np.zeros((2, 2), dtype=np.float64))
        assert t.dtype == np.float64

    def test_explicit_dtype_wins(self):
        t = Tensor(np.zeros(3, dtype=np.float64), dtype=np.float32)
        assert t.dtype == np.float32

    def test_rejects_non_float_dtype(self):
        with pytest.raises(ContractError):
            Tensor([1, 2], dtype=np.int64)

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_constructor_copies(self):
        arr = np.ones(3, dtype=np.float32)
        t = Tensor(arr)
        arr[0] = 9.0
        assert t.data[0] == 1.0

    def test_scalar_becomes_shape_1(self):
        t = Tensor(np.float32(4.0))
        assert t.shape == (1,)
        assert t.item() == 4.0

    def test_zero_dim_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_item_requires_single_element(self):
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_wrap_shares_memory(self):
        arr = np.ones((2, 2), dtype=np.float32)
        t = Tensor._wrap(arr)
        assert t.data is arr
        assert not arr.flags.writeable


class TestGradGraph:
    def test_requires_scalar_loss(self):
        with GradGraph() as g:
            y = ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        with pytest.raises(ContractError):
            g.backward(y)

    def test_simple_chain(self):
        x = Tensor([2.0], name="x")
        with GradGraph() as g:
            y = ops.mul(x, x)       # y = x^2
            z = ops.scale(y, 3.0)   # z = 3 x^2, dz/dx = 6x = 12
            grads = g.backward(z)
        assert grads["x"].item() == pytest.approx(12.0)

    def test_accumulates_reused_tensor(self):
        x = Tensor([1.0, 2.0], name="x")
        with GradGraph() as g:
            z = ops.sum_all(ops.add(x, x))
            grads = g.backward(z)
        np.testing.assert_allclose(grads["x"].data, [2.0, 2.0])

    def test_no_recording_outside_context(self):
        g = GradGraph()
        ops.add(Tensor([1.0]), Tensor([2.0]))
        assert g.nodes == []

    def test_thread_isolation(self):
        seen = {}

        def worker():
            seen["inner"] = GradGraph.current()

        with GradGraph():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["inner"] is None

    def test_grad_of_intermediate(self):
        x = Tensor([3.0], name="x")
        with GradGraph() as g:
            y = ops.mul(x, x)
            z = ops.scale(y, 2.0)
            g.backward(z)
        assert g.grad_of(y).item() == pytest.approx(2.0)


class TestElementwise:
    def test_add_broadcast_unbroadcast(self):
        a = Tensor(np.ones((2, 3)), name="a")
        b = Tensor(np.ones((3,)), name="b")
        with GradGraph() as g:
            out = ops.sum_all(ops.add(a, b))
            grads = g.backward(out)
        assert grads["a"].shape == (2, 3)
        assert grads["b"].shape == (3,)
        np.testing.assert_allclose(grads["b"].data, [2.0, 2.0, 2.0])

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.ones(2, dtype=np.float64))
        with pytest.raises(ContractError):
            ops.add(a, b)

    def test_relu_gradient_zero_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], name="x")
        with GradGraph() as g:
            grads = g.backward(ops.sum_all(ops.relu(x)))
        np.testing.assert_allclose(grads["x"].data, [0.0, 0.0, 1.0])

    def test_sub_and_neg(self):
        a = Tensor([5.0], name="a")
        b = Tensor([3.0], name="b")
        with GradGraph() as g:
            grads = g.backward(ops.sub(a, b))
        assert grads["a"].item() == 1.0
        assert grads["b"].item() == -1.0


class TestMatmul:
    def test_batched_forward(self):
        a = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
        b = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
        out = ops.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b)

    def test_shared_rhs_forward(self):
        a = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
        b = np.arange(6, dtype=np.float32).reshape(3, 2)
        out = ops.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b)

    def test_shared_rhs_backward_matches_fd(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(2, 3, 4)), name="a")
        b = Tensor(rng.normal(size=(4, 2)), name="b")
        with GradGraph() as g:
            grads = g.backward(ops.sum_all(ops.matmul(a, b)))
        step = 1e-6
        for tensor, grad in ((a, grads["a"]), (b, grads["b"])):
            idx = (0,) * tensor.ndim
            bumped = tensor.data.copy()
            bumped[idx] += step
            plus = Tensor(bumped, name=tensor.name)
            pair = (plus, b) if tensor is a else (a, plus)
            f1 = ops.sum_all(ops.matmul(*pair)).item()
            f0 = ops.sum_all(ops.matmul(a, b)).item()
            assert (f1 - f0) / step == pytest.approx(grad.data[idx], rel=1e-4)

    def test_incompatible_shapes_name_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


class TestSoftmaxAndNorm:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_softmax_rows_sum_to_one(self, rows, cols, seed):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
        y = ops.softmax(Tensor(x, dtype=np.float64))
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=1e-12)
        assert (y.data >= 0).all()

    def test_softmax_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0]])
        a = ops.softmax(Tensor(x, dtype=np.float64)).data
        b = ops.softmax(Tensor(x + 1000.0, dtype=np.float64)).data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_softmax_gradient_orthogonal_to_ones(self):
        # rows of the softmax jacobian sum to zero
        x = Tensor(np.random.default_rng(1).normal(size=(3, 5)), name="x")
        with GradGraph() as g:
            y = ops.softmax(x)
            grads = g.backward(ops.sum_all(ops.mul(y, y)))
        np.testing.assert_allclose(grads["x"].data.sum(axis=-1), 0.0, atol=1e-6)

    def test_layer_norm_standardizes(self):
        x = np.random.default_rng(2).normal(loc=3.0, scale=2.0, size=(4, 8))
        gain = Tensor(np.ones(8, dtype=np.float64))
        bias = Tensor(np.zeros(8, dtype=np.float64))
        y = ops.layer_norm(Tensor(x, dtype=np.float64), gain, bias).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-5)

    def test_layer_norm_eps_positive(self):
        x = Tensor(np.ones((2, 4)))
        one = Tensor(np.ones(4))
        zero = Tensor(np.zeros(4))
        with pytest.raises(ContractError):
            ops.layer_norm(x, one, zero, eps=0.0)

    def test_layer_norm_gradcheck(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 6)), name="x")
        gain = Tensor(rng.normal(size=6), name="g")
        bias = Tensor(rng.normal(size=6), name="b")

        def loss_of(xa, ga, ba):
            out = ops.layer_norm(Tensor(xa), Tensor(ga), Tensor(ba))
            return ops.sum_all(ops.mul(out, out)).item()

        with GradGraph() as g:
            out = ops.layer_norm(x, gain, bias)
            grads = g.backward(ops.sum_all(ops.mul(out, out)))
        step = 1e-6
        for name, base in (("x", x), ("g", gain), ("b", bias)):
            arrs = {"x": x.data.copy(), "g": gain.data.copy(), "b": bias.data.copy()}
            idx = (0,) * base.ndim
            arrs[name][idx] += step
            fd = (loss_of(arrs["x"], arrs["g"], arrs["b"])
                  - loss_of(x.data, gain.data, bias.data)) / step
            assert fd == pytest.approx(grads[name].data[idx], rel=1e-3, abs=1e-6)


class TestEmbeddingDropoutMask:
    def test_embedding_lookup_and_grad(self):
        table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), name="emb")
        ids = np.array([[0, 2, 2]])
        with GradGraph() as g:
            out = ops.embedding(table, ids)
            grads = g.backward(ops.sum_all(out))
        np.testing.assert_allclose(out.data[0, 1], [6.0, 7.0, 8.0])
        # row 2 used twice, row 1 never
        np.testing.assert_allclose(grads["emb"].data[:, 0], [1.0, 0.0, 2.0, 0.0])

    def test_embedding_range_check(self):
        table = Tensor(np.zeros((4, 3)))
        with pytest.raises(IndexError):
            ops.embedding(table, np.array([[4]]))
        with pytest.raises(IndexError):
            ops.embedding(table, np.array([[-1]]))

    def test_dropout_identity_at_zero_rate(self):
        x = Tensor(np.ones(5))
        assert ops.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_rate_one_rejected(self):
        with pytest.raises(ContractError):
            ops.dropout(Tensor(np.ones(5)), 1.0, np.random.default_rng(0))

    def test_dropout_scales_survivors(self):
        x = Tensor(np.ones((100, 100)))
        y = ops.dropout(x, 0.25, np.random.default_rng(0))
        kept = y.data[y.data > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert kept.size / y.size == pytest.approx(0.75, abs=0.02)

    def test_masked_fill(self):
        x = Tensor(np.ones((2, 2)), name="x")
        keep = np.array([[True, False], [False, True]])
        with GradGraph() as g:
            y = ops.masked_fill(x, keep, -np.inf)
            grads = g.backward(ops.sum_all(ops.relu(y)))
        assert np.isneginf(y.data[0, 1])
        np.testing.assert_allclose(grads["x"].data, keep.astype(np.float32))


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        logits = Tensor(np.zeros((1, 4, 10), dtype=np.float64))
        targets = np.zeros((1, 4), dtype=np.int64)
        mask = np.ones((1, 4), dtype=bool)
        loss = ops.cross_entropy(logits, targets, mask)
        assert loss.item() == pytest.approx(np.log(10.0), rel=1e-12)

    def test_masked_positions_excluded(self):
        logits = np.zeros((1, 2, 4), dtype=np.float64)
        logits[0, 1, 0] = 100.0  # would dominate if included
        mask = np.array([[True, False]])
        targets = np.array([[1, 1]], dtype=np.int64)
        loss = ops.cross_entropy(Tensor(logits), targets, mask)
        assert loss.item() == pytest.approx(np.log(4.0), rel=1e-12)

    def test_all_masked_warns_and_zero(self):
        logits = Tensor(np.zeros((1, 2, 4)))
        targets = np.zeros((1, 2), dtype=np.int64)
        with pytest.warns(UserWarning):
            loss = ops.cross_entropy(logits, targets, np.zeros((1, 2), dtype=bool))
        assert loss.item() == 0.0

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(4)
        raw = rng.normal(size=(1, 3, 5))
        logits = Tensor(raw, name="logits")
        targets = np.array([[1, 4, 2]], dtype=np.int64)
        mask = np.array([[True, True, False]])
        with GradGraph() as g:
            grads = g.backward(ops.cross_entropy(logits, targets, mask))
        probs = np.exp(raw) / np.exp(raw).sum(-1, keepdims=True)
        expected = probs.copy()
        expected[0, 0, 1] -= 1.0
        expected[0, 1, 4] -= 1.0
        expected[0, 2, :] = 0.0
        expected /= 2.0  # mean over the two included positions
        np.testing.assert_allclose(grads["logits"].data, expected, rtol=1e-6)


class TestOptimizers:
    def _weights(self):
        return ModelWeights([
            ("a", Tensor(np.array([1.0, 2.0], dtype=np.float32), name="a")),
            ("b", Tensor(np.array([[3.0]], dtype=np.float32), name="b")),
        ])

    def _grads(self):
        return {
            "a": Tensor(np.array([0.5, -1.0], dtype=np.float32)),
            "b": Tensor(np.array([[2.0]], dtype=np.float32)),
        }

    def test_sgd_step_formula(self):
        new = ops.sgd_step(self._weights(), self._grads(), lr=0.1)
        np.testing.assert_allclose(new["a"].data, [0.95, 2.1], rtol=1e-6)
        np.testing.assert_allclose(new["b"].data, [[2.8]], rtol=1e-6)

    def test_sgd_missing_grad_rejected(self):
        with pytest.raises(ContractError, match="b"):
            ops.sgd_step(self._weights(), {"a": self._grads()["a"]}, lr=0.1)

    def test_adam_first_step_is_scaled_sign(self):
        # with bias correction, step one moves by ~lr * sign(g)
        state, new = ops.adam_step(None, self._weights(), self._grads(), lr=0.01)
        assert state.step == 1
        np.testing.assert_allclose(
            new["a"].data, [1.0 - 0.01, 2.0 + 0.01], rtol=1e-4)
        np.testing.assert_allclose(new["b"].data, [[3.0 - 0.01]], rtol=1e-4)

    def test_adam_state_advances(self):
        w = self._weights()
        state, w = ops.adam_step(None, w, self._grads(), lr=0.01)
        state2, w = ops.adam_step(state, w, self._grads(), lr=0.01)
        assert state2.step == 2
        assert state.m["a"] is not state2.m["a"]

    def test_adam_matches_reference_two_steps(self):
        # independent float64 reference of the update rule
        g = np.array([0.5, -1.0], dtype=np.float64)
        w_ref = np.array([1.0, 2.0], dtype=np.float64)
        m = v = np.zeros_like(w_ref)
        lr, b1, b2, eps = 0.01, 0.9, 0.98, 1e-9
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            w_ref = w_ref - lr * m_hat / (np.sqrt(v_hat) + eps)
        state = None
        w = self._weights()
        for _ in range(2):
            state, w = ops.adam_step(state, w, self._grads(), lr=lr)
        np.testing.assert_allclose(w["a"].data, w_ref, rtol=1e-5)


class TestModelWeights:
    def test_duplicate_name_rejected(self):
        t = Tensor([1.0])
        with pytest.raises(ContractError):
            ModelWeights([("a", t), ("a", t)])

    def test_rewraps_names(self):
        w = ModelWeights([("a", Tensor([1.0], name="other"))])
        assert w["a"].name == "a"

    def test_bit_equal_and_allclose(self):
        w1 = ModelWeights([("a", Tensor([1.0, 2.0], name="a"))])
        w2 = ModelWeights([("a", Tensor([1.0, 2.0], name="a"))])
        w3 = ModelWeights([("a", Tensor([1.0, 2.0 + 1e-5], name="a"))])
        assert w1.bit_equal(w2)
        assert not w1.bit_equal(w3)
        assert w1.allclose(w3, rtol=1e-5)

    def test_total_scalars(self):
        w = ModelWeights([
            ("a", Tensor(np.zeros((2, 3)), name="a")),
            ("b", Tensor(np.zeros(5), name="b")),
        ])
        assert w.total_scalars() == 11

    def test_astype_round_trip(self):
        w = ModelWeights([("a", Tensor(np.float32([1.5, 2.5]), name="a"))])
        w64 = w.astype(np.float64)
        assert w64.dtype == np.float64
        assert w64.astype(np.float32).bit_equal(w)
