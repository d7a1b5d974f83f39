from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diffwin import tensor as T
from diffwin import verify
from diffwin.tensor import NonFiniteError, ShapeError, Tape, Tensor, backward


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestTensorBasics:
    def test_float64_and_contiguous(self):
        t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3).T)
        assert t.data.dtype == np.float64
        assert t.data.flags.c_contiguous

    def test_rejects_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_result_names_the_op(self):
        with pytest.raises(NonFiniteError, match="scale"):
            T.scale(Tensor([1e308]), 10.0)

    def test_leaf_grad_only_when_requested(self):
        assert Tensor([1.0]).grad is None
        np.testing.assert_array_equal(leaf([1.0, 2.0]).grad, [0.0, 0.0])

    def test_operators(self):
        a, b = leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]])
        np.testing.assert_array_equal((a @ b).data, [[11.0]])
        np.testing.assert_array_equal((a * 2).data, [[2.0, 4.0]])
        np.testing.assert_array_equal((a + a).data, [[2.0, 4.0]])


class TestBackward:
    def test_needs_scalar(self):
        with pytest.raises(ShapeError):
            backward(leaf([1.0, 2.0]))

    def test_shared_subexpression_accumulates(self):
        x = leaf([3.0])
        y = T.mul(x, x)
        backward(T.sum_all(T.add(y, y)))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_grads_accumulate_across_calls(self):
        x = leaf([2.0])
        for _ in range(2):
            backward(T.sum_all(T.scale(x, 3.0)))
        np.testing.assert_allclose(x.grad, [6.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_untracked_inputs_get_no_grad(self):
        c = Tensor([1.0, 2.0])
        x = leaf([1.0, 1.0])
        backward(T.sum_all(T.mul(x, c)))
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])

    def test_tape_order(self):
        x = leaf([[1.0, 2.0]])
        out = T.sum_all(T.relu(T.scale(x, 2.0)))
        tape = Tape.from_output(out)
        assert tape.ops() == ["scale", "relu", "sum"]
        assert [t._node.op for t in tape] == ["sum", "relu", "scale"]


class TestOps:
    def test_matmul_shapes(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_shared_weight_matches_batched(self):
        rng = np.random.default_rng(0)
        a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(w)).data, a @ w, atol=1e-14)

    def test_add_rejects_general_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))

    def test_softmax_rows_sum_to_one(self):
        z = Tensor(np.random.default_rng(1).normal(scale=30, size=(4, 7)))
        np.testing.assert_allclose(T.softmax_rows(z).data.sum(-1), 1.0, atol=1e-12)

    def test_softmax_extreme_logits(self):
        out = T.softmax_rows(Tensor([[0.0, -1e9, 5.0]])).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out.sum(), 1.0)

    def test_cumsum_forward_and_reverse(self):
        x = Tensor([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(T.cumsum(x).data, [[1.0, 3.0, 6.0]])
        np.testing.assert_array_equal(T.cumsum(x, reverse=True).data, [[6.0, 5.0, 3.0]])

    def test_gather_last(self):
        x = Tensor([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(T.gather_last(x, np.array([2, 2, 0])).data, [[3.0, 3.0, 1.0]])

    def test_layer_norm_statistics(self):
        x = Tensor(np.random.default_rng(2).normal(3.0, 5.0, size=(4, 16)))
        y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-6)

    def test_cross_entropy_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((3, 5))), np.array([0, 1, 4]))
        assert loss.item() == pytest.approx(np.log(5))

    def test_cross_entropy_ignores_padding(self):
        z = np.random.default_rng(3).normal(size=(1, 3, 4))
        full = T.cross_entropy(Tensor(z[:, :2]), np.array([[1, 2]])).item()
        padded = T.cross_entropy(Tensor(z), np.array([[1, 2, 0]]), ignore_index=0).item()
        assert padded == pytest.approx(full, abs=1e-15)

    def test_cross_entropy_all_padding(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 0]), ignore_index=0)

    def test_masked_mean(self):
        a = Tensor(np.arange(12, dtype=float).reshape(1, 4, 3))
        keep = np.array([[1, 1, 0, 0]], dtype=bool)
        np.testing.assert_allclose(T.masked_mean(a, keep).data, [[1.5, 2.5, 3.5]])

    def test_dropout_inactive_without_rng(self):
        x = Tensor(np.ones(5))
        assert T.dropout(x, 0.5, None) is x

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                      elements=st.floats(-50, 50, allow_nan=False)))
    def test_softmax_is_shift_invariant(self, z):
        a = T.softmax_rows(Tensor(z)).data
        b = T.softmax_rows(Tensor(z + 7.5)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 8)),
                      elements=st.floats(-10, 10, allow_nan=False)))
    def test_reverse_cumsum_identity(self, x):
        fwd = T.cumsum(Tensor(x)).data
        back = T.cumsum(Tensor(x), reverse=True).data
        np.testing.assert_allclose(fwd + back - x, np.repeat(x.sum(-1, keepdims=True), x.shape[-1], -1), atol=1e-10)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(verify.OPS_UNITS))
    def test_unit(self, name):
        res = verify.run_unit(name, "ops", verify.OPS_UNITS[name], seed=3)
        assert res.max_error <= verify.OPS_TOL, res
