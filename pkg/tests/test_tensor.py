import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from c2crop import tensor as T
from c2crop.tensor import ShapeError, Tensor


def leaf(data):
    return Tensor(data, requires_grad=True)


def scalar_sum(x):
    out = x
    for _ in range(x.data.ndim):
        out = T.sum_axis(out, axis=0)
    return out


class TestElementwise:
    def test_add(self):
        assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_relu(self):
        assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_matmul_identity(self, rng):
        m = rng.normal(size=(3, 3))
        assert np.allclose(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner dims"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_scalar_broadcast(self):
        out = T.multiply(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(2.0))
        assert np.array_equal(out.data, [[2.0, 4.0], [6.0, 8.0]])

    def test_subtract_backward_sign(self):
        a, b = leaf([3.0]), leaf([1.0])
        T.backward(scalar_sum(T.subtract(a, b)))
        assert a.grad[0] == 1.0 and b.grad[0] == -1.0


class TestSoftmaxAndNorms:
    def test_uniform_input(self):
        out = T.softmax_axis(Tensor(np.full((4,), 1.7)), axis=0)
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_closed_form(self):
        out = T.softmax_axis(Tensor([0.0, np.log(3.0)]), axis=0)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_rows_sum_to_one(self, seed):
        x = np.random.default_rng(seed).normal(scale=10.0, size=(3, 5))
        out = T.softmax_axis(Tensor(x), axis=1)
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-12)

    def test_l2_normalize_example(self):
        out = T.l2_normalize_rows(Tensor([[3.0, 4.0]]))
        assert np.allclose(out.data, [[0.6, 0.8]], atol=1e-12)

    def test_l2_normalize_idempotent_on_unit(self, rng):
        v = rng.normal(size=(1, 4))
        v /= np.linalg.norm(v)
        out = T.l2_normalize_rows(Tensor(v))
        assert np.allclose(out.data, v, atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_l2_normalize_unit_norms(self, seed):
        x = np.random.default_rng(seed).normal(size=(4, 3)) + 0.1
        out = T.l2_normalize_rows(Tensor(x))
        assert np.all(np.abs(np.linalg.norm(out.data, axis=1) - 1.0) < 1e-12)

    def test_zero_row_guarded(self):
        out = T.l2_normalize_rows(Tensor([[0.0, 0.0]]))
        assert np.all(np.isfinite(out.data))

    def test_sigmoid_values(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        assert abs(T.sigmoid(Tensor(2.0)).item() - 1.0 / (1.0 + np.exp(-2.0))) < 1e-15

    def test_sigmoid_symmetry(self, rng):
        x = rng.normal(scale=3.0, size=10)
        total = T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data
        assert np.allclose(total, 1.0, atol=1e-12)

    def test_sigmoid_extreme_inputs_stable(self):
        out = T.sigmoid(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(out.data))


class TestReductionsAndShapes:
    def test_sum_axis_zeros(self):
        assert np.array_equal(T.sum_axis(Tensor(np.zeros((2, 3))), axis=0).data, np.zeros(3))

    def test_sum_axis_shape_contract(self, rng):
        x = Tensor(rng.normal(size=(5, 4, 6)))
        assert T.sum_axis(x, axis=1).shape == (5, 6)

    def test_sum_axis_hand_value(self):
        out = T.sum_axis(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0)
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_split_concat_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(2, 6)))
        parts = T.split(x, 3, axis=1)
        assert [p.shape for p in parts] == [(2, 2)] * 3
        back = T.concat(parts, axis=1)
        assert np.array_equal(back.data, x.data)

    def test_split_indivisible(self):
        with pytest.raises(ShapeError, match="divisible"):
            T.split(Tensor(np.ones((2, 5))), 2, axis=1)

    def test_reduce_mean_full_and_axis(self):
        x = Tensor([[1.0, 3.0], [5.0, 7.0]])
        assert T.reduce_mean(x).item() == 4.0
        assert np.array_equal(T.reduce_mean(x, axis=1).data, [2.0, 6.0])


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(3, 4, 4))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = T.conv2d(Tensor(x), Tensor(w))
        assert np.allclose(out.data, x, atol=1e-15)

    def test_1x1_single_channel_matches_summation(self, rng):
        x = rng.normal(size=(2, 2, 2))
        w = rng.normal(size=(1, 2, 1, 1))
        out = T.conv2d(Tensor(x), Tensor(w))
        expected = np.zeros((1, 2, 2))
        for h in range(2):
            for v in range(2):
                expected[0, h, v] = sum(w[0, c, 0, 0] * x[c, h, v] for c in range(2))
        assert np.allclose(out.data, expected, atol=1e-14)

    def test_3x3_ones_kernel_counts_neighbors(self):
        x = Tensor(np.ones((1, 4, 4)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1).data[0]
        assert out[0, 0] == 4.0  # corner
        assert out[0, 1] == 6.0  # edge
        assert out[1, 1] == 9.0  # interior

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))))

    def test_kernel_size_rejected(self):
        with pytest.raises(ShapeError, match="kernel"):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 2, 5, 5))))

    def test_batched_matches_per_sample(self, rng):
        xs = rng.normal(size=(3, 2, 6, 6))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        batched = T.conv2d(Tensor(xs), Tensor(w), Tensor(b), stride=2, padding=1)
        for i in range(3):
            single = T.conv2d(Tensor(xs[i]), Tensor(w), Tensor(b), stride=2, padding=1)
            assert np.allclose(batched.data[i], single.data, atol=1e-14)


class TestBackward:
    def test_linear_case(self, rng):
        x = rng.normal(size=5)
        w = leaf(np.zeros(5))
        T.backward(scalar_sum(T.multiply(w, Tensor(x))))
        assert np.allclose(w.grad, x)

    def test_sigmoid_at_zero(self):
        w = leaf(0.0)
        T.backward(T.sigmoid(w))
        assert abs(float(w.grad) - 0.25) < 1e-15

    def test_constant_loss_leaves_grad_empty(self):
        w = leaf([1.0, 2.0])
        T.backward(T.reduce_mean(Tensor([5.0])))
        assert w.grad is None  # derivative of a constant is zero

    def test_non_scalar_rejected(self):
        w = leaf([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.multiply(w, w))

    def test_grad_accumulates_across_graphs(self):
        w = leaf([1.0])
        T.backward(scalar_sum(T.scalar_multiply(w, 2.0)))
        T.backward(scalar_sum(T.scalar_multiply(w, 3.0)))
        assert w.grad[0] == 5.0
        w.zero_grad()
        assert w.grad is None

    def test_tape_replay_rejected(self):
        w = leaf([1.0])
        loss = scalar_sum(T.multiply(w, w))
        tape = T.Tape.from_root(loss)
        tape.backward()
        with pytest.raises(RuntimeError, match="already replayed"):
            tape.backward()

    def test_tape_visits_each_node_once(self):
        w = leaf([2.0])
        a = T.multiply(w, w)
        loss = scalar_sum(T.add(a, a))  # diamond: a used twice
        tape = T.Tape.from_root(loss)
        assert len(tape.nodes) == len({id(n) for n in tape.nodes})
        tape.backward()
        assert w.grad[0] == pytest.approx(8.0)  # d(2w^2)/dw = 4w

    def test_shared_subexpression_gradient(self):
        x = leaf([3.0])
        y = T.multiply(x, x)
        loss = scalar_sum(T.add(T.multiply(y, Tensor([2.0])), y))
        T.backward(loss)
        assert x.grad[0] == pytest.approx(18.0)  # d(3x^2)/dx

    def test_bit_reproducible(self, tiny_enc, rng):
        from c2crop.model import init_params, model_forward

        imgs = rng.uniform(size=(2, 3, 32, 32))

        def run():
            params = init_params(tiny_enc, seed=11)
            preds, _ = model_forward(Tensor(imgs), params, tiny_enc)
            T.backward(T.reduce_mean(preds))
            return preds.data.copy(), {k: p.grad.copy() for k, p in params.items()}

        p1, g1 = run()
        p2, g2 = run()
        assert np.array_equal(p1, p2)
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)


class TestGradCheck:
    def test_quadratic(self, rng):
        w = leaf(rng.normal(size=4))
        err = T.grad_check(lambda: scalar_sum(T.multiply(w, w)), [w])
        assert err < 1e-9

    def test_constant_function_zero_error(self):
        w = leaf([1.0, 2.0])
        err = T.grad_check(lambda: Tensor(3.0), [w])
        assert err == 0.0

    def test_wrong_backward_detected(self, rng):
        x = leaf(rng.uniform(0.5, 1.5, size=(3, 3)))
        k = Tensor(rng.normal(size=(3, 3)))

        def broken_square(t):
            def backward(g):
                if t.requires_grad:
                    t._accum(g * 3.0 * t.data)  # wrong: should be 2x

            return T._node(t.data**2, (t,), backward)

        err = T.grad_check(lambda: scalar_sum(T.multiply(broken_square(x), k)), [x])
        assert err > 1e-2

    def test_every_registered_op_passes(self):
        from c2crop.gradcheck import OP_CASES, run_suite

        assert set(OP_CASES) == set(T.REGISTERED_OPS)
        results = run_suite()
        names = [r.name for r in results]
        assert len(names) == len(set(names))
        for r in results:
            assert r.passed, f"{r.name}: {r.error:.3e} >= {r.tolerance}"


class TestNoGrad:
    def test_no_graph_recorded(self):
        w = leaf([1.0])
        with T.no_grad():
            out = T.multiply(w, w)
        assert not out.requires_grad
        assert out._backward is None

    def test_forward_values_unchanged(self, rng):
        x = rng.normal(size=(3, 3))
        w = leaf(x)
        with T.no_grad():
            a = T.softmax_axis(w, axis=1).data
        b = T.softmax_axis(w, axis=1).data
        assert np.array_equal(a, b)
