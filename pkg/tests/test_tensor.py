import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from des.tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    exp,
    find_first_nonfinite,
    index_rows,
    log,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    reshape,
    take_channel_per_pixel,
    take_per_row,
    transpose,
)


class TestElementwiseMul:
    def test_multiplicative_identity(self):
        out = mul(Tensor([2.0, 3.0]), Tensor([1.0, 1.0]))
        npt.assert_array_equal(out.data, [2.0, 3.0])

    def test_annihilator(self):
        out = mul(Tensor([2.0, 3.0]), Tensor([0.0, 0.0]))
        npt.assert_array_equal(out.data, [0.0, 0.0])

    def test_per_channel_broadcast_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(4, 5, 5))
        b = rng.normal(size=(4, 1, 1))
        out = mul(Tensor(a), Tensor(b)).data
        expected = np.empty_like(a)
        for c in range(4):
            for i in range(5):
                for j in range(5):
                    expected[c, i, j] = a[c, i, j] * b[c, 0, 0]
        npt.assert_array_equal(out, expected)

    def test_scalar_broadcast(self):
        out = mul(Tensor([[1.0, 2.0]]), 3.0)
        npt.assert_array_equal(out.data, [[3.0, 6.0]])

    def test_rejects_illegal_broadcast(self):
        with pytest.raises(ShapeError):
            mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            mul(Tensor(np.zeros((4, 5, 5))), Tensor(np.zeros((4, 5))))

    def test_product_rule_gradients(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(4, 5, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 1, 1)), requires_grad=True)
        up = rng.normal(size=(4, 5, 5))
        out = reduce_sum(mul(mul(a, b), Tensor(up)))
        backward(out)
        npt.assert_allclose(a.grad, up * b.data, rtol=0, atol=0)
        npt.assert_allclose(b.grad, (up * a.data).sum(axis=(1, 2), keepdims=True),
                            rtol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    def test_output_shape_is_function_of_input_shapes(self, c, h, w):
        a = Tensor(np.ones((c, h, w)))
        assert mul(a, Tensor(np.ones((c, 1, 1)))).shape == (c, h, w)
        assert mul(a, Tensor(np.ones((c, h, w)))).shape == (c, h, w)
        assert add(a, 2.0).shape == (c, h, w)


class TestReduce:
    def test_mean_constant_field(self):
        out = reduce_mean(Tensor(np.full((3, 4, 4), 7.0)), axes=(1, 2))
        npt.assert_array_equal(out.data, [7.0, 7.0, 7.0])

    def test_mean_small_arithmetic(self):
        out = reduce_mean(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), axes=(1, 2))
        npt.assert_array_equal(out.data, [2.5])

    def test_mean_matches_summation_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(8, 6, 6))
        out = reduce_mean(Tensor(x), axes=(1, 2)).data
        expected = np.zeros(8)
        for c in range(8):
            acc = 0.0
            for i in range(6):
                for j in range(6):
                    acc += x[c, i, j]
            expected[c] = acc / 36.0
        npt.assert_allclose(out, expected, atol=1e-12)

    def test_mean_rejects_empty_extent(self):
        with pytest.raises(ShapeError):
            reduce_mean(Tensor(np.zeros((3, 0, 4))), axes=(1,))

    def test_mean_times_count_equals_sum(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 7, 5)))
        m = reduce_mean(x, axes=(1, 2)).data * 35.0
        s = reduce_sum(x, axes=(1, 2)).data
        npt.assert_allclose(m, s, atol=1e-12)

    def test_grad_shapes_match_values(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        out = reduce_mean(x, axes=1)
        backward(reduce_sum(out))
        assert x.grad.shape == x.shape


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        backward(reduce_sum(x))
        npt.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_quadratic_derivative(self):
        x = Tensor([3.0], requires_grad=True)
        backward(reduce_sum(mul(x, x)))
        npt.assert_array_equal(x.grad, [6.0])

    def test_fanout_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(reduce_sum(add(x, x)))
        npt.assert_array_equal(x.grad, [2.0, 2.0])

    def test_unreachable_param_gets_zero_grad(self):
        x = Tensor([1.0], requires_grad=True)
        orphan = Tensor([5.0], requires_grad=True)
        backward(reduce_sum(mul(x, 2.0)), params=[x, orphan])
        npt.assert_array_equal(orphan.grad, [0.0])

    def test_rejects_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(mul(x, x))

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert y._vjp is None and not y.requires_grad

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
            y = reduce_sum(mul(exp(mul(x, 0.1)), x))
            backward(y)
            return y.data.copy(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1.tobytes() == v2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestGatherOps:
    def test_index_rows_scatter_adds(self):
        x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        idx = np.array([1, 1, 3])
        out = index_rows(x, idx)
        npt.assert_array_equal(out.data, x.data[idx])
        backward(reduce_sum(out))
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        npt.assert_array_equal(x.grad, expected)

    def test_take_per_row(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = take_per_row(x, [2, 0])
        npt.assert_array_equal(out.data, [2.0, 3.0])
        backward(reduce_sum(out))
        npt.assert_array_equal(x.grad, [[0, 0, 1], [1, 0, 0]])

    def test_take_channel_per_pixel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
        labels = np.array([[0, 2], [1, 1]])
        out = take_channel_per_pixel(x, labels)
        for h in range(2):
            for w in range(2):
                assert out.data[h, w] == x.data[labels[h, w], h, w]
        backward(reduce_sum(out))
        assert x.grad.sum() == 4.0

    def test_take_channel_label_out_of_range(self):
        with pytest.raises(ShapeError):
            take_channel_per_pixel(Tensor(np.zeros((2, 2, 2))),
                                   np.array([[0, 2], [0, 0]]))


class TestShapeSurgery:
    def test_transpose_roundtrip_gradient(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        out = transpose(x, (2, 0, 1))
        assert out.shape == (4, 2, 3)
        probe = np.random.default_rng(1).normal(size=(4, 2, 3))
        backward(reduce_sum(mul(out, Tensor(probe))))
        npt.assert_array_equal(x.grad, probe.transpose(1, 2, 0))

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((4, 3)), requires_grad=True)
        out = concat([a, b], axis=0)
        assert out.shape == (6, 3)
        w = np.arange(18.0).reshape(6, 3)
        backward(reduce_sum(mul(out, Tensor(w))))
        npt.assert_array_equal(a.grad, w[:2])
        npt.assert_array_equal(b.grad, w[2:])

    def test_reshape_gradient(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        out = reshape(x, (2, 3))
        backward(reduce_sum(mul(out, out)))
        npt.assert_array_equal(x.grad, 2 * x.data)

    def test_log_exp_inverse(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.5, 2.0, size=(3, 3))
        npt.assert_allclose(exp(log(Tensor(x))).data, x, atol=1e-12)


class TestFiniteness:
    def test_forward_ops_stay_finite(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(4, 6, 6)) * 100)
        for out in (mul(x, x), add(x, x), reduce_mean(x), reduce_sum(x),
                    transpose(x, (1, 2, 0)), exp(mul(x, 0.01))):
            assert np.isfinite(out.data).all()

    def test_find_first_nonfinite_walks_inputs_first(self):
        bad = Tensor([np.inf, 1.0], requires_grad=True)
        bad.name = "poison"
        y = reduce_sum(mul(bad, 2.0))
        found = find_first_nonfinite(y)
        assert found is bad

    def test_find_first_nonfinite_none_when_clean(self):
        x = Tensor([1.0, 2.0])
        assert find_first_nonfinite(reduce_sum(x)) is None
