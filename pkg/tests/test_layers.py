import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from des.gradcheck import finite_difference_check
from des.layers import (
    Conv2d,
    ConvSpec,
    Linear,
    conv2d,
    conv_out_extent,
    huber,
    linear,
    log_softmax_rows,
    maxpool2,
    relu,
    sigmoid,
    smooth_l1,
    softmax_channels,
    softmax_cross_entropy,
    xavier_uniform,
)
from des.tensor import ShapeError, Tensor, backward, mul, reduce_sum


def conv_oracle(x, w, b, stride=1, padding=0, dilation=1):
    """Naive quadruple-loop cross-correlation, the independent reference."""
    o, c, kh, kw = w.shape
    h, wd = x.shape[1:]
    ho = conv_out_extent(h, kh, stride, padding, dilation)
    wo = conv_out_extent(wd, kw, stride, padding, dilation)
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            yy = i * stride - padding + ki * dilation
                            xx = j * stride - padding + kj * dilation
                            if 0 <= yy < h and 0 <= xx < wd:
                                acc += w[oc, ic, ki, kj] * x[ic, yy, xx]
                out[oc, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 6, 6))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), padding=1)
        npt.assert_array_equal(out.data, x)

    def test_dilation2_hand_count(self):
        # all-ones kernel over all-ones 5x5 input, dilation 2, pad 2: the
        # center tap sees all 9 dilated positions, corners only 4
        x = np.ones((1, 5, 5))
        w = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)),
                     padding=2, dilation=2).data
        assert out.shape == (1, 5, 5)
        assert out[0, 2, 2] == 9.0
        assert out[0, 0, 0] == 4.0
        npt.assert_allclose(out, conv_oracle(x, w, np.zeros(1), padding=2, dilation=2),
                            atol=1e-12)

    @pytest.mark.parametrize("dilation", [1, 2, 4])
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 1)])
    def test_matches_quadruple_loop_oracle(self, dilation, stride, padding):
        rng = np.random.default_rng(dilation * 10 + stride)
        if conv_out_extent(8, 3, stride, padding, dilation) < 1:
            pytest.skip("degenerate geometry")
        x = rng.normal(size=(4, 8, 8))
        w = rng.normal(size=(3, 4, 3, 3))
        b = rng.normal(size=3)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b),
                     stride=stride, padding=padding, dilation=dilation).data
        want = conv_oracle(x, w, b, stride=stride, padding=padding, dilation=dilation)
        npt.assert_allclose(got, want, atol=1e-10)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(5)
        xs = rng.normal(size=(3, 2, 6, 6))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        batched = conv2d(Tensor(xs), Tensor(w), Tensor(b), padding=1).data
        for i in range(3):
            single = conv2d(Tensor(xs[i]), Tensor(w), Tensor(b), padding=1).data
            # GEMM partitioning differs between the two shapes: ulp-level only
            npt.assert_allclose(batched[i], single, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
                   Tensor(np.zeros(1)))

    def test_degenerate_extent_rejected(self):
        with pytest.raises(ShapeError, match="degenerate"):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))),
                   Tensor(np.zeros(1)), dilation=4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(5, 12), st.sampled_from([1, 2, 4]))
    def test_padding_equal_dilation_preserves_extent(self, extent, dilation):
        x = np.zeros((1, extent, extent))
        w = np.zeros((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)),
                     padding=dilation, dilation=dilation)
        assert out.shape == (1, extent, extent)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="dilation"):
            ConvSpec(1, 1, dilation=3)
        with pytest.raises(ValueError, match="kernel"):
            ConvSpec(1, 1, kernel=5)
        spec = ConvSpec(2, 3, kernel=3, stride=1, padding=2, dilation=2)
        assert spec.out_extent(10) == 10

    def test_layer_owns_xavier_weights(self):
        rng = np.random.default_rng(0)
        layer = Conv2d(ConvSpec(4, 8, kernel=3, padding=1), rng)
        bound = np.sqrt(6.0 / (4 * 9 + 8 * 9))
        assert np.abs(layer.weight.data).max() <= bound
        npt.assert_array_equal(layer.bias.data, np.zeros(8))


class TestActivations:
    def test_relu_values(self):
        out = relu(Tensor([-2.0, 0.0, 3.0]))
        npt.assert_array_equal(out.data, [0.0, 0.0, 3.0])

    def test_relu_idempotent(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(50,)))
        once = relu(x).data
        twice = relu(relu(x)).data
        npt.assert_array_equal(once, twice)

    def test_sigmoid_symmetry_point(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_plus_reflection_is_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=200) * 8
        s = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
        npt.assert_allclose(s, 1.0, atol=1e-12)

    def test_sigmoid_strictly_monotone(self):
        x = np.sort(np.random.default_rng(3).normal(size=300) * 5)
        y = sigmoid(Tensor(x)).data
        assert (np.diff(y) > 0).all()

    def test_sigmoid_range(self):
        y = sigmoid(Tensor(np.array([-30.0, 30.0]))).data
        assert 0 < y[0] < 1 and 0 < y[1] < 1


class TestSoftmaxChannels:
    def test_zero_logits_uniform(self):
        out = softmax_channels(Tensor(np.zeros((3, 2, 2)))).data
        npt.assert_allclose(out, 1.0 / 3.0, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 3, 3))
        shift = rng.normal(size=(1, 3, 3))
        a = softmax_channels(Tensor(x)).data
        b = softmax_channels(Tensor(x + shift)).data
        npt.assert_allclose(a, b, atol=1e-12)

    def test_sums_to_one_and_positive(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(21, 4, 4)) * 10
        out = softmax_channels(Tensor(x)).data
        npt.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)
        assert (out > 0).all()

    def test_needs_two_channels(self):
        with pytest.raises(ShapeError):
            softmax_channels(Tensor(np.zeros((1, 2, 2))))


class TestMaxpool:
    def test_tiny(self):
        out = maxpool2(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        npt.assert_array_equal(out.data, [[[4.0]]])

    def test_constant_field(self):
        out = maxpool2(Tensor(np.full((2, 4, 4), 5.0)))
        npt.assert_array_equal(out.data, np.full((2, 2, 2), 5.0))

    def test_matches_window_loop_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 8, 8))
        got = maxpool2(Tensor(x)).data
        want = np.zeros((3, 4, 4))
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    want[c, i, j] = x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
        npt.assert_array_equal(got, want)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2(Tensor(np.zeros((1, 5, 4))))

    def test_gradient_routes_to_argmax(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
        backward(reduce_sum(maxpool2(x)))
        npt.assert_array_equal(x.grad, [[[0, 0], [0, 1]]])


class TestLosses:
    def test_smooth_l1_branch_values(self):
        z = Tensor(np.zeros(1))
        assert smooth_l1(z, z).item() == 0.0
        assert smooth_l1(Tensor([1.0]), Tensor([0.0])).item() == 0.5
        assert smooth_l1(Tensor([2.0]), Tensor([0.0])).item() == 1.5

    def test_smooth_l1_matches_formula_oracle(self):
        rng = np.random.default_rng(9)
        p = rng.normal(size=(5, 4)) * 2
        t = rng.normal(size=(5, 4)) * 2
        got = smooth_l1(Tensor(p), Tensor(t)).item()
        want = 0.0
        for i in range(5):
            for j in range(4):
                d = p[i, j] - t[i, j]
                want += 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5
        npt.assert_allclose(got, want, atol=1e-12)

    def test_smooth_l1_shape_mismatch(self):
        with pytest.raises(ShapeError):
            smooth_l1(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_log_softmax_rows_matches_manual(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(4, 6)) * 3
        got = log_softmax_rows(Tensor(x)).data
        want = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
        npt.assert_allclose(got, want, atol=1e-12)

    def test_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((3, 7)))
        ce = softmax_cross_entropy(logits, [0, 3, 6]).data
        npt.assert_allclose(ce, np.log(7), atol=1e-12)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ShapeError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestLinear:
    def test_matches_manual_affine(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 4))
        layer = Linear(4, 3, rng)
        got = layer(Tensor(x)).data
        want = x @ layer.weight.data.T + layer.bias.data
        npt.assert_allclose(got, want, atol=1e-12)

    def test_vector_input(self):
        rng = np.random.default_rng(12)
        layer = Linear(4, 2, rng)
        x = rng.normal(size=4)
        npt.assert_allclose(layer(Tensor(x)).data,
                            layer.weight.data @ x + layer.bias.data, atol=1e-12)


class TestLayerGradients:
    """Spot finite-difference checks; the full battery lives in gradsuite."""

    def test_conv_fd(self):
        rng = np.random.default_rng(21)
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        probe = rng.normal(size=(2, 6, 6))
        err = finite_difference_check(
            lambda t: reduce_sum(mul(conv2d(t, Tensor(w), Tensor(b),
                                            padding=2, dilation=2), probe)),
            rng.normal(size=(3, 6, 6)))
        assert err < 1e-4

    def test_maxpool_fd_on_separated_values(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(2, 4, 4)) * 10  # gaps >> eps, argmax stable
        probe = rng.normal(size=(2, 2, 2))
        err = finite_difference_check(
            lambda t: reduce_sum(mul(maxpool2(t), probe)), x)
        assert err < 1e-4

    def test_softmax_channels_fd(self):
        rng = np.random.default_rng(23)
        probe = rng.normal(size=(4, 3, 3))
        err = finite_difference_check(
            lambda t: reduce_sum(mul(softmax_channels(t), probe)),
            rng.normal(size=(4, 3, 3)))
        assert err < 1e-4

    def test_huber_fd_off_kink(self):
        rng = np.random.default_rng(24)
        t0 = rng.normal(size=(3, 3))
        pred = t0 + np.where(rng.random((3, 3)) < 0.5, 0.4, 1.7)
        err = finite_difference_check(
            lambda t: reduce_sum(huber(t, Tensor(t0))), pred)
        assert err < 1e-4


def test_xavier_uniform_bounds():
    rng = np.random.default_rng(0)
    w = xavier_uniform(rng, (100, 100), 100, 100)
    bound = np.sqrt(6.0 / 200)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > bound * 0.9  # actually fills the range
