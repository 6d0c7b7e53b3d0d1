import math

import numpy as np
import pytest

from errmap.autograd import (
    Tensor,
    absolute,
    add,
    backward,
    concat_channels,
    conv2d,
    div,
    finite_diff_gradcheck,
    log,
    masked_mse,
    mul,
    relu,
    scalar,
    softplus,
    square,
    stop_gradient,
    sub,
    transpose_conv2d,
    tsum,
)


def conv_oracle(x, w, b, stride, pad):
    """Nested-loop cross-correlation, independent of the im2col path."""
    bs, ic, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((bs, oc, oh, ow))
    for n in range(bs):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ic):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[n, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[n, o, i, j] = acc + (b[0, o, 0, 0] if b is not None else 0.0)
    return out


def tconv_oracle(x, w, b, stride, pad):
    """Brute-force scatter: each input pixel stamps the kernel into the output."""
    bs, ic, h, wd = x.shape
    _, oc, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    full = np.zeros((bs, oc, oh + 2 * pad, ow + 2 * pad))
    for n in range(bs):
        for c in range(ic):
            for i in range(h):
                for j in range(wd):
                    for o in range(oc):
                        full[n, o, i * stride:i * stride + kh, j * stride:j * stride + kw] += \
                            x[n, c, i, j] * w[c, o]
    out = full[:, :, pad:pad + oh, pad:pad + ow]
    if b is not None:
        out = out + b
    return out


class TestConv2d:
    def test_all_ones_sums_kernel_window(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 2, 2)))
        y = conv2d(x, w, stride=1, padding=0)
        assert y.shape == (1, 1, 2, 2)
        assert np.all(y.data == 4.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 1, 5, 7)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros((1, 1, 1, 1)))
        y = conv2d(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=(1, 4, 1, 1))
        y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        expected = conv_oracle(x, w, b, stride=2, pad=1)
        np.testing.assert_allclose(y.data, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_random_shapes_vs_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.uniform(-2, 2, size=(2, 4, 9, 11))
        w = rng.uniform(-2, 2, size=(3, 4, 3, 3))
        b = rng.uniform(-1, 1, size=(1, 3, 1, 1))
        y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, conv_oracle(x, w, b, stride, pad),
                                   rtol=0, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 2, 2)))
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, w)

    def test_nonpositive_output_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ValueError, match="output dims"):
            conv2d(x, w)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(-2, 2, size=(1, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(1, 2, 1, 1)), requires_grad=True)

        def f():
            return tsum(square(conv2d(x, w, b, stride=2, padding=1)))

        assert finite_diff_gradcheck(f, [x, w, b]) < 1e-4


class TestTransposeConv2d:
    def test_single_pixel_stamps_kernel(self):
        x = Tensor(np.ones((1, 1, 1, 1)))
        w = Tensor(np.ones((1, 1, 2, 2)))
        y = transpose_conv2d(x, w, stride=2, padding=0)
        assert y.shape == (1, 1, 2, 2)
        assert np.all(y.data == 1.0)

    def test_nonoverlapping_block_stamp(self):
        x = Tensor(np.arange(4, dtype=float).reshape(1, 1, 2, 2))
        w = Tensor(np.ones((1, 1, 2, 2)))
        y = transpose_conv2d(x, w, stride=2, padding=0)
        expected = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
        np.testing.assert_array_equal(y.data, expected)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (2, 1), (3, 1)])
    def test_matches_scatter_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 7 + pad)
        x = rng.uniform(-2, 2, size=(2, 3, 4, 5))
        w = rng.uniform(-2, 2, size=(3, 2, 3, 3))
        b = rng.uniform(-1, 1, size=(1, 2, 1, 1))
        y = transpose_conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, tconv_oracle(x, w, b, stride, pad),
                                   rtol=0, atol=1e-12)

    def test_forward_equals_conv_input_gradient(self):
        # tconv(u, w) must equal d/dx of sum(conv(x, w) * u): the weight array
        # (in, out, kh, kw) is read as conv layout (out', in', kh, kw) directly.
        rng = np.random.default_rng(3)
        u = rng.uniform(-1, 1, size=(1, 2, 3, 3))
        w = rng.uniform(-1, 1, size=(2, 3, 3, 3))  # (in=2, out=3, kh, kw)
        stride, pad = 2, 1
        tc = transpose_conv2d(Tensor(u), Tensor(w), stride=stride, padding=pad)
        x = Tensor(rng.uniform(-1, 1, size=tc.shape), requires_grad=True)
        y = conv2d(x, Tensor(w), stride=stride, padding=pad)
        loss = tsum(mul(y, Tensor(u)))
        table = backward(loss)
        np.testing.assert_allclose(tc.data, table[x], rtol=0, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.uniform(-1, 1, size=(1, 3, 3, 3)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, size=(3, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(1, 2, 1, 1)), requires_grad=True)

        def f():
            return tsum(square(transpose_conv2d(x, w, b, stride=2, padding=0)))

        assert finite_diff_gradcheck(f, [x, w, b]) < 1e-4


class TestElementwise:
    def test_softplus_at_zero_is_ln2(self):
        y = softplus(scalar(0.0))
        assert y.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_abs_values(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 3))
        np.testing.assert_array_equal(absolute(x).data.ravel(), [2.0, 0.0, 3.0])

    def test_abs_subgradient_zero_at_zero(self):
        x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        table = backward(tsum(absolute(x)))
        assert table[x][0, 0, 0, 0] == 0.0

    def test_log_square_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(0.5, 2.0, size=(1, 1, 3, 3)), requires_grad=True)

        def f():
            return tsum(log(add(square(x), scalar(1.0))))

        assert finite_diff_gradcheck(f, [x], eps=1e-4) < 1e-6

    def test_relu_and_softplus_gradients(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(-2, 2, size=(1, 1, 4, 4)) + 0.01, requires_grad=True)

        def f():
            return tsum(mul(relu(x), softplus(x)))

        assert finite_diff_gradcheck(f, [x]) < 1e-4

    def test_div_rejects_near_zero_denominator(self):
        a = scalar(1.0)
        b = scalar(1e-15)
        with pytest.raises(ValueError, match="denominator"):
            div(a, b)

    def test_guarded_div_clamps(self):
        a = scalar(1.0)
        b = scalar(0.0)
        y = div(a, b, guarded=True)
        assert y.item() == pytest.approx(1.0 / 1e-12)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="non-positive"):
            log(scalar(-1.0))

    def test_guarded_log_clamps(self):
        y = log(scalar(0.0), guarded=True)
        assert y.item() == pytest.approx(math.log(1e-12))

    def test_shape_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 1, 2, 2)))
        b = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ValueError, match="shapes"):
            add(a, b)

    def test_scalar_broadcast_gradient(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        s = scalar(3.0, requires_grad=True)
        table = backward(tsum(mul(x, s)))
        np.testing.assert_array_equal(table[x], np.full((1, 1, 2, 2), 3.0))
        assert table[s][0, 0, 0, 0] == 4.0  # sum of x


class TestConcat:
    def test_channel_counts_add(self):
        parts = [Tensor(np.zeros((2, 1, 4, 4))) for _ in range(3)]
        assert concat_channels(parts).shape == (2, 3, 4, 4)

    def test_single_part_is_identity(self):
        x = Tensor(np.arange(8, dtype=float).reshape(1, 2, 2, 2))
        np.testing.assert_array_equal(concat_channels([x]).data, x.data)

    def test_spatial_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 1, 4, 4)))
        b = Tensor(np.zeros((1, 1, 5, 4)))
        with pytest.raises(ValueError, match="spatial"):
            concat_channels([a, b])

    def test_backward_routes_one_hot_to_single_part(self):
        a = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        y = concat_channels([a, b])
        sel = np.zeros(y.shape)
        sel[0, 2, 1, 1] = 1.0  # lands in part b
        table = backward(tsum(mul(y, Tensor(sel))))
        assert table[a].sum() == 0.0
        assert table[b][0, 0, 1, 1] == 1.0
        assert table[b].sum() == 1.0


class TestStopGradient:
    def test_forward_identity_bit_exact(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        y = stop_gradient(x)
        assert np.array_equal(y.data, x.data)
        assert not y.requires_grad

    def test_no_gradient_through_frozen_path(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        table = backward(tsum(stop_gradient(x)))
        assert x not in table

    def test_product_rule_with_one_frozen_factor(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.uniform(0.5, 2.0, size=(1, 1, 2, 2)), requires_grad=True)
        frozen = stop_gradient(x).data.copy()

        def f():
            return tsum(mul(x, stop_gradient(x)))

        table = backward(f())
        np.testing.assert_array_equal(table[x], frozen)
        # the live path alone must also match finite differences of the
        # frozen-factor function
        def f_frozen():
            return tsum(mul(x, Tensor(frozen)))

        assert finite_diff_gradcheck(f_frozen, [x]) < 1e-6


class TestMaskedMse:
    def test_hand_example(self):
        pred = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
        target = Tensor(np.array([1.0, 9.0, 5.0]).reshape(1, 1, 1, 3))
        mask = Tensor(np.array([1.0, 0.0, 1.0]).reshape(1, 1, 1, 3))
        assert masked_mse(pred, target, mask).item() == pytest.approx(2.0)

    def test_perfect_prediction_is_zero(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        mask = Tensor(np.ones((1, 1, 2, 2)))
        assert masked_mse(x, x, mask).item() == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        pred = rng.normal(size=(2, 1, 4, 4))
        target = rng.normal(size=(2, 1, 4, 4))
        mask = (rng.random((2, 1, 4, 4)) < 0.6).astype(float)
        mask[0, 0, 0, 0] = 1.0  # keep at least one valid pixel
        total, count = 0.0, 0
        for idx in np.ndindex(*pred.shape):
            if mask[idx] == 1.0:
                total += (pred[idx] - target[idx]) ** 2
                count += 1
        got = masked_mse(Tensor(pred), Tensor(target), Tensor(mask)).item()
        assert got == pytest.approx(total / count, rel=0, abs=1e-12)

    def test_all_ones_mask_equals_plain_mean(self):
        rng = np.random.default_rng(13)
        pred = rng.normal(size=(1, 1, 5, 5))
        target = rng.normal(size=(1, 1, 5, 5))
        got = masked_mse(Tensor(pred), Tensor(target), Tensor(np.ones_like(pred))).item()
        assert got == pytest.approx(np.mean((pred - target) ** 2), rel=1e-12)

    def test_empty_mask_rejected(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="no valid"):
            masked_mse(x, x, Tensor(np.zeros((1, 1, 2, 2))))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.zeros((2, 1, 3, 3)), requires_grad=True)
        table = backward(tsum(x))
        np.testing.assert_array_equal(table[x], np.ones((2, 1, 3, 3)))

    def test_nonscalar_root_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(add(x, x))

    def test_diamond_graph_accumulates_both_paths(self):
        # root = sum(x*2 + x*3): gradient must be 5 everywhere
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        a = mul(x, scalar(2.0))
        b = mul(x, scalar(3.0))
        table = backward(tsum(add(a, b)))
        np.testing.assert_array_equal(table[x], np.full((1, 1, 2, 2), 5.0))

    def test_repeated_backward_is_deterministic(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        root = tsum(square(conv2d(x, w, stride=1, padding=1)))
        g1 = {t: g.copy() for t, g in backward(root).items()}
        g2 = backward(root)
        for t in g1:
            np.testing.assert_array_equal(g1[t], g2[t])

    def test_two_layer_conv_stack_gradcheck(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.uniform(-1, 1, size=(1, 1, 6, 6)))
        w1 = Tensor(rng.uniform(-1, 1, size=(2, 1, 3, 3)), requires_grad=True)
        b1 = Tensor(rng.uniform(-0.5, 0.5, size=(1, 2, 1, 1)), requires_grad=True)
        w2 = Tensor(rng.uniform(-1, 1, size=(1, 2, 3, 3)), requires_grad=True)
        b2 = Tensor(rng.uniform(-0.5, 0.5, size=(1, 1, 1, 1)), requires_grad=True)
        target = Tensor(rng.uniform(-1, 1, size=(1, 1, 6, 6)))
        mask = Tensor((rng.random((1, 1, 6, 6)) < 0.7).astype(float))
        if mask.data.sum() == 0:
            mask.data[0, 0, 0, 0] = 1.0

        def f():
            h = relu(conv2d(x, w1, b1, stride=1, padding=1))
            y = conv2d(h, w2, b2, stride=1, padding=1)
            return masked_mse(y, target, mask)

        assert finite_diff_gradcheck(f, [w1, b1, w2, b2]) < 1e-4


class TestGradcheckHarness:
    def test_polynomial_is_exact(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.uniform(-2, 2, size=(1, 1, 3, 3)), requires_grad=True)

        def f():
            return tsum(square(x))

        assert finite_diff_gradcheck(f, [x], eps=1e-3) < 1e-8

    def test_frozen_branch_contributes_zero(self):
        x = Tensor(np.full((1, 1, 2, 2), 1.5), requires_grad=True)
        y = Tensor(np.full((1, 1, 2, 2), 2.5), requires_grad=True)

        def f():
            # y enters only through a stopped path: its gradient must be 0
            return tsum(add(square(x), stop_gradient(square(y))))

        table = backward(f())
        assert y not in table
        # the live path still checks out against finite differences
        assert finite_diff_gradcheck(f, [x]) < 1e-8

    def test_rejects_bad_eps(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        with pytest.raises(ValueError):
            finite_diff_gradcheck(lambda: tsum(x), [x], eps=0.0)


class TestForwardFiniteness:
    def test_ops_preserve_finiteness(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.uniform(-50, 50, size=(1, 2, 4, 4)))
        for t in (relu(x), softplus(x), absolute(x), square(x),
                  add(x, x), mul(x, x), sub(x, x)):
            assert np.all(np.isfinite(t.data))
        assert np.all(np.isfinite(softplus(Tensor(np.full((1, 1, 1, 1), 700.0))).data))
