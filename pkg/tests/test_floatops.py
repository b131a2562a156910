import numpy as np
import pytest

import refeval
from bnnkit.floatops import (
    add,
    avgpool,
    batchnorm,
    bn_scale,
    conv2d_f32,
    flatten,
    fully_connected,
    global_avgpool,
    maxpool,
    oracle_binary_conv,
    relu,
    sign_op,
)
from bnnkit.kernels import ConvParams
from bnnkit.layout import FloatTensor, Layout, convert_layout


def nhwc(values):
    return FloatTensor.from_array(np.asarray(values, np.float32), Layout.NHWC)


def nchw(values):
    return FloatTensor.from_array(np.asarray(values, np.float32), Layout.NCHW)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        out = conv2d_f32(nchw(x), nchw(w))
        assert np.array_equal(out.nhwc_array(), np.transpose(x, (0, 2, 3, 1)))

    def test_all_ones_three_by_three(self):
        out = conv2d_f32(nchw(np.ones((1, 1, 3, 3))), nchw(np.ones((1, 1, 3, 3))))
        assert out.dims == (1, 1, 1, 1)
        assert out.data.tolist() == [9.0]

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_against_scalar_loop(self, stride, pad, rng):
        x = rng.standard_normal((2, 4, 4, 3)).astype(np.float32)
        w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
        bias = rng.standard_normal(2).astype(np.float32)
        params = ConvParams(
            kernel=(3, 3), channels=3, stride=(stride, stride), padding=(pad, pad)
        )
        out = conv2d_f32(nhwc(x), nchw(w), bias, params)
        want = refeval.naive_conv(x, w, bias, (stride, stride), (pad, pad), 0.0)
        assert np.array_equal(out.nhwc_array(), want)

    def test_layout_independent(self, rng):
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        w = rng.standard_normal((2, 3, 1, 1)).astype(np.float32)
        a = conv2d_f32(nchw(x), nchw(w))
        b = conv2d_f32(convert_layout(nchw(x), Layout.NHWC), nchw(w))
        assert a == b

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            conv2d_f32(nchw(np.zeros((1, 2, 3, 3))), nchw(np.zeros((1, 3, 1, 1))))


class TestOracleBinaryConv:
    def test_all_positive(self):
        x = np.full((1, 8, 2, 2), 0.5, np.float32)
        w = np.full((1, 8, 1, 1), 2.0, np.float32)
        out = oracle_binary_conv(nchw(x), nchw(w))
        assert set(out.data.tolist()) == {8.0}

    def test_spatial_padding_reads_plus_one(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        params = ConvParams(kernel=(3, 3), channels=1, padding=(1, 1))
        out = oracle_binary_conv(nchw(x), nchw(w), params)
        assert set(out.data.tolist()) == {9.0}
        zero_pad = conv2d_f32(nchw(x), nchw(w), None, params)
        assert zero_pad.array4d()[0, 0, 0, 0] == 4.0

    def test_binarizes_by_sign_bit(self):
        x = np.array([[[[-0.0, 3.0]]]], np.float32)  # NHWC, c=2
        w = np.ones((1, 2, 1, 1), np.float32)
        out = oracle_binary_conv(nhwc(x), nchw(w))
        assert out.data.tolist() == [0.0]  # -1 + 1


class TestSign:
    def test_worked_examples(self):
        x = nhwc(np.array([[[[-0.5, 0.0, -0.0, 2.0]]]], np.float32))
        assert sign_op(x).data.tolist() == [-1.0, 1.0, -1.0, 1.0]

    def test_nan_sign(self):
        neg_nan = np.uint32(0xFFC00000).view(np.float32)
        x = nhwc(np.array([[[[neg_nan]]]], np.float32))
        assert sign_op(x).data.tolist() == [-1.0]


class TestBatchnorm:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 2, 2, 3)).astype(np.float32)
        out = batchnorm(nhwc(x), [1, 1, 1], [0, 0, 0], [0, 0, 0], [1, 1, 1], 0.0)
        assert np.array_equal(out.nhwc_array(), x)

    def test_hand_arithmetic(self):
        out = batchnorm(nhwc(np.full((1, 1, 1, 1), 3.0)), [2.0], [1.0], [1.0], [4.0], 0.0)
        assert out.data.tolist() == [3.0]

    def test_negative_variance(self):
        with pytest.raises(ValueError, match="negative variance"):
            bn_scale([-1.0], 0.0)
        with pytest.raises(ValueError, match="negative variance"):
            batchnorm(nhwc(np.zeros((1, 1, 1, 1))), [1.0], [0.0], [0.0], [-4.0], 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="gamma"):
            batchnorm(nhwc(np.zeros((1, 1, 1, 2))), [1.0], [0, 0], [0, 0], [1, 1])


class TestPools:
    def test_maxpool_window(self):
        x = nhwc(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 2, 2, 1))
        assert maxpool(x, (2, 2)).data.tolist() == [4.0]

    def test_avgpool_window(self):
        x = nhwc(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 2, 2, 1))
        assert avgpool(x, (2, 2)).data.tolist() == [2.5]

    def test_maxpool_padding_never_wins(self):
        x = nhwc(np.full((1, 2, 2, 1), -5.0, np.float32))
        out = maxpool(x, (2, 2), (2, 2), (1, 1))
        assert out.data.tolist() == [-5.0, -5.0, -5.0, -5.0]

    def test_avgpool_divides_by_valid_count(self):
        x = nhwc(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 2, 2, 1))
        out = avgpool(x, (2, 2), (2, 2), (1, 1))
        assert out.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_against_scalar_loop(self, kind, rng):
        x = rng.standard_normal((2, 5, 5, 3)).astype(np.float32)
        pool = maxpool if kind == "max" else avgpool
        out = pool(nhwc(x), (3, 3), (2, 2), (1, 1))
        want = refeval.naive_pool(x, (3, 3), (2, 2), (1, 1), kind)
        assert np.array_equal(out.nhwc_array(), want)


class TestElementwise:
    def test_relu(self):
        x = nhwc(np.array([[[[-2.0, 0.0, 3.0, -0.0]]]], np.float32))
        assert relu(x).data.tolist() == [0.0, 0.0, 3.0, 0.0]

    def test_add(self, rng):
        a = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
        b = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
        assert np.array_equal(add(nhwc(a), nhwc(b)).nhwc_array(), a + b)

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            add(nhwc(np.zeros((1, 1, 1, 1))), nhwc(np.zeros((1, 1, 1, 2))))


class TestGlobalAvgPool:
    def test_spatial_mean(self):
        x = nhwc(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 2, 2, 1))
        out = global_avgpool(x)
        assert out.dims == (1, 1, 1, 1)
        assert out.data.tolist() == [2.5]

    def test_per_channel(self, rng):
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        out = global_avgpool(nhwc(x))
        assert out.dims == (2, 5, 1, 1)


class TestFlattenAndDense:
    def test_flatten_channel_major(self, rng):
        a = rng.standard_normal((1, 2, 2, 3)).astype(np.float32)
        out = flatten(nhwc(a))
        assert out.dims == (1, 12, 1, 1)
        want = np.transpose(a, (0, 3, 1, 2)).reshape(-1)
        assert np.array_equal(out.data, want)

    def test_flatten_trivial_spatial(self, rng):
        a = rng.standard_normal((2, 1, 1, 7)).astype(np.float32)
        out = flatten(nhwc(a))
        assert out.dims == (2, 7, 1, 1)
        assert np.array_equal(out.data.reshape(2, 7), a.reshape(2, 7))

    def test_fully_connected_exact(self):
        x = nhwc(np.array([1.0, 2.0], np.float32).reshape(1, 1, 1, 2))
        w = np.array([[1.0, 1.0], [1.0, -1.0]], np.float32)
        out = fully_connected(x, w, np.array([0.5, -0.5], np.float32))
        assert out.data.tolist() == [3.5, -1.5]
        assert out.dims == (1, 2, 1, 1)

    def test_fully_connected_against_scalar_loop(self, rng):
        x = rng.standard_normal((2, 1, 1, 6)).astype(np.float32)
        w = rng.standard_normal((3, 6)).astype(np.float32)
        bias = rng.standard_normal(3).astype(np.float32)
        out = fully_connected(nhwc(x), w, bias)
        for img in range(2):
            for f in range(3):
                acc = np.float32(0.0 + bias[f])
                for i in range(6):
                    acc = np.float32(acc + np.float32(x[img, 0, 0, i] * w[f, i]))
                assert out.array4d()[img, 0, 0, f] == acc

    def test_fully_connected_shape_error(self):
        with pytest.raises(ValueError):
            fully_connected(nhwc(np.zeros((1, 1, 1, 3))), np.zeros((2, 4), np.float32))
