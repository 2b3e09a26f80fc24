from unittest import TestCase

import numpy as np

from cmsr.exceptions import InvalidArgument, NumericFailure
from cmsr.imaging import resize_bicubic
from cmsr.network import init_deconv_bicubic
from cmsr.tensor import (DECONV_KERNEL_SIZES, ConvSpec, DeconvSpec, as_tensor,
                         conv2d, conv2d_backward, deconv2d, deconv2d_backward,
                         relu, relu_backward)


def conv_oracle(x, kernels, bias):
    """Direct summation with explicit zero padding."""
    channels, height, width = x.shape
    out_channels, _, k, _ = kernels.shape
    half = k // 2
    out = np.zeros((out_channels, height, width))
    for o in range(out_channels):
        for y in range(height):
            for xx in range(width):
                total = bias[o]
                for c in range(channels):
                    for dy in range(k):
                        for dx in range(k):
                            sy, sx = y + dy - half, xx + dx - half
                            if 0 <= sy < height and 0 <= sx < width:
                                total += x[c, sy, sx] * kernels[o, c, dy, dx]
                out[o, y, xx] = total
    return out


def numeric_gradient(f, array, eps=1e-6):
    grad = np.zeros_like(array)
    for index in np.ndindex(*array.shape):
        saved = array[index]
        array[index] = saved + eps
        plus = f()
        array[index] = saved - eps
        minus = f()
        array[index] = saved
        grad[index] = (plus - minus) / (2 * eps)
    return grad


class BaseTensorTestCase(TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1234)

    def random_conv(self, in_channels=2, out_channels=3, k=3, padding='same'):
        return ConvSpec(
            kernels=self.rng.normal(size=(out_channels, in_channels, k, k)),
            bias=self.rng.normal(size=out_channels),
            padding=padding)

    def random_deconv(self, in_channels=2, out_channels=2, n=4, stride=2,
                      border='zero'):
        return DeconvSpec(
            kernels=self.rng.normal(size=(in_channels, out_channels, n, n)),
            stride=stride,
            bias=self.rng.normal(size=out_channels),
            border=border)

    def assertGradientsClose(self, analytic, numeric):
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        error = np.abs(analytic - numeric)
        self.assertTrue(np.all(error <= 1e-4 * scale + 1e-8),
                        "max error %g" % error.max())


class TensorTestCase(BaseTensorTestCase):
    "Tests for tensor validation"
    def test_as_tensor_keeps_float64(self):
        self.assertEqual(as_tensor(np.zeros((1, 2, 2))).dtype, np.float64)

    def test_as_tensor_converts_integers_to_float32(self):
        self.assertEqual(as_tensor(np.zeros((1, 2, 2), int)).dtype,
                         np.float32)

    def test_as_tensor_rejects_rank_two(self):
        self.assertRaises(InvalidArgument, as_tensor, np.zeros((2, 2)))

    def test_as_tensor_rejects_empty_dimension(self):
        self.assertRaises(InvalidArgument, as_tensor, np.zeros((1, 0, 2)))

    def test_conv_spec_rejects_even_kernel(self):
        self.assertRaises(InvalidArgument, ConvSpec, np.zeros((1, 1, 2, 2)))

    def test_conv_spec_rejects_bias_length(self):
        self.assertRaises(InvalidArgument, ConvSpec, np.zeros((2, 1, 3, 3)),
                          np.zeros(3))

    def test_deconv_spec_rejects_kernel_narrower_than_two_strides(self):
        self.assertRaises(InvalidArgument, DeconvSpec.zeros, 1, 1, 5, 3)

    def test_default_kernel_sizes(self):
        self.assertEqual(DECONV_KERNEL_SIZES, {2: 8, 3: 11, 4: 16})


class Conv2dTestCase(BaseTensorTestCase):
    "Tests for conv2d and conv2d_backward"
    def test_delta_kernel_is_identity(self):
        x = self.rng.normal(size=(1, 5, 5))
        spec = ConvSpec.zeros(1, 1, 3, dtype=np.float64)
        spec.kernels[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(conv2d(x, spec), x)

    def test_valid_sum_of_sevens(self):
        spec = ConvSpec(np.ones((1, 1, 3, 3)), np.zeros(1), padding='valid')
        out = conv2d(np.full((1, 5, 6), 7.0), spec)
        self.assertEqual(out.shape, (1, 3, 4))
        np.testing.assert_array_equal(out, 63.0)

    def test_matches_direct_summation(self):
        x = self.rng.normal(size=(2, 6, 6))
        spec = self.random_conv()
        np.testing.assert_allclose(
            conv2d(x, spec), conv_oracle(x, spec.kernels, spec.bias),
            atol=1e-6)

    def test_batched_input(self):
        x = self.rng.normal(size=(3, 2, 6, 6))
        spec = self.random_conv()
        out = conv2d(x, spec)
        self.assertEqual(out.shape, (3, 3, 6, 6))
        np.testing.assert_allclose(out[1], conv2d(x[1], spec))

    def test_same_padding_preserves_size(self):
        spec = self.random_conv(k=5)
        self.assertEqual(conv2d(np.zeros((2, 7, 9)), spec).shape, (3, 7, 9))

    def test_valid_kernel_larger_than_input(self):
        spec = self.random_conv(k=5, padding='valid')
        self.assertRaises(InvalidArgument, conv2d, np.zeros((2, 4, 4)), spec)

    def test_channel_mismatch(self):
        spec = self.random_conv(in_channels=3)
        self.assertRaises(InvalidArgument, conv2d, np.zeros((2, 4, 4)), spec)

    def test_non_finite_output(self):
        spec = self.random_conv(in_channels=1, out_channels=1)
        x = np.zeros((1, 4, 4))
        x[0, 1, 1] = np.inf
        self.assertRaises(NumericFailure, conv2d, x, spec)

    def test_backward_zero_gradient(self):
        x = self.rng.normal(size=(2, 5, 5))
        spec = self.random_conv()
        gx, gk, gb = conv2d_backward(x, spec, np.zeros((3, 5, 5)))
        self.assertFalse(gx.any() or gk.any() or gb.any())

    def test_backward_scalar_chain_rule(self):
        spec = ConvSpec(np.array([[[[3.0]]]]), np.array([0.5]))
        gx, gk, gb = conv2d_backward(np.array([[[2.0]]]), spec,
                                     np.ones((1, 1, 1)))
        self.assertEqual(gx[0, 0, 0], 3.0)
        self.assertEqual(gk[0, 0, 0, 0], 2.0)
        self.assertEqual(gb[0], 1.0)

    def test_backward_without_bias(self):
        spec = ConvSpec(self.rng.normal(size=(1, 1, 3, 3)))
        _, _, gb = conv2d_backward(np.ones((1, 4, 4)), spec,
                                   np.ones((1, 4, 4)))
        self.assertIsNone(gb)

    def test_backward_shape_mismatch(self):
        spec = self.random_conv()
        self.assertRaises(InvalidArgument, conv2d_backward,
                          np.zeros((2, 5, 5)), spec, np.zeros((3, 4, 4)))

    def test_backward_matches_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            padding = ('same', 'valid')[seed % 2]
            x = rng.normal(size=(2, 2, 5, 6))
            spec = ConvSpec(rng.normal(size=(2, 2, 3, 3)),
                            rng.normal(size=2), padding=padding)
            g = rng.normal(size=conv2d(x, spec).shape)

            def loss():
                return float(np.sum(conv2d(x, spec) * g))

            gx, gk, gb = conv2d_backward(x, spec, g)
            self.assertGradientsClose(gx, numeric_gradient(loss, x))
            self.assertGradientsClose(gk, numeric_gradient(loss, spec.kernels))
            self.assertGradientsClose(gb, numeric_gradient(loss, spec.bias))

    def test_adjointness(self):
        x = self.rng.normal(size=(2, 7, 7))
        spec = self.random_conv()
        spec.bias[:] = 0
        g = self.rng.normal(size=(3, 7, 7))
        gx, _, _ = conv2d_backward(x, spec, g)
        self.assertAlmostEqual(float(np.sum(conv2d(x, spec) * g)),
                               float(np.sum(x * gx)), delta=1e-5)

    def test_float32_stays_float32(self):
        spec = ConvSpec.zeros(1, 1, 3)
        self.assertEqual(conv2d(np.zeros((1, 4, 4), np.float32),
                                spec).dtype, np.float32)


class Deconv2dTestCase(BaseTensorTestCase):
    "Tests for deconv2d and deconv2d_backward"
    def test_delta_at_anchor_interleaves_zeros(self):
        spec = DeconvSpec.zeros(1, 1, 4, 2, dtype=np.float64)
        spec.kernels[0, 0, spec.anchor, spec.anchor] = 1
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        expected = np.zeros((1, 4, 4))
        expected[0, ::2, ::2] = x[0]
        np.testing.assert_array_equal(deconv2d(x, spec), expected)

    def test_impulse_response_is_cropped_kernel(self):
        spec = self.random_deconv(in_channels=1, out_channels=1)
        spec.bias[:] = 0
        a, s = spec.anchor, spec.stride
        out = deconv2d(np.ones((1, 1, 1)), spec)
        np.testing.assert_array_equal(out[0],
                                      spec.kernels[0, 0, a:a + s, a:a + s])

    def test_output_is_exactly_stride_times_input(self):
        for stride, n in DECONV_KERNEL_SIZES.items():
            for border in ('zero', 'replicate'):
                spec = DeconvSpec.zeros(2, 3, n, stride, border=border)
                for size in ((1, 1), (3, 5), (7, 2)):
                    out = deconv2d(np.ones((2,) + size), spec)
                    self.assertEqual(out.shape, (3, stride * size[0],
                                                 stride * size[1]))

    def test_bicubic_kernels_reproduce_resize(self):
        ramp = np.add.outer(np.arange(16.0), 2 * np.arange(16.0)) / 48.0
        self.assert_matches_resize(ramp, 3)

    def test_bicubic_kernels_reproduce_resize_all_scales(self):
        plane = self.rng.random((64, 64))
        for scale in DECONV_KERNEL_SIZES:
            self.assert_matches_resize(plane, scale)

    def assert_matches_resize(self, plane, scale):
        spec = DeconvSpec(
            kernels=init_deconv_bicubic(scale, channels=1).astype(np.float64),
            stride=scale, border='replicate')
        out = deconv2d(plane[np.newaxis], spec)[0]
        np.testing.assert_allclose(out, resize_bicubic(plane, scale),
                                   atol=1e-5)

    def test_stride_one_reduces_to_conv(self):
        x = self.rng.normal(size=(2, 5, 5))
        deconv = self.random_deconv(in_channels=2, out_channels=3, n=1,
                                    stride=1)
        conv = ConvSpec(deconv.kernels.transpose(1, 0, 2, 3).copy(),
                        deconv.bias.copy())
        g = self.rng.normal(size=(3, 5, 5))
        np.testing.assert_allclose(deconv2d(x, deconv), conv2d(x, conv))
        dgx, dgk, dgb = deconv2d_backward(x, deconv, g)
        cgx, cgk, cgb = conv2d_backward(x, conv, g)
        np.testing.assert_allclose(dgx, cgx)
        np.testing.assert_allclose(dgk, cgk.transpose(1, 0, 2, 3))
        np.testing.assert_allclose(dgb, cgb)

    def test_backward_zero_gradient(self):
        spec = self.random_deconv()
        x = self.rng.normal(size=(2, 3, 3))
        gx, gk, gb = deconv2d_backward(x, spec, np.zeros((2, 6, 6)))
        self.assertFalse(gx.any() or gk.any() or gb.any())

    def test_backward_shape_mismatch(self):
        spec = self.random_deconv()
        self.assertRaises(InvalidArgument, deconv2d_backward,
                          np.zeros((2, 3, 3)), spec, np.zeros((2, 5, 5)))

    def test_backward_matches_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            stride = 2 + seed % 2
            border = ('zero', 'replicate')[(seed // 2) % 2]
            x = rng.normal(size=(2, 2, 3, 4))
            spec = DeconvSpec(rng.normal(size=(2, 1, 2 * stride + 1,
                                               2 * stride + 1)),
                              stride, rng.normal(size=1), border=border)
            g = rng.normal(size=deconv2d(x, spec).shape)

            def loss():
                return float(np.sum(deconv2d(x, spec) * g))

            gx, gk, gb = deconv2d_backward(x, spec, g)
            self.assertGradientsClose(gx, numeric_gradient(loss, x))
            self.assertGradientsClose(gk, numeric_gradient(loss, spec.kernels))
            self.assertGradientsClose(gb, numeric_gradient(loss, spec.bias))

    def test_adjointness(self):
        for border in ('zero', 'replicate'):
            spec = self.random_deconv(n=11, stride=3, border=border)
            spec.bias[:] = 0
            x = self.rng.normal(size=(2, 4, 5))
            g = self.rng.normal(size=(2, 12, 15))
            gx, _, _ = deconv2d_backward(x, spec, g)
            self.assertAlmostEqual(float(np.sum(deconv2d(x, spec) * g)),
                                   float(np.sum(x * gx)), delta=1e-5)


class ReluTestCase(TestCase):
    "Tests for relu and relu_backward"
    def test_clamps_negatives(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])),
                                      [0.0, 0.0, 2.0])

    def test_positive_input_is_identity(self):
        x = np.array([0.5, 3.0, 7.0])
        np.testing.assert_array_equal(relu(x), x)

    def test_backward_gates_gradient(self):
        np.testing.assert_array_equal(
            relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0])),
            [0.0, 5.0])

    def test_backward_subgradient_at_zero(self):
        self.assertEqual(relu_backward(np.array([0.0]), np.array([1.0]))[0],
                         0.0)

    def test_rejects_non_finite(self):
        self.assertRaises(NumericFailure, relu, np.array([np.nan]))
