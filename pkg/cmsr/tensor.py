"""
Dense tensors and the three differentiable primitives the network is built
from: same/valid 2-D correlation, strided transposed correlation and ReLU.

A tensor is a C-contiguous numpy array, channels first, of rank 3 (C, H, W)
or rank 4 (N, C, H, W). float32 is the working precision; every operation
keeps float64 when its operands are float64, which is how gradient checks run.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cmsr.exceptions import InvalidArgument, NumericFailure


PADDINGS = ('same', 'valid')
BORDERS = ('zero', 'replicate')

"""
Transposed-convolution kernel width per upscaling factor.
"""
DECONV_KERNEL_SIZES = {2: 8, 3: 11, 4: 16}


def as_tensor(value, dtype=None):
    """
    Returns value as a contiguous float array. Anything that is not already
    float64 becomes float32 unless dtype says otherwise.
    """
    array = np.asarray(value)
    if dtype is None:
        dtype = np.float64 if array.dtype == np.float64 else np.float32
    array = np.ascontiguousarray(array, dtype=dtype)
    if array.ndim not in (3, 4) or 0 in array.shape:
        raise InvalidArgument(
            "tensors are rank 3 or 4 with positive dimensions, got shape %s"
            % (array.shape,))
    return array


def check_finite(array, name):
    if not np.isfinite(array).all():
        raise NumericFailure("non-finite values in %s" % name, tensor=name)
    return array


def _batched(value):
    array = as_tensor(value)
    if array.ndim == 3:
        return array[np.newaxis], True
    return array, False


def _unbatch(array, squeeze):
    return array[0] if squeeze else array


def _result_dtype(*arrays):
    return np.result_type(*[a for a in arrays if a is not None])


@dataclass
class ConvSpec:
    """
    One convolutional layer: kernels shaped (out, in, k, k) with odd k, an
    optional bias of length out, and the padding mode.
    """
    kernels: np.ndarray
    bias: Optional[np.ndarray] = None
    padding: str = 'same'

    def __post_init__(self):
        self.kernels = np.ascontiguousarray(self.kernels)
        if self.kernels.ndim != 4:
            raise InvalidArgument("conv kernels must be (out, in, k, k)")
        out_channels, _, k, k2 = self.kernels.shape
        if k != k2 or k % 2 == 0:
            raise InvalidArgument(
                "conv kernels must be square with odd size, got %ix%i" % (k, k2))
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias)
            if self.bias.shape != (out_channels,):
                raise InvalidArgument(
                    "bias length %s does not match %i output channels"
                    % (self.bias.shape, out_channels))
        if self.padding not in PADDINGS:
            raise InvalidArgument("unknown padding %r" % self.padding)

    @classmethod
    def zeros(cls, in_channels, out_channels, kernel_size, padding='same',
              bias=True, dtype=np.float32):
        return cls(
            kernels=np.zeros((out_channels, in_channels, kernel_size,
                              kernel_size), dtype=dtype),
            bias=np.zeros(out_channels, dtype=dtype) if bias else None,
            padding=padding)

    @property
    def in_channels(self):
        return self.kernels.shape[1]

    @property
    def out_channels(self):
        return self.kernels.shape[0]

    @property
    def kernel_size(self):
        return self.kernels.shape[2]


@dataclass
class DeconvSpec:
    """
    One strided transposed-convolution layer: kernels shaped (in, out, n, n),
    optional bias of length out, stride s equal to the upscaling factor.

    border="replicate" edge-pads the input before the scatter so that the
    layer sees the same neighbourhood as an edge-clamped resampler.
    """
    kernels: np.ndarray
    stride: int
    bias: Optional[np.ndarray] = None
    border: str = 'zero'

    def __post_init__(self):
        self.kernels = np.ascontiguousarray(self.kernels)
        if self.kernels.ndim != 4:
            raise InvalidArgument("deconv kernels must be (in, out, n, n)")
        _, out_channels, n, n2 = self.kernels.shape
        if n != n2:
            raise InvalidArgument("deconv kernels must be square")
        if self.stride < 1:
            raise InvalidArgument("stride must be positive")
        # wide enough to reach the neighbouring LR sample on both sides
        if self.stride > 1 and n < 2 * self.stride:
            raise InvalidArgument(
                "kernel size %i is smaller than twice the stride %i"
                % (n, self.stride))
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias)
            if self.bias.shape != (out_channels,):
                raise InvalidArgument(
                    "bias length %s does not match %i output channels"
                    % (self.bias.shape, out_channels))
        if self.border not in BORDERS:
            raise InvalidArgument("unknown border %r" % self.border)

    @classmethod
    def zeros(cls, in_channels, out_channels, kernel_size, stride,
              bias=True, border='zero', dtype=np.float32):
        return cls(
            kernels=np.zeros((in_channels, out_channels, kernel_size,
                              kernel_size), dtype=dtype),
            stride=stride,
            bias=np.zeros(out_channels, dtype=dtype) if bias else None,
            border=border)

    @property
    def in_channels(self):
        return self.kernels.shape[0]

    @property
    def out_channels(self):
        return self.kernels.shape[1]

    @property
    def kernel_size(self):
        return self.kernels.shape[2]

    @property
    def anchor(self):
        """Kernel tap that lands exactly on the LR sample."""
        return (self.kernel_size - 1) // 2

    @property
    def border_pad(self):
        if self.border == 'zero':
            return 0
        return int(math.ceil((self.kernel_size - 1) / float(self.stride)))


def _correlate_valid(x, kernels):
    k = kernels.shape[-1]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    out = np.tensordot(windows, kernels, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_padding(spec, height, width):
    k = spec.kernel_size
    if spec.padding == 'same':
        return k // 2
    if k > height or k > width:
        raise InvalidArgument(
            "valid convolution with %ix%i kernel needs at least %ix%i input, "
            "got %ix%i" % (k, k, k, k, height, width))
    return 0


def _check_conv_input(x, spec):
    if x.shape[1] != spec.in_channels:
        raise InvalidArgument(
            "input has %i channels, layer expects %i"
            % (x.shape[1], spec.in_channels))


def conv2d(input, spec):
    """
    Correlates input with every kernel of spec and adds the bias. Same
    padding zero-fills out-of-bounds samples and preserves H and W; valid
    padding shrinks both by k - 1.
    """
    x, squeeze = _batched(input)
    _check_conv_input(x, spec)
    pad = _conv_padding(spec, x.shape[2], x.shape[3])
    dtype = _result_dtype(x, spec.kernels, spec.bias)
    x = x.astype(dtype, copy=False)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = _correlate_valid(x, spec.kernels.astype(dtype, copy=False))
    if spec.bias is not None:
        out += spec.bias.astype(dtype, copy=False)[None, :, None, None]
    return _unbatch(check_finite(out, 'conv2d output'), squeeze)


def conv2d_backward(input, spec, grad_out):
    """
    Returns (grad_input, grad_kernels, grad_bias) of sum(grad_out * conv2d(
    input, spec)). grad_bias is None for a bias-free layer.
    """
    x, squeeze = _batched(input)
    _check_conv_input(x, spec)
    pad = _conv_padding(spec, x.shape[2], x.shape[3])
    k = spec.kernel_size
    g, _ = _batched(grad_out)
    expected = (x.shape[0], spec.out_channels,
                x.shape[2] + 2 * pad - k + 1, x.shape[3] + 2 * pad - k + 1)
    if g.shape != expected:
        raise InvalidArgument(
            "grad_out shape %s does not match output shape %s"
            % (g.shape, expected))
    dtype = _result_dtype(x, g, spec.kernels)
    x = x.astype(dtype, copy=False)
    g = g.astype(dtype, copy=False)
    kernels = spec.kernels.astype(dtype, copy=False)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    grad_kernels = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))

    grad_bias = None
    if spec.bias is not None:
        grad_bias = g.sum(axis=(0, 2, 3))

    # full correlation of the upstream gradient with the flipped kernels
    g_padded = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    flipped = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = _correlate_valid(g_padded, np.ascontiguousarray(flipped))
    height, width = x.shape[2] - 2 * pad, x.shape[3] - 2 * pad
    grad_x = grad_x[:, :, pad:pad + height, pad:pad + width]

    return (_unbatch(np.ascontiguousarray(grad_x), squeeze),
            np.ascontiguousarray(grad_kernels),
            grad_bias)


def _scatter(x, kernels, stride):
    """
    Places every input sample at stride s on the output grid and accumulates
    its kernel footprint. Output is (h - 1) * s + n on each side.
    """
    batch, _, height, width = x.shape
    _, out_channels, n, _ = kernels.shape
    full = np.zeros((batch, out_channels, (height - 1) * stride + n,
                     (width - 1) * stride + n), dtype=x.dtype)
    rows = (height - 1) * stride + 1
    cols = (width - 1) * stride + 1
    for a in range(n):
        # (N, h, w, out, n)
        taps = np.tensordot(x, kernels[:, :, a, :], axes=([1], [0]))
        taps = taps.transpose(0, 3, 4, 1, 2)
        for b in range(n):
            full[:, :, a:a + rows:stride, b:b + cols:stride] += taps[:, :, b]
    return full


def _scatter_backward(x, kernels, stride, grad_full):
    n = kernels.shape[2]
    height, width = x.shape[2], x.shape[3]
    windows = sliding_window_view(grad_full, (n, n), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :height, :width]
    grad_x = np.tensordot(windows, kernels, axes=([1, 4, 5], [1, 2, 3]))
    grad_kernels = np.tensordot(x, windows, axes=([0, 2, 3], [0, 2, 3]))
    return (np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)),
            np.ascontiguousarray(grad_kernels))


def _fold_edge(grad, pad):
    """Adjoint of np.pad(mode='edge') on the two spatial axes."""
    height = grad.shape[2] - 2 * pad
    width = grad.shape[3] - 2 * pad
    rows = grad[:, :, pad:pad + height, :].copy()
    rows[:, :, 0, :] += grad[:, :, :pad, :].sum(axis=2)
    rows[:, :, -1, :] += grad[:, :, pad + height:, :].sum(axis=2)
    folded = rows[:, :, :, pad:pad + width].copy()
    folded[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
    folded[:, :, :, -1] += rows[:, :, :, pad + width:].sum(axis=3)
    return folded


def _check_deconv_input(x, spec):
    if x.shape[1] != spec.in_channels:
        raise InvalidArgument(
            "input has %i channels, layer expects %i"
            % (x.shape[1], spec.in_channels))


def _deconv_prepare(x, spec, dtype):
    x = x.astype(dtype, copy=False)
    pad = spec.border_pad
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode='edge')
    top = spec.anchor + spec.stride * pad
    return x, top


def deconv2d(input, spec):
    """
    Upscales input by spec.stride: each LR sample is placed on the HR grid at
    stride s, the grid is correlated with the kernels and the result cropped
    to exactly (s * h, s * w) with the anchor tap on the LR sample.
    """
    x, squeeze = _batched(input)
    _check_deconv_input(x, spec)
    height, width = x.shape[2], x.shape[3]
    dtype = _result_dtype(x, spec.kernels, spec.bias)
    padded, top = _deconv_prepare(x, spec, dtype)
    full = _scatter(padded, spec.kernels.astype(dtype, copy=False),
                    spec.stride)
    s = spec.stride
    out = full[:, :, top:top + s * height, top:top + s * width]
    out = np.ascontiguousarray(out)
    if spec.bias is not None:
        out += spec.bias.astype(dtype, copy=False)[None, :, None, None]
    return _unbatch(check_finite(out, 'deconv2d output'), squeeze)


def deconv2d_backward(input, spec, grad_out):
    """
    Returns (grad_input, grad_kernels, grad_bias) of sum(grad_out *
    deconv2d(input, spec)).
    """
    x, squeeze = _batched(input)
    _check_deconv_input(x, spec)
    g, _ = _batched(grad_out)
    s = spec.stride
    height, width = x.shape[2], x.shape[3]
    expected = (x.shape[0], spec.out_channels, s * height, s * width)
    if g.shape != expected:
        raise InvalidArgument(
            "grad_out shape %s does not match output shape %s"
            % (g.shape, expected))
    dtype = _result_dtype(x, g, spec.kernels)
    padded, top = _deconv_prepare(x, spec, dtype)
    n = spec.kernel_size
    grad_full = np.zeros(
        (g.shape[0], g.shape[1], (padded.shape[2] - 1) * s + n,
         (padded.shape[3] - 1) * s + n), dtype=dtype)
    grad_full[:, :, top:top + s * height, top:top + s * width] = g
    grad_x, grad_kernels = _scatter_backward(
        padded, spec.kernels.astype(dtype, copy=False), s, grad_full)
    if spec.border_pad:
        grad_x = _fold_edge(grad_x, spec.border_pad)

    grad_bias = None
    if spec.bias is not None:
        grad_bias = g.astype(dtype, copy=False).sum(axis=(0, 2, 3))
    return _unbatch(grad_x, squeeze), grad_kernels, grad_bias


def relu(input):
    x = np.asarray(input)
    return check_finite(np.maximum(x, 0).astype(x.dtype, copy=False),
                        'relu output')


def relu_backward(input, grad_out):
    """Passes grad_out where input > 0; the subgradient at 0 is 0."""
    x = np.asarray(input)
    g = np.asarray(grad_out)
    if x.shape != g.shape:
        raise InvalidArgument(
            "grad_out shape %s does not match input shape %s"
            % (g.shape, x.shape))
    return np.where(x > 0, g, np.zeros_like(g))
