"""
The contextualized multi-task super-resolution network.

Shared feature extraction (a small pyramid of convolutions ending in a 1x1
shrinking layer) feeds two independent content-adaptive interpolators. The
first drives the boundary context branch, which emits the intermediate HR
image and a boundary map; the second drives the residue context branch,
which emits a signed residual. A 3x3 fusion filter merges the two:

    y = fusion * inter_hr + residual
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from cmsr import records, settings
from cmsr.exceptions import (CorruptModel, InvalidArgument, NumericFailure,
                             UnsupportedScale)
from cmsr.imaging import bicubic_weight
from cmsr.tensor import (DECONV_KERNEL_SIZES, ConvSpec, DeconvSpec, conv2d,
                         conv2d_backward, deconv2d, deconv2d_backward, relu,
                         relu_backward)


log = logging.getLogger(__name__)

SCALES = (2, 3, 4)
PROFILES = ('common', 'deep')

"""
(kernel size, output channels) of each feature extraction layer. The last
entry is the 1x1 shrinking layer.
"""
EXTRACTION_LAYERS = {
    'common': [(5, 16), (3, 32), (3, 128), (1, 8)],
    'deep': [(5, 16), (3, 32), (3, 64)] + [(3, 64)] * 13 + [(3, 128), (1, 8)],
}
BCN_LAYERS = [(3, 12), (3, 2)]
RCN_LAYERS = [(3, 12), (3, 1)]

"""
Parameter groups. W_s covers extraction and both interpolators, W_h and W_b
the boundary branch (split by output channel of its last layer), W_d the
residue branch and f the fusion filter.
"""
GROUPS = ('W_s', 'W_h', 'W_b', 'W_d', 'f')

INITS = ('passthrough', 'gaussian')


@dataclass
class NetworkConfig:
    scale: int = 3
    profile: str = 'common'
    seed: int = 0
    init: str = 'passthrough'
    init_std: float = settings.CMSR_INIT_STD
    deconv_init: str = 'bicubic'
    channel_cap: Optional[int] = None

    def __post_init__(self):
        if self.scale not in SCALES:
            raise UnsupportedScale(
                "scale %r is not one of %s" % (self.scale, SCALES))
        if self.profile not in PROFILES:
            raise InvalidArgument("unknown profile %r" % self.profile)
        if self.init not in INITS:
            raise InvalidArgument("unknown init %r" % self.init)
        if self.deconv_init not in ('bicubic', 'gaussian'):
            raise InvalidArgument("unknown deconv_init %r" % self.deconv_init)

    @property
    def extraction_depth(self):
        return len(EXTRACTION_LAYERS[self.profile])

    def width(self, channels):
        if self.channel_cap is None:
            return channels
        return min(channels, self.channel_cap)


@dataclass
class NetworkParams:
    config: NetworkConfig
    extraction: List[ConvSpec]
    interp1: DeconvSpec
    bcn_hidden: ConvSpec
    bcn_out: ConvSpec
    interp2: DeconvSpec
    rcn_hidden: ConvSpec
    rcn_out: ConvSpec
    fusion: ConvSpec

    def layers(self):
        """
        Ordered (name, spec) pairs. A layer's position in this list is the
        layer index reported by NumericFailure.
        """
        named = [('extract.%i' % i, spec)
                 for i, spec in enumerate(self.extraction)]
        named += [
            ('interp1', self.interp1),
            ('bcn.hidden', self.bcn_hidden),
            ('bcn.out', self.bcn_out),
            ('interp2', self.interp2),
            ('rcn.hidden', self.rcn_hidden),
            ('rcn.out', self.rcn_out),
            ('fusion', self.fusion),
        ]
        return named

    def layer(self, name):
        return dict(self.layers())[name]

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Copy with every kernel and bias cast to dtype."""
        params = self.copy()
        for _, spec in params.layers():
            spec.kernels = spec.kernels.astype(dtype)
            if spec.bias is not None:
                spec.bias = spec.bias.astype(dtype)
        return params

    @property
    def scale(self):
        return self.config.scale


@dataclass
class ForwardOutputs:
    inter_hr: np.ndarray
    boundary: np.ndarray
    residual: np.ndarray
    y: np.ndarray


@dataclass
class Trace:
    """Activations kept by forward() for the reverse pass."""
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    shared: Optional[np.ndarray] = None
    interp1_pre: Optional[np.ndarray] = None
    bcn_input: Optional[np.ndarray] = None
    bcn_hidden_pre: Optional[np.ndarray] = None
    bcn_hidden_act: Optional[np.ndarray] = None
    interp2_pre: Optional[np.ndarray] = None
    rcn_input: Optional[np.ndarray] = None
    rcn_hidden_pre: Optional[np.ndarray] = None
    rcn_hidden_act: Optional[np.ndarray] = None
    inter_hr: Optional[np.ndarray] = None


def layer_group(name):
    if name.startswith('extract.') or name in ('interp1', 'interp2'):
        return 'W_s'
    if name.startswith('bcn.'):
        return 'W_h'
    if name.startswith('rcn.'):
        return 'W_d'
    if name == 'fusion':
        return 'f'
    raise InvalidArgument("unknown layer %r" % name)


def receptive_field(config):
    return 1 + sum(k - 1 for k, _ in EXTRACTION_LAYERS[config.profile])


def build_network(config):
    """
    Allocates zero-filled layers with the shapes of the chosen profile. The
    interpolators use 8x8 / 11x11 / 16x16 kernels for scales 2 / 3 / 4.
    """
    extraction = []
    channels = 1
    for k, out in EXTRACTION_LAYERS[config.profile]:
        out = config.width(out)
        extraction.append(ConvSpec.zeros(channels, out, k))
        channels = out
    n = DECONV_KERNEL_SIZES[config.scale]

    def branch(layers):
        specs, width = [], channels
        for k, out in layers:
            # the output layers keep their channel counts
            out = out if out <= 2 else config.width(out)
            specs.append(ConvSpec.zeros(width, out, k))
            width = out
        return specs

    bcn_hidden, bcn_out = branch(BCN_LAYERS)
    rcn_hidden, rcn_out = branch(RCN_LAYERS)
    return NetworkParams(
        config=config,
        extraction=extraction,
        interp1=DeconvSpec.zeros(channels, channels, n, config.scale,
                                 border='replicate'),
        bcn_hidden=bcn_hidden,
        bcn_out=bcn_out,
        interp2=DeconvSpec.zeros(channels, channels, n, config.scale,
                                 border='replicate'),
        rcn_hidden=rcn_hidden,
        rcn_out=rcn_out,
        fusion=ConvSpec.zeros(1, 1, 3, bias=False),
    )


def parameter_count(params, include_fusion=False, include_bias=False):
    """
    Number of learnable values. The default counts kernel weights only and
    leaves out the fusion filter, the same accounting as the published
    layer table (60,436 for the common profile at scale 3).
    """
    total = 0
    for name, spec in params.layers():
        if name == 'fusion' and not include_fusion:
            continue
        total += spec.kernels.size
        if include_bias and spec.bias is not None:
            total += spec.bias.size
    return total


def partition(params):
    """
    Maps each group of GROUPS to the (layer name, output channel) slices it
    owns; channel is None when the group owns the whole layer.
    """
    groups = dict((g, []) for g in GROUPS)
    for name, _ in params.layers():
        if name == 'bcn.out':
            groups['W_h'].append((name, 0))
            groups['W_b'].append((name, 1))
        else:
            groups[layer_group(name)].append((name, None))
    return groups


def init_gaussian(params, std, seed):
    """
    Returns a copy whose kernels are drawn i.i.d. from N(0, std^2) and whose
    biases are zero. Deterministic in seed.
    """
    if std <= 0:
        raise InvalidArgument("std must be positive, got %r" % std)
    params = params.copy()
    rng = np.random.default_rng(seed)
    for _, spec in params.layers():
        spec.kernels = rng.normal(0.0, std, size=spec.kernels.shape) \
            .astype(spec.kernels.dtype)
        if spec.bias is not None:
            spec.bias = np.zeros_like(spec.bias)
    return params


def init_deconv_bicubic(scale, channels=8):
    """
    Transposed-convolution kernels that make the layer a bicubic upscaler:
    every in == out slice holds w(dx / s) * w(dy / s) around the anchor tap,
    all other slices are zero.
    """
    if scale not in SCALES:
        raise UnsupportedScale("scale %r is not one of %s" % (scale, SCALES))
    n = DECONV_KERNEL_SIZES[scale]
    anchor = (n - 1) // 2
    taps = bicubic_weight((np.arange(n) - anchor) / float(scale))
    kernel = np.outer(taps, taps)
    kernels = np.zeros((channels, channels, n, n), dtype=np.float32)
    for c in range(channels):
        kernels[c, c] = kernel
    return kernels


def he_normal(spec, rng):
    """
    Redraws a layer's kernels from N(0, 2 / fan_in) and zeroes its bias. A
    transposed convolution's fan-in counts the taps that land on one output
    sample, (n / s)^2 per input channel.
    """
    n = spec.kernel_size
    if isinstance(spec, DeconvSpec):
        fan_in = spec.in_channels * (n / float(spec.stride)) ** 2
    else:
        fan_in = spec.in_channels * n * n
    spec.kernels = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                              size=spec.kernels.shape) \
        .astype(spec.kernels.dtype)
    if spec.bias is not None:
        spec.bias = np.zeros_like(spec.bias)


def copy_channel_zero(spec):
    """Makes output channel 0 of a conv layer repeat its input channel 0."""
    spec.kernels[0] = 0
    k = spec.kernel_size
    spec.kernels[0, 0, k // 2, k // 2] = 1


def init_passthrough(params, seed):
    """
    Returns a copy that starts out as a bicubic upscaler. Kernels come from
    he_normal(), then channel 0 of every extraction layer and of bcn.hidden
    copies channel 0 of its input, so the LR luminance reaches the
    interpolators untouched, and bcn.out emits that channel as the
    intermediate image. The boundary row of bcn.out and the whole rcn.out
    layer start at zero.
    """
    params = params.copy()
    rng = np.random.default_rng(seed)
    for _, spec in params.layers():
        he_normal(spec, rng)
    for spec in params.extraction + [params.bcn_hidden, params.bcn_out]:
        copy_channel_zero(spec)
    params.bcn_out.kernels[1] = 0
    params.rcn_out.kernels[...] = 0
    return params


def init_network(config):
    """
    A ready-to-train network with bicubic interpolators (unless
    config.deconv_init is "gaussian") and a fusion filter that starts as the
    identity. The default "passthrough" init makes the untrained network
    reproduce bicubic upscaling; "gaussian" draws every kernel from
    N(0, config.init_std^2).
    """
    params = build_network(config)
    if config.init == 'gaussian':
        params = init_gaussian(params, config.init_std, config.seed)
    else:
        params = init_passthrough(params, config.seed)
    if config.deconv_init == 'bicubic':
        for spec in (params.interp1, params.interp2):
            spec.kernels = init_deconv_bicubic(
                config.scale, spec.in_channels).astype(spec.kernels.dtype)
    fusion = np.zeros_like(params.fusion.kernels)
    fusion[0, 0, 1, 1] = 1
    params.fusion.kernels = fusion
    return params


def disable_rcn(params):
    """
    Zeroes the residue branch's output layer in place, so the residual is
    identically zero and y reduces to the filtered intermediate image.
    """
    params.rcn_out.kernels[...] = 0
    params.rcn_out.bias[...] = 0
    return params


def _run(index, name, op, *args):
    try:
        return op(*args)
    except NumericFailure as e:
        raise NumericFailure("layer %i (%s): %s" % (index, name, e),
                             layer=index, tensor=name)


def forward(params, lr, keep_trace=False):
    """
    Runs the whole network on an LR luminance tensor (1, H, W) or a batch
    (N, 1, H, W). Returns ForwardOutputs, or (ForwardOutputs, Trace) with
    keep_trace.
    """
    x = np.asarray(lr)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[np.newaxis]
    if x.ndim != 4 or x.shape[1] != 1:
        raise InvalidArgument(
            "network input must be (1, H, W) or (N, 1, H, W), got %s"
            % (x.shape,))
    minimum = receptive_field(params.config)
    if x.shape[2] < minimum or x.shape[3] < minimum:
        raise InvalidArgument(
            "input %ix%i is smaller than the %ix%i receptive field"
            % (x.shape[2], x.shape[3], minimum, minimum))

    trace = Trace()
    index = 0
    a = x
    for index, spec in enumerate(params.extraction):
        name = 'extract.%i' % index
        trace.inputs.append(a)
        z = _run(index, name, conv2d, a, spec)
        trace.pre.append(z)
        a = relu(z)
    trace.shared = a

    index = len(params.extraction)
    trace.interp1_pre = _run(index, 'interp1', deconv2d, a, params.interp1)
    trace.bcn_input = relu(trace.interp1_pre)
    trace.bcn_hidden_pre = _run(index + 1, 'bcn.hidden', conv2d,
                                trace.bcn_input, params.bcn_hidden)
    trace.bcn_hidden_act = relu(trace.bcn_hidden_pre)
    bcn = _run(index + 2, 'bcn.out', conv2d, trace.bcn_hidden_act,
               params.bcn_out)
    inter_hr = np.ascontiguousarray(bcn[:, 0:1])
    boundary = np.ascontiguousarray(bcn[:, 1:2])

    trace.interp2_pre = _run(index + 3, 'interp2', deconv2d, a, params.interp2)
    trace.rcn_input = relu(trace.interp2_pre)
    trace.rcn_hidden_pre = _run(index + 4, 'rcn.hidden', conv2d,
                                trace.rcn_input, params.rcn_hidden)
    trace.rcn_hidden_act = relu(trace.rcn_hidden_pre)
    residual = _run(index + 5, 'rcn.out', conv2d, trace.rcn_hidden_act,
                    params.rcn_out)

    trace.inter_hr = inter_hr
    y = _run(index + 6, 'fusion', conv2d, inter_hr, params.fusion) + residual

    outputs = ForwardOutputs(inter_hr, boundary, residual, y)
    if squeeze:
        outputs = ForwardOutputs(*(o[0] for o in (inter_hr, boundary,
                                                  residual, y)))
    if keep_trace:
        return outputs, trace
    return outputs


def _batched(grad):
    if grad is None:
        return None
    grad = np.asarray(grad)
    return grad[np.newaxis] if grad.ndim == 3 else grad


def backward(params, trace, d_inter=None, d_boundary=None, d_residual=None,
             d_y=None, trainable=GROUPS):
    """
    Reverse pass from gradients on any of the four outputs. Returns a dict
    layer name -> (grad_kernels, grad_bias) holding only layers of the
    trainable groups; propagation stops where every upstream layer is frozen.
    """
    trainable = set(trainable)
    d_inter, d_boundary = _batched(d_inter), _batched(d_boundary)
    d_residual, d_y = _batched(d_residual), _batched(d_y)
    grads = {}

    if d_y is not None:
        d_fused, g_fusion, _ = conv2d_backward(trace.inter_hr, params.fusion,
                                               d_y)
        if 'f' in trainable:
            grads['fusion'] = (g_fusion, None)
        d_inter = d_fused if d_inter is None else d_inter + d_fused
        d_residual = d_y if d_residual is None else d_residual + d_y

    shared = 'W_s' in trainable
    d_shared = None

    if (d_inter is not None or d_boundary is not None) and \
            trainable & {'W_s', 'W_h', 'W_b'}:
        like = d_inter if d_inter is not None else d_boundary
        d_out = np.concatenate([
            d_inter if d_inter is not None else np.zeros_like(like),
            d_boundary if d_boundary is not None else np.zeros_like(like),
        ], axis=1)
        g, gk, gb = conv2d_backward(trace.bcn_hidden_act, params.bcn_out,
                                    d_out)
        # channel 0 belongs to W_h, channel 1 to W_b
        for channel, group in ((0, 'W_h'), (1, 'W_b')):
            if group not in trainable:
                gk[channel] = 0
                gb[channel] = 0
        grads['bcn.out'] = (gk, gb)
        if trainable & {'W_s', 'W_h'}:
            g = relu_backward(trace.bcn_hidden_pre, g)
            g, gk, gb = conv2d_backward(trace.bcn_input, params.bcn_hidden, g)
            if 'W_h' in trainable:
                grads['bcn.hidden'] = (gk, gb)
            if shared:
                g = relu_backward(trace.interp1_pre, g)
                g, gk, gb = deconv2d_backward(trace.shared, params.interp1, g)
                grads['interp1'] = (gk, gb)
                d_shared = g

    if d_residual is not None and trainable & {'W_s', 'W_d'}:
        g, gk, gb = conv2d_backward(trace.rcn_hidden_act, params.rcn_out,
                                    d_residual)
        if 'W_d' in trainable:
            grads['rcn.out'] = (gk, gb)
        g = relu_backward(trace.rcn_hidden_pre, g)
        g, gk, gb = conv2d_backward(trace.rcn_input, params.rcn_hidden, g)
        if 'W_d' in trainable:
            grads['rcn.hidden'] = (gk, gb)
        if shared:
            g = relu_backward(trace.interp2_pre, g)
            g, gk, gb = deconv2d_backward(trace.shared, params.interp2, g)
            grads['interp2'] = (gk, gb)
            d_shared = g if d_shared is None else d_shared + g

    if shared and d_shared is not None:
        g = d_shared
        for i in reversed(range(len(params.extraction))):
            g = relu_backward(trace.pre[i], g)
            g, gk, gb = conv2d_backward(trace.inputs[i], params.extraction[i],
                                        g)
            grads['extract.%i' % i] = (gk, gb)
    return grads


def save_model(params, path):
    config = params.config
    if config.channel_cap is not None:
        raise InvalidArgument("reduced-width networks cannot be saved")
    entries = []
    for name, spec in params.layers():
        entries.append((name + '.kernels', spec.kernels))
        if spec.bias is not None:
            entries.append((name + '.bias', spec.bias))
    records.write_records(path, config.scale,
                          PROFILES.index(config.profile), entries)


def load_model(path):
    """
    Reads a model file written by save_model(). Every record must exist and
    match the shape implied by the file's scale and profile.
    """
    scale, profile, stored = records.read_records(path)
    if scale not in SCALES:
        raise UnsupportedScale("model file has unsupported scale %i" % scale)
    if profile >= len(PROFILES):
        raise CorruptModel("unknown profile byte %i" % profile,
                           record='<header>')
    params = build_network(NetworkConfig(scale=scale,
                                         profile=PROFILES[profile]))
    expected = set()
    for name, spec in params.layers():
        for field_name in ('kernels', 'bias'):
            current = getattr(spec, field_name)
            if current is None:
                continue
            key = '%s.%s' % (name, field_name)
            expected.add(key)
            if key not in stored:
                raise CorruptModel("record %r is missing" % key, record=key)
            if stored[key].shape != current.shape:
                raise CorruptModel(
                    "record %r has shape %s, expected %s"
                    % (key, stored[key].shape, current.shape), record=key)
            setattr(spec, field_name, stored[key].copy())
    unexpected = [k for k in stored if k not in expected]
    if unexpected:
        raise CorruptModel("unexpected record %r" % unexpected[0],
                           record=unexpected[0])
    log.debug("loaded %s: scale %i, %s profile", path, scale,
              PROFILES[profile])
    return params
