"""
Baselines for the interpolation studies.

FCN-k upscales the LR image bicubically and refines it with k plain 3x3
convolutions at HR resolution. The interpolation network is the network cut
down to extraction, first interpolator and boundary branch, trained on the HR
loss alone. The deconv study trains one transposed convolution that starts
as a bicubic upscaler, to see where the learned kernel departs from it.
"""
import copy
import dataclasses
import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from cmsr.exceptions import InvalidArgument, UnsupportedScale
from cmsr.imaging import resize_weights
from cmsr.network import (SCALES, copy_channel_zero, he_normal,
                          init_deconv_bicubic, init_network)
from cmsr.tensor import (ConvSpec, DeconvSpec, conv2d, conv2d_backward,
                         deconv2d, deconv2d_backward, relu, relu_backward)
from cmsr.training import (LossConfig, TrainConfig, TrainLog, check_dataset,
                           descend, loss_image, stack_triplets, train)


log = logging.getLogger(__name__)

FCN_DEPTHS = (5, 9, 12, 16)
FCN_WIDTH = 32
FCN_KERNEL = 3

STUDIES = ('fcn', 'deconv')

"""
Layers the interpolation network keeps: everything on the path from the LR
input to the intermediate image.
"""
INTERPOLATION_LAYERS = ('interp1', 'bcn.hidden', 'bcn.out')


@dataclass
class FCNParams:
    scale: int
    convs: List[ConvSpec]

    def layers(self):
        return [('fcn.%i' % i, spec) for i, spec in enumerate(self.convs)]

    def layer(self, name):
        return dict(self.layers())[name]

    def copy(self):
        return copy.deepcopy(self)

    @property
    def depth(self):
        return len(self.convs)


@dataclass
class DeconvStudy:
    deconv: DeconvSpec

    def layers(self):
        return [('deconv', self.deconv)]

    def layer(self, name):
        return dict(self.layers())[name]

    @property
    def scale(self):
        return self.deconv.stride


def _check_scale(scale):
    if scale not in SCALES:
        raise UnsupportedScale("scale %r is not one of %s" % (scale, SCALES))


def upscale_batch(lr, scale):
    """Bicubic upscaling of every plane of an (N, C, h, w) batch."""
    lr = np.asarray(lr)
    height, width = lr.shape[-2:]
    rows = resize_weights(height, height * scale, scale)
    cols = resize_weights(width, width * scale, scale)
    return (rows @ lr.astype(np.float64) @ cols.T).astype(lr.dtype)


def build_fcn(scale, depth, width=FCN_WIDTH, seed=0):
    """
    An FCN-depth network: depth 3x3 convolutions, width channels between
    them, ReLU after all but the last. Kernels come from he_normal() with
    channel 0 copied straight through, so the untrained network returns its
    bicubic input.
    """
    _check_scale(scale)
    if depth < 2:
        raise InvalidArgument("an FCN needs at least 2 layers, got %r"
                              % depth)
    rng = np.random.default_rng(seed)
    convs, channels = [], 1
    for i in range(depth):
        out = 1 if i == depth - 1 else width
        spec = ConvSpec.zeros(channels, out, FCN_KERNEL)
        he_normal(spec, rng)
        copy_channel_zero(spec)
        convs.append(spec)
        channels = out
    return FCNParams(scale=scale, convs=convs)


def fcn_forward(params, lr, keep_trace=False):
    """
    Runs an (N, 1, h, w) LR batch through the FCN. The trace holds the
    input and pre-activation of every layer.
    """
    a = upscale_batch(lr, params.scale)
    inputs, pre = [], []
    last = params.depth - 1
    for i, spec in enumerate(params.convs):
        inputs.append(a)
        z = conv2d(a, spec)
        pre.append(z)
        a = z if i == last else relu(z)
    if keep_trace:
        return a, (inputs, pre)
    return a


def fcn_backward(params, trace, d_y):
    inputs, pre = trace
    grads = {}
    g = d_y
    for i in reversed(range(params.depth)):
        if i < params.depth - 1:
            g = relu_backward(pre[i], g)
        g, gk, gb = conv2d_backward(inputs[i], params.convs[i], g)
        grads['fcn.%i' % i] = (gk, gb)
    return grads


def fcn_step(params, lr, hr):
    y, trace = fcn_forward(params, lr, keep_trace=True)
    loss = loss_image(y, hr)
    return loss, fcn_backward(params, trace, loss.grads['y'])


def build_deconv_study(scale):
    _check_scale(scale)
    return DeconvStudy(deconv=DeconvSpec(
        kernels=init_deconv_bicubic(scale, channels=1), stride=scale,
        bias=np.zeros(1, dtype=np.float32), border='replicate'))


def deconv_forward(study, lr):
    return deconv2d(lr, study.deconv)


def deconv_step(study, lr, hr):
    loss = loss_image(deconv_forward(study, lr), hr)
    _, gk, gb = deconv2d_backward(lr, study.deconv, loss.grads['y'])
    return loss, {'deconv': (gk, gb)}


def fit(model, dataset, step, config=None, last_layer=None):
    """
    Trains a single-output model in place on mean((hr - prediction)^2) for
    config.iterations momentum SGD steps. step(model, lr, hr) returns
    (Loss, grads). last_layer trains at lr_last, every other layer at
    lr_rest, both times the config's rate gain. Returns (model, TrainLog).
    """
    config = config or TrainConfig()
    check_dataset(dataset)
    lr_all, hr_all, _ = stack_triplets(dataset)
    gain = config.gain(dataset[0].lr)
    rates = dict((name, (config.lr_last if name == last_layer
                         else config.lr_rest) * gain)
                 for name, _ in model.layers())
    train_log = TrainLog()
    descend(model, lambda picked: step(model, lr_all[picked], hr_all[picked]),
            len(dataset), config.iterations, rates, config,
            np.random.default_rng(config.seed), train_log)
    log.info("%s trained for %i iterations, final loss %.6g",
             type(model).__name__, config.iterations,
             train_log.column('loss_total')[-1] if train_log.rows
             else float('nan'))
    return model, train_log


def train_fcn(dataset, depth, config=None, width=FCN_WIDTH, seed=0):
    check_dataset(dataset)
    params = build_fcn(dataset[0].scale, depth, width, seed)
    return fit(params, dataset, fcn_step, config,
               last_layer='fcn.%i' % (depth - 1))


def train_deconv_study(dataset, config=None):
    check_dataset(dataset)
    study = build_deconv_study(dataset[0].scale)
    return fit(study, dataset, deconv_step, config)


def train_interpolation_network(dataset, network_config, config=None):
    """
    Stage 1 only, without the boundary term and with the residue branch
    zeroed, so the network's output is the intermediate image.
    """
    config = dataclasses.replace(config or TrainConfig(), use_rcn=False)
    params = init_network(network_config)
    return train(params, dataset, config, LossConfig(alpha=0.0),
                 stages=(1,))


def interpolation_layers(params):
    return [name for name, _ in params.layers()
            if name.startswith('extract.') or name in INTERPOLATION_LAYERS]


def layer_count(model):
    """Number of convolution and transposed-convolution layers used."""
    if isinstance(model, (FCNParams, DeconvStudy)):
        return len(model.layers())
    return len(interpolation_layers(model))


def weight_count(model):
    if isinstance(model, (FCNParams, DeconvStudy)):
        return sum(spec.kernels.size for _, spec in model.layers())
    return sum(model.layer(name).kernels.size
               for name in interpolation_layers(model))
