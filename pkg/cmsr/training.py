"""
Losses, momentum SGD with per-layer learning rates, and the three-stage
training schedule:

  1. extraction, interpolators and the boundary branch on
     L = L_h + alpha * L_b;
  2. the residue branch alone on L_d, everything else frozen;
  3. every parameter (fusion included) on the final-image loss.
"""
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from cmsr import metrics, records, settings
from cmsr.exceptions import (CorruptModel, Divergence, InvalidArgument,
                             NumericFailure)
from cmsr.imaging import TrainingTriplet
from cmsr.network import GROUPS, backward, disable_rcn, forward, layer_group


log = logging.getLogger(__name__)

LOG_FIELDS = ('iter', 'stage', 'loss_h', 'loss_b', 'loss_d', 'loss_total',
              'val_psnr')

"""
Samples per gradient chunk. Chunk boundaries do not depend on the number of
worker threads, so seeded runs agree across machines.
"""
CHUNK_SIZE = 16

STAGE_GROUPS = {
    1: ('W_s', 'W_h', 'W_b'),
    2: ('W_d',),
    3: GROUPS,
}

"""
Output layer of the active head per stage; it trains at lr_last.
"""
LAST_LAYER = {1: 'bcn.out', 2: 'rcn.out', 3: 'fusion'}

"""
Profile byte marking a record file as a patch archive rather than a model.
"""
PATCH_ARCHIVE = 0xFF


@dataclass
class LossConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgument("alpha must be non-negative")


@dataclass
class TrainConfig:
    lr_last: float = 1e-5
    lr_rest: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    iterations: int = 50000
    stage3_iterations: Optional[int] = None
    stage3_lr_scale: float = 0.1
    use_rcn: bool = True
    seed: int = 0
    deterministic: bool = True
    workers: int = settings.CMSR_THREADS
    val_every: int = 100
    log_every: int = 100
    divergence_limit: float = settings.CMSR_DIVERGENCE_LIMIT
    rate_gain: Optional[float] = None

    def __post_init__(self):
        if self.lr_last <= 0 or self.lr_rest <= 0:
            raise InvalidArgument("learning rates must be positive")
        if self.lr_last > self.lr_rest:
            raise InvalidArgument("lr_last must not exceed lr_rest")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be positive")
        if self.iterations < 0:
            raise InvalidArgument("iterations must be non-negative")
        if self.rate_gain is not None and self.rate_gain <= 0:
            raise InvalidArgument("rate_gain must be positive")

    @property
    def stage3_iters(self):
        if self.stage3_iterations is None:
            return self.iterations
        return self.stage3_iterations

    def gain(self, patch):
        """
        Multiplier applied to lr_last and lr_rest for LR patches shaped like
        patch. Unless rate_gain is set it is the patch's pixel count, so
        the rates act on the squared error summed over the LR footprint
        rather than on the per-pixel mean the losses report.
        """
        if self.rate_gain is not None:
            return float(self.rate_gain)
        return float(np.prod(np.shape(patch)))


@dataclass
class Loss:
    """Scalar objective, its named terms, and gradients per output."""
    value: float
    terms: Dict[str, float]
    grads: Dict[str, np.ndarray]


@dataclass
class TrainLog:
    rows: List[tuple] = field(default_factory=list)

    def record(self, iteration, stage, loss_h=None, loss_b=None, loss_d=None,
               loss_total=None, val_psnr=None):
        if self.rows and iteration <= self.rows[-1][0]:
            raise InvalidArgument(
                "iteration %i does not follow %i"
                % (iteration, self.rows[-1][0]))
        self.rows.append((iteration, stage, loss_h, loss_b, loss_d,
                          loss_total, val_psnr))

    def column(self, name, stage=None):
        index = LOG_FIELDS.index(name)
        return [row[index] for row in self.rows
                if stage is None or row[1] == stage]

    def to_csv(self):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(LOG_FIELDS)
        for row in self.rows:
            writer.writerow([_format_value(v) for v in row])
        return out.getvalue()

    def write(self, path):
        with open(path, 'w') as f:
            f.write(self.to_csv())


def _format_value(value):
    if value is None:
        return ''
    if isinstance(value, float):
        if value == float('inf'):
            return 'inf'
        return '%.9g' % value
    return str(value)


def _check_shapes(pred, target, what):
    if np.shape(pred) != np.shape(target):
        raise InvalidArgument(
            "%s shape %s does not match prediction %s"
            % (what, np.shape(target), np.shape(pred)))


def _mse(pred, target):
    diff = pred - target
    return float(np.mean(np.square(diff, dtype=np.float64))), \
        (2.0 / diff.size) * diff


def _per_sample_boundaries(boundary, targets):
    """
    Lines the boundary targets up with the (N, 1, H, W) prediction as a list
    of (m, H, W) arrays, one per sample.
    """
    if isinstance(targets, np.ndarray) and targets.ndim == 4:
        targets = list(targets)
    elif isinstance(targets, np.ndarray) and targets.ndim in (2, 3) and \
            boundary.shape[0] == 1:
        targets = [targets]
    elif not isinstance(targets, np.ndarray) and boundary.shape[0] == 1 and \
            all(np.ndim(t) == 2 for t in targets):
        targets = [np.stack(targets)]
    targets = [np.asarray(t) for t in targets]
    if len(targets) != boundary.shape[0]:
        raise InvalidArgument(
            "%i boundary targets for %i predictions"
            % (len(targets), boundary.shape[0]))
    out = []
    for t in targets:
        if t.ndim == 2:
            t = t[np.newaxis]
        if t.shape[1:] != boundary.shape[2:] or t.shape[0] < 1:
            raise InvalidArgument(
                "boundary target shape %s does not match prediction %s"
                % (t.shape, boundary.shape[1:]))
        out.append(t)
    return out


def loss_stage1(outputs, hr, boundaries, alpha=1.0):
    """
    L = mean((hr - inter_hr)^2) + alpha * L_b, where L_b averages, over the
    samples, the mean of the per-map MSEs between the predicted boundary and
    each of that sample's boundary maps.
    """
    _check_shapes(outputs.inter_hr, hr, 'HR target')
    loss_h, d_inter = _mse(outputs.inter_hr, hr)

    unbatched = outputs.boundary.ndim == 3
    boundary = outputs.boundary[np.newaxis] if unbatched \
        else outputs.boundary
    per_sample = _per_sample_boundaries(boundary, boundaries)
    count = len(per_sample)
    loss_b = 0.0
    d_boundary = np.zeros_like(boundary)
    for n, targets in enumerate(per_sample):
        diff = boundary[n] - targets
        loss_b += float(np.mean(np.square(diff, dtype=np.float64))) / count
        d_boundary[n] = (2.0 / (diff.size * count)) * diff.sum(
            axis=0, keepdims=True)
    if unbatched:
        d_boundary = d_boundary[0]

    return Loss(
        value=loss_h + alpha * loss_b,
        terms={'loss_h': loss_h, 'loss_b': loss_b},
        grads={'inter_hr': d_inter,
               'boundary': (alpha * d_boundary).astype(d_boundary.dtype)})


def loss_stage2(outputs, hr):
    """
    L_d = mean((hr - inter_hr - residual)^2); only the residual receives a
    gradient, the intermediate image is a constant here.
    """
    _check_shapes(outputs.residual, hr, 'HR target')
    _check_shapes(outputs.inter_hr, hr, 'HR target')
    loss_d, d_residual = _mse(outputs.residual, hr - outputs.inter_hr)
    return Loss(value=loss_d, terms={'loss_d': loss_d},
                grads={'residual': d_residual})


def loss_image(prediction, hr):
    """L = mean((hr - prediction)^2) for a model with a single output."""
    _check_shapes(prediction, hr, 'HR target')
    loss, d_y = _mse(prediction, hr)
    return Loss(value=loss, terms={}, grads={'y': d_y})


def loss_stage3(outputs, hr):
    """L = mean((hr - y)^2), back-propagated through the fusion layer."""
    return loss_image(outputs.y, hr)


def stage_groups(stage, config):
    groups = set(STAGE_GROUPS[stage])
    if not config.use_rcn:
        groups.discard('W_d')
    return groups


def stage_rates(params, stage, config, gain=1.0):
    """
    Learning rate per layer for a stage, multiplied by gain. Layers left out
    of the mapping are frozen for that stage.
    """
    groups = stage_groups(stage, config)
    scale = gain * (config.stage3_lr_scale if stage == 3 else 1.0)
    rates = {}
    for name, _ in params.layers():
        if layer_group(name) not in groups:
            continue
        if name == LAST_LAYER[stage]:
            rates[name] = config.lr_last * scale
        else:
            rates[name] = config.lr_rest * scale
    return rates


def sgd_step(params, grads, rates, momentum=0.9, velocity=None):
    """
    One momentum SGD update in place:

        v <- momentum * v - lr(layer) * g
        w <- w + v

    Only layers present in both grads and rates move. Returns the velocity
    dict, to be passed back on the next call. Nothing is updated when any
    gradient is non-finite.
    """
    if velocity is None:
        velocity = {}
    for name, (gk, gb) in grads.items():
        for label, g in (('kernels', gk), ('bias', gb)):
            if g is not None and not np.isfinite(g).all():
                raise NumericFailure(
                    "non-finite gradient for %s.%s" % (name, label),
                    tensor='%s.%s' % (name, label))
    for name, (gk, gb) in grads.items():
        if name not in rates:
            continue
        spec = params.layer(name)
        lr = rates[name]
        for label, g in (('kernels', gk), ('bias', gb)):
            if g is None:
                continue
            key = '%s.%s' % (name, label)
            weights = getattr(spec, label)
            v = velocity.get(key)
            if v is None:
                v = np.zeros_like(weights)
            v = (momentum * v - lr * g).astype(weights.dtype)
            velocity[key] = v
            weights += v
    return velocity


def stack_triplets(triplets):
    lr = np.stack([t.lr for t in triplets])[:, np.newaxis].astype(np.float32)
    hr = np.stack([t.hr for t in triplets])[:, np.newaxis].astype(np.float32)
    boundaries = [np.stack(t.boundaries).astype(np.float32) for t in triplets]
    return lr, hr, boundaries


def stage_prediction(outputs, stage):
    """The image a stage is optimizing, used for validation PSNR."""
    if stage == 1:
        return outputs.inter_hr
    if stage == 2:
        return outputs.inter_hr + outputs.residual
    return outputs.y


def _chunk_step(params, lr, hr, boundaries, stage, alpha, trainable):
    outputs, trace = forward(params, lr, keep_trace=True)
    if stage == 1:
        loss = loss_stage1(outputs, hr, boundaries, alpha)
        grads = backward(params, trace, d_inter=loss.grads['inter_hr'],
                         d_boundary=loss.grads['boundary'],
                         trainable=trainable)
    elif stage == 2:
        loss = loss_stage2(outputs, hr)
        grads = backward(params, trace, d_residual=loss.grads['residual'],
                         trainable=trainable)
    else:
        loss = loss_stage3(outputs, hr)
        grads = backward(params, trace, d_y=loss.grads['y'],
                         trainable=trainable)
    return loss, grads


def batch_step(params, lr, hr, boundaries, stage, alpha=1.0,
               trainable=None, workers=1, deterministic=True):
    """
    Loss terms and gradients of one batch. The batch is cut into chunks of
    CHUNK_SIZE samples that may run on several threads; with deterministic
    set the chunk results are reduced in chunk order.
    """
    if trainable is None:
        trainable = STAGE_GROUPS[stage]
    total = lr.shape[0]
    bounds = list(range(0, total, CHUNK_SIZE)) + [total]
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def run(chunk):
        lo, hi = chunk
        return chunk, _chunk_step(params, lr[lo:hi], hr[lo:hi],
                                  boundaries[lo:hi], stage, alpha, trainable)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(chunks))) as ex:
            futures = [ex.submit(run, c) for c in chunks]
            if deterministic:
                results = [f.result() for f in futures]
            else:
                results = [f.result() for f in as_completed(futures)]
    else:
        results = [run(c) for c in chunks]

    value, terms, grads = 0.0, {}, {}
    for (lo, hi), (loss, chunk_grads) in results:
        weight = (hi - lo) / float(total)
        value += weight * loss.value
        for name, term in loss.terms.items():
            terms[name] = terms.get(name, 0.0) + weight * term
        for name, (gk, gb) in chunk_grads.items():
            gk = weight * gk
            gb = None if gb is None else weight * gb
            if name in grads:
                prev_k, prev_b = grads[name]
                gk = prev_k + gk
                gb = None if gb is None else prev_b + gb
            grads[name] = (gk, gb)
    return Loss(value=value, terms=terms, grads={}), grads


def validation_psnr(params, validation, stage):
    if not validation:
        return None
    scores = []
    for triplet in validation:
        outputs = forward(params, triplet.lr[np.newaxis].astype(np.float32))
        prediction = stage_prediction(outputs, stage)[0]
        scores.append(metrics.psnr(metrics.EvalPair(
            triplet.hr, prediction, shave=params.scale)))
    finite = [s for s in scores if np.isfinite(s)]
    if not finite:
        return float('inf')
    return float(np.mean(finite))


def check_dataset(dataset):
    if not dataset:
        raise InvalidArgument("empty dataset")
    shapes = set((t.lr.shape, t.hr.shape) for t in dataset)
    if len(shapes) != 1:
        raise InvalidArgument(
            "training patches must share one size, got %s" % sorted(shapes))


def descend(params, step, population, count, rates, config, rng, train_log,
            stage=1, iteration=0, validate=None):
    """
    Runs count momentum SGD iterations on params. step(picked) returns
    (Loss, grads) for a sorted array of indices below population, drawn
    without replacement from rng. validate() is called every
    config.val_every steps and on the last one. Every iteration is recorded
    in train_log. Returns the number of the last iteration.
    """
    velocity = {}
    for n in range(1, count + 1):
        iteration += 1
        size = min(config.batch_size, population)
        picked = np.sort(rng.choice(population, size=size, replace=False))
        batch_loss, grads = step(picked)
        if not np.isfinite(batch_loss.value) or \
                batch_loss.value > config.divergence_limit:
            raise Divergence(
                "stage %i diverged at iteration %i (loss %r)"
                % (stage, iteration, batch_loss.value))
        velocity = sgd_step(params, grads, rates, config.momentum, velocity)

        val = None
        if validate is not None and config.val_every and \
                (n % config.val_every == 0 or n == count):
            val = validate()
        terms = batch_loss.terms
        train_log.record(iteration, stage,
                         loss_h=terms.get('loss_h'),
                         loss_b=terms.get('loss_b'),
                         loss_d=terms.get('loss_d'),
                         loss_total=batch_loss.value,
                         val_psnr=val)
        if config.log_every and n % config.log_every == 0:
            log.info("stage %i iteration %i: loss %.6g", stage, n,
                     batch_loss.value)
    return iteration


def train(params, dataset, config=None, loss=None, validation=(),
          on_stage_end=None, stages=None):
    """
    Runs the three training stages on a list of TrainingTriplet patches and
    returns (params, TrainLog). params is trained in place.

    on_stage_end(stage, params) is called after each stage, which is where
    callers checkpoint. With config.use_rcn off the residue branch is zeroed,
    stage 2 is skipped and the branch stays frozen. stages, when given,
    restricts the schedule to those stage numbers.
    """
    config = config or TrainConfig()
    loss = loss or LossConfig()
    check_dataset(dataset)
    lr_all, hr_all, boundaries_all = stack_triplets(dataset)
    rng = np.random.default_rng(config.seed)
    train_log = TrainLog()
    iteration = 0
    gain = config.gain(dataset[0].lr)

    if not config.use_rcn:
        disable_rcn(params)

    schedule = [(1, config.iterations)]
    if config.use_rcn:
        schedule.append((2, config.iterations))
    schedule.append((3, config.stage3_iters))
    if stages is not None:
        schedule = [(s, n) for s, n in schedule if s in stages]

    for stage, iterations in schedule:
        rates = stage_rates(params, stage, config, gain)
        trainable = stage_groups(stage, config)
        log.info("stage %i: %i iterations, %i trainable layers, gain %g",
                 stage, iterations, len(rates), gain)

        def step(picked, stage=stage, trainable=trainable):
            return batch_step(
                params, lr_all[picked], hr_all[picked],
                [boundaries_all[i] for i in picked], stage,
                alpha=loss.alpha, trainable=trainable,
                workers=config.workers, deterministic=config.deterministic)

        def validate(stage=stage):
            return validation_psnr(params, validation, stage)

        iteration = descend(params, step, len(dataset), iterations, rates,
                            config, rng, train_log, stage, iteration,
                            validate)
        if on_stage_end is not None:
            on_stage_end(stage, params)
    return params, train_log


def save_patches(path, patches, scale):
    """
    Writes a patch archive: records lr/<i>, hr/<i> and b/<i>/<j> in the model
    file container, with the profile byte set to PATCH_ARCHIVE.
    """
    entries = []
    for i, p in enumerate(patches):
        entries.append(('lr/%i' % i, p.lr))
        entries.append(('hr/%i' % i, p.hr))
        entries.extend(('b/%i/%i' % (i, j), b)
                       for j, b in enumerate(p.boundaries))
    records.write_records(path, scale, PATCH_ARCHIVE, entries)


def load_patches(path):
    """Returns (scale, patches) from a file written by save_patches()."""
    scale, profile, stored = records.read_records(path)
    if profile != PATCH_ARCHIVE:
        raise CorruptModel("%s is not a patch archive" % path,
                           record='<header>')
    lr, hr, boundaries = {}, {}, {}
    for name, array in stored.items():
        parts = name.split('/')
        try:
            index = int(parts[1])
            if parts[0] == 'lr' and len(parts) == 2:
                lr[index] = array
            elif parts[0] == 'hr' and len(parts) == 2:
                hr[index] = array
            elif parts[0] == 'b' and len(parts) == 3:
                boundaries.setdefault(index, {})[int(parts[2])] = array
            else:
                raise ValueError(name)
        except (IndexError, ValueError):
            raise CorruptModel("unexpected record %r" % name, record=name)
    patches = []
    for i in range(len(lr)):
        if i not in lr or i not in hr or i not in boundaries:
            raise CorruptModel("patch %i is incomplete" % i,
                               record='lr/%i' % i)
        maps = boundaries[i]
        patches.append(TrainingTriplet(
            lr=lr[i], hr=hr[i],
            boundaries=[maps[j] for j in sorted(maps)]))
    if len(hr) != len(patches) or len(boundaries) != len(patches):
        raise CorruptModel("patch archive has unpaired records",
                           record='<trailer>')
    if patches and patches[0].scale != scale:
        raise CorruptModel("patches do not match scale %i" % scale,
                           record='lr/0')
    return scale, patches
