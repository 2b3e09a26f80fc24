"""
The cmsr command: corpus, dataset, train, sr, eval, inspect-kernels and
ablate.

Exit codes are 0 on success, 2 for bad input (arguments, manifests, image or
model files) and 3 when training or inference hits a numeric failure.
"""
import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from cmsr import (__version__, ablation, imaging, metrics, network, settings,
                  training)
from cmsr.config import echo_config, load_config
from cmsr.exceptions import (CorruptModel, EmptyMask, InvalidArgument,
                             MissingFiles, NumericFailure)


log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

TRAIN_LOG = 'train_log.csv'
EVAL_REPORT = 'eval.csv'
KERNEL_CSV = 'kernels.csv'
ABLATION_REPORT = 'ablation.csv'
ABLATION_FIELDS = ('model', 'layers', 'weights', 'psnr', 'ssim', 'epsnr')


def configure_logging(verbose=False):
    level = logging.DEBUG if verbose else \
        getattr(logging, settings.CMSR_LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def super_resolve_plane(params, plane):
    """Runs one [0, 1] luminance plane through the network; unclamped."""
    lr = np.asarray(plane, dtype=np.float32)[np.newaxis]
    return network.forward(params, lr).y[0]


def upscale_ycbcr(params, image):
    """
    Upscales an 8-bit grayscale or RGB array. Returns (Y, Cb, Cr) planes in
    [0, 1], unclamped; Cb and Cr are None for grayscale input. Only the
    luminance goes through the network, chroma is resized bicubically.
    """
    image = np.asarray(image)
    scale = params.scale
    if image.ndim == 2:
        return super_resolve_plane(params, image / 255.0), None, None
    y, cb, cr = imaging.rgb_to_ycbcr(image)
    return (super_resolve_plane(params, y),
            imaging.resize_bicubic(cb, scale),
            imaging.resize_bicubic(cr, scale))


def _check_scale(args, params):
    if args.scale is not None and args.scale != params.scale:
        raise InvalidArgument(
            "model is for scale %i but --scale %i was given"
            % (params.scale, args.scale))


def cmd_corpus(config, args):
    """
    Writes a synthetic corpus: count PNG images under <out>/corpus, the
    first count - held_out listed in train.txt, the rest in test.txt.
    """
    if args.held_out >= args.count:
        raise InvalidArgument("--held-out must be smaller than --count")
    rng = np.random.default_rng(config.network.seed)
    folder = os.path.join(config.run.out, 'corpus')
    os.makedirs(folder, exist_ok=True)
    names = []
    for i in range(args.count):
        name = 'synthetic_%03i.png' % i
        imaging.write_png(os.path.join(folder, name),
                          imaging.synthetic_image(rng, args.size))
        names.append(os.path.join('corpus', name))
    split = args.count - args.held_out
    for manifest, chosen in (('train.txt', names[:split]),
                             ('test.txt', names[split:])):
        with open(os.path.join(config.run.out, manifest), 'w') as f:
            f.write('# synthetic corpus, seed %i\n' % config.network.seed)
            f.writelines(name + '\n' for name in chosen)
    print("%i images written to %s" % (args.count, folder))


def cmd_dataset(config, args):
    manifest = imaging.load_manifest(
        args.manifest or config.data.manifest, scale=config.network.scale,
        augment=config.data.augment, patch_size=config.data.patch_size,
        stride=config.data.stride)
    patches = imaging.build_patches(manifest)
    path = config.patches_path()
    training.save_patches(path, patches, manifest.scale)
    if patches:
        lr, hr = patches[0].lr.shape, patches[0].hr.shape
        print("%i triplets, LR %ix%i, HR %ix%i -> %s"
              % (len(patches), lr[0], lr[1], hr[0], hr[1], path))
    else:
        print("0 triplets -> %s" % path)
    return patches


def cmd_train(config, args):
    path = args.patches or config.patches_path()
    scale, patches = training.load_patches(path)
    if args.scale is not None and args.scale != scale:
        raise InvalidArgument("%s holds scale %i patches, not %i"
                              % (path, scale, args.scale))
    net_config = config.network
    if net_config.scale != scale:
        net_config = dataclasses.replace(net_config, scale=scale)
    params = network.init_network(net_config)

    validation = []
    if config.data.validation:
        validation = imaging.load_triplets(imaging.load_manifest(
            config.data.validation, scale=scale))

    model_path = config.model_path()

    def checkpoint(stage, params):
        network.save_model(params, model_path)
        log.info("stage %i done, checkpoint written to %s", stage, model_path)

    params, train_log = training.train(
        params, patches, config.training, config.loss,
        validation=validation, on_stage_end=checkpoint)
    train_log.write(os.path.join(config.run.out, TRAIN_LOG))
    print("model written to %s (%i parameters)"
          % (model_path, network.parameter_count(params)))
    return params, train_log


def cmd_sr(config, args):
    params = network.load_model(args.model)
    _check_scale(args, params)
    image = imaging.read_png(args.input)
    minimum = network.receptive_field(params.config)
    if min(image.shape[:2]) < minimum:
        raise InvalidArgument(
            "%s is smaller than %ix%i" % (args.input, minimum, minimum))
    y, cb, cr = upscale_ycbcr(params, image)
    if cb is None:
        imaging.write_png(args.output, y)
    else:
        imaging.write_png(args.output, imaging.ycbcr_to_rgb(y, cb, cr))
    print("%s -> %s (%ix%i)" % (args.input, args.output, y.shape[1],
                                y.shape[0]))
    return y, cb, cr


def _quantized(plane):
    """What a written PNG would hold, back in [0, 1]."""
    return imaging.to_uint8(plane).astype(np.float64) / 255.0


def evaluate_manifest(manifest, params=None, shave=True, predict=None,
                      workers=None):
    """
    Scores every manifest image for the model and for the bicubic baseline,
    in manifest order. Without params the baseline is scored in both columns.
    predict(triplet) -> plane replaces the model when given.
    """
    scale = manifest.scale
    border = scale if shave else 0

    if predict is None and params is not None:
        def predict(triplet):
            return super_resolve_plane(params, triplet.lr)

    def score(entry):
        triplet = imaging.load_entry(entry, scale)
        name = os.path.basename(entry.hr_path)
        hr = _quantized(triplet.hr)
        baseline = _quantized(imaging.resize_bicubic(
            triplet.lr.astype(np.float64), scale))
        prediction = baseline if predict is None \
            else _quantized(predict(triplet))
        return (metrics.evaluate_image(name, hr, prediction,
                                       triplet.boundaries, shave=border),
                metrics.evaluate_image(name, hr, baseline,
                                       triplet.boundaries, shave=border))

    with ThreadPoolExecutor(max_workers=workers or settings.CMSR_THREADS) \
            as executor:
        results = list(executor.map(score, manifest.entries))
    return [m for m, _ in results], [b for _, b in results]


def cmd_eval(config, args):
    params = None
    if not args.baseline_only:
        if not args.model:
            raise InvalidArgument("eval needs a model unless --baseline-only")
        params = network.load_model(args.model)
        _check_scale(args, params)
        scale = params.scale
    else:
        scale = config.network.scale
        if args.manifest is None:
            # a lone positional is the manifest
            args.manifest, args.model = args.model, None
    manifest = imaging.load_manifest(args.manifest or config.data.manifest,
                                     scale=scale)
    model, bicubic = evaluate_manifest(manifest, params,
                                       shave=not args.no_shave)
    path = os.path.join(config.run.out, EVAL_REPORT)
    rows = metrics.write_report(path, model, bicubic)
    mean = rows[-1]
    print("%s: PSNR %s SSIM %s EPSNR %s (bicubic PSNR %s) -> %s"
          % (mean[0], mean[1], mean[2], mean[3], mean[5], path))
    return model, bicubic


def _kernel_image(kernel):
    """|v| / max|v| mapped to [0, 1]; the largest magnitude becomes 255."""
    magnitude = np.abs(kernel.astype(np.float64))
    peak = magnitude.max()
    if peak == 0:
        return magnitude
    return magnitude / peak


def bicubic_kernel(scale):
    """The analytic bicubic interpolation kernel of an upscaler."""
    return network.init_deconv_bicubic(scale, channels=1)[0, 0]


def write_kernels(out, layers, scale):
    """
    Dumps (name, kernels) layers: one normalized PNG per in == out slice
    under <out>/<name>/, every raw value in kernels.csv, and the analytic
    bicubic kernel as bicubic.png for comparison. Returns the slice PNGs.
    """
    os.makedirs(out, exist_ok=True)
    written = []
    with open(os.path.join(out, KERNEL_CSV), 'w') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['layer', 'in_channel', 'out_channel', 'row', 'col',
                         'value'])
        for name, kernels in layers:
            folder = os.path.join(out, name)
            os.makedirs(folder, exist_ok=True)
            for c in range(min(kernels.shape[0], kernels.shape[1])):
                path = os.path.join(folder, 'kernel_%i.png' % c)
                imaging.write_png(path, _kernel_image(kernels[c, c]))
                written.append(path)
            for index in np.ndindex(*kernels.shape):
                writer.writerow([name] + list(index) +
                                ['%.9g' % kernels[index]])
        analytic = bicubic_kernel(scale)
        for row, col in np.ndindex(*analytic.shape):
            writer.writerow(['bicubic', 0, 0, row, col,
                             '%.9g' % analytic[row, col]])
    imaging.write_png(os.path.join(out, 'bicubic.png'),
                      _kernel_image(analytic))
    return written


def cmd_inspect_kernels(config, args):
    """Dumps both interpolators' kernels next to the analytic bicubic one."""
    params = network.load_model(args.model)
    _check_scale(args, params)
    out = args.output or config.run.out
    written = write_kernels(out, [(name, params.layer(name).kernels)
                                  for name in ('interp1', 'interp2')],
                            params.scale)
    print("%i kernel images written to %s" % (len(written), out))
    return written


def _ablation_row(name, model, scores):
    means = [metrics.finite_mean([getattr(s, m) for s in scores])[0]
             for m in ('psnr', 'ssim', 'epsnr')]
    layers = weights = 0
    if model is not None:
        layers, weights = ablation.layer_count(model), \
            ablation.weight_count(model)
    return [name, layers, weights] + [metrics.format_score(m) for m in means]


def cmd_ablate(config, args):
    """
    Trains the baselines of an interpolation study on a patch archive and
    scores them on held-out images next to bicubic, in <out>/ablation.csv.

    The "fcn" study sets the interpolation network (no boundary term)
    against FCN-k for every k of --depths. The "deconv" study trains a
    single bicubic-initialized transposed convolution and also dumps its
    learned kernel beside the analytic one under <out>/kernels.
    """
    path = args.patches or config.patches_path()
    scale, patches = training.load_patches(path)
    if args.scale is not None and args.scale != scale:
        raise InvalidArgument("%s holds scale %i patches, not %i"
                              % (path, scale, args.scale))
    held_out = args.test or config.data.validation
    if not held_out:
        raise InvalidArgument("ablate needs a manifest of held-out images")
    manifest = imaging.load_manifest(held_out, scale=scale)

    _, bicubic = evaluate_manifest(manifest)
    rows = [_ablation_row('bicubic', None, bicubic)]
    if args.study == 'fcn':
        net_config = dataclasses.replace(config.network, scale=scale)
        params, _ = ablation.train_interpolation_network(
            patches, net_config, config.training)
        scores, _ = evaluate_manifest(manifest, params)
        rows.append(_ablation_row('interpolation', params, scores))
        for depth in args.depths:
            fcn, _ = ablation.train_fcn(patches, depth, config.training,
                                        seed=config.network.seed)
            scores, _ = evaluate_manifest(
                manifest, predict=lambda t, fcn=fcn: ablation.fcn_forward(
                    fcn, t.lr[np.newaxis, np.newaxis])[0, 0])
            rows.append(_ablation_row('fcn-%i' % depth, fcn, scores))
    else:
        study, _ = ablation.train_deconv_study(patches, config.training)
        scores, _ = evaluate_manifest(
            manifest, predict=lambda t: ablation.deconv_forward(
                study, t.lr[np.newaxis, np.newaxis])[0, 0])
        rows.append(_ablation_row('deconv', study, scores))
        write_kernels(os.path.join(config.run.out, 'kernels'),
                      [('deconv', study.deconv.kernels)], scale)

    report = os.path.join(config.run.out, ABLATION_REPORT)
    with open(report, 'w') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(ABLATION_FIELDS)
        writer.writerows(rows)
    for row in rows:
        print("%-14s PSNR %s" % (row[0], row[3]))
    print("-> %s" % report)
    return rows


def _augment_flags(value):
    if value in ('all', 'dihedral8'):
        return ','.join(imaging.AUGMENTATIONS)
    return value


def _depths(value):
    try:
        depths = tuple(int(part) for part in value.split(',') if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("not a list of integers: %r" % value)
    if not depths or min(depths) < 2:
        raise argparse.ArgumentTypeError("FCN depths must be at least 2")
    return depths


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--scale', type=int, choices=network.SCALES)
    common.add_argument('--seed', type=int)
    common.add_argument('--deterministic', action='store_const', const=True)
    common.add_argument('--config', help="INI run configuration")
    common.add_argument('--out', help="output directory")
    common.add_argument('--profile', choices=network.PROFILES)
    common.add_argument('-v', '--verbose', action='store_true')

    parser = argparse.ArgumentParser(
        prog='cmsr', description="Contextualized multi-task super-resolution")
    parser.add_argument('--version', action='version', version=__version__)
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    p = commands.add_parser('corpus', parents=[common],
                            help="write a synthetic image corpus")
    p.add_argument('--count', type=int, default=20)
    p.add_argument('--held-out', type=int, default=5)
    p.add_argument('--size', type=int, default=96)
    p.set_defaults(handler=cmd_corpus)

    p = commands.add_parser('dataset', parents=[common],
                            help="cut a manifest into a patch archive")
    p.add_argument('manifest', nargs='?')
    p.add_argument('--patch', type=int, help="LR patch size")
    p.add_argument('--stride', type=int)
    p.add_argument('--augment', type=_augment_flags,
                   help="comma separated flags, or 'all'")
    p.set_defaults(handler=cmd_dataset)

    p = commands.add_parser('train', parents=[common],
                            help="train a model on a patch archive")
    p.add_argument('patches', nargs='?')
    p.add_argument('--alpha', type=float)
    p.add_argument('--no-rcn', action='store_true')
    p.add_argument('--iters', type=int)
    p.add_argument('--batch', type=int)
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('sr', parents=[common],
                            help="upscale one PNG image")
    p.add_argument('model')
    p.add_argument('input')
    p.add_argument('output')
    p.set_defaults(handler=cmd_sr)

    p = commands.add_parser('eval', parents=[common],
                            help="score a model against bicubic")
    p.add_argument('model', nargs='?')
    p.add_argument('manifest', nargs='?')
    p.add_argument('--no-shave', action='store_true')
    p.add_argument('--baseline-only', action='store_true')
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser('inspect-kernels', parents=[common],
                            help="dump the learned interpolation kernels")
    p.add_argument('model')
    p.add_argument('output', nargs='?')
    p.set_defaults(handler=cmd_inspect_kernels)

    p = commands.add_parser('ablate', parents=[common],
                            help="train and score interpolation baselines")
    p.add_argument('patches', nargs='?')
    p.add_argument('test', nargs='?', help="manifest of held-out images")
    p.add_argument('--study', choices=ablation.STUDIES, default='fcn')
    p.add_argument('--depths', type=_depths, default=ablation.FCN_DEPTHS,
                   help="comma separated FCN layer counts")
    p.add_argument('--iters', type=int)
    p.add_argument('--batch', type=int)
    p.set_defaults(handler=cmd_ablate)
    return parser


def overrides(args):
    """(section, key) -> value for every flag given on the command line."""
    values = {
        ('network', 'scale'): args.scale,
        ('network', 'seed'): args.seed,
        ('network', 'profile'): args.profile,
        ('training', 'seed'): args.seed,
        ('training', 'deterministic'): args.deterministic,
        ('run', 'out'): args.out,
        ('loss', 'alpha'): getattr(args, 'alpha', None),
        ('training', 'iterations'): getattr(args, 'iters', None),
        ('training', 'batch_size'): getattr(args, 'batch', None),
        ('data', 'patch_size'): getattr(args, 'patch', None),
        ('data', 'stride'): getattr(args, 'stride', None),
        ('data', 'augment'): getattr(args, 'augment', None),
    }
    if getattr(args, 'no_rcn', False):
        values[('training', 'use_rcn')] = False
    return values


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = load_config(args.config, overrides(args))
        echo_config(config)
        args.handler(config, args)
    except MissingFiles as e:
        for path in e.paths:
            log.error("missing file: %s", path)
        return EXIT_INPUT
    except (InvalidArgument, CorruptModel, EmptyMask) as e:
        log.error("%s", e)
        return EXIT_INPUT
    except NumericFailure as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except OSError as e:
        log.error("%s", e)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
