import csv
import math
import os
import shutil
import tempfile
from unittest import TestCase

import numpy as np

from cmsr import cli, imaging, network, settings, training
from cmsr.imaging import TrainingTriplet
from cmsr.tests.test_metrics import ssim_oracle


class BaseCliTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.out = self.path('out')
        self.rng = np.random.default_rng(13)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def path(self, *parts):
        return os.path.join(self.tmpdir, *parts)

    def run_cli(self, *argv):
        return cli.main(list(argv) + ['--out', self.out])

    def write_manifest(self, name, lines):
        path = self.path(name)
        with open(path, 'w') as f:
            f.write(''.join(line + '\n' for line in lines))
        return path

    def save_image(self, name, size=96):
        imaging.write_png(self.path(name),
                          imaging.synthetic_image(self.rng, size))
        return self.path(name)

    def save_model(self, scale=3):
        path = self.path('model.cmsr')
        network.save_model(network.init_network(
            network.NetworkConfig(scale=scale)), path)
        return path

    def read_csv(self, path):
        with open(path) as f:
            return list(csv.DictReader(f))

    def save_patches(self, count=3):
        patches = []
        for _ in range(count):
            hr = self.rng.random((30, 30)).astype(np.float32)
            patches.append(TrainingTriplet(
                lr=imaging.make_lr(hr, 3), hr=hr,
                boundaries=imaging.boundary_target(hr)))
        path = self.path('patches.cmsr')
        training.save_patches(path, patches, 3)
        return path


class CorpusTestCase(BaseCliTestCase):
    "Tests for the corpus and dataset commands"
    def test_corpus(self):
        code = self.run_cli('corpus', '--count', '3', '--held-out', '1',
                            '--size', '48')
        self.assertEqual(code, cli.EXIT_OK)
        for i in range(3):
            self.assertTrue(os.path.exists(
                os.path.join(self.out, 'corpus', 'synthetic_%03i.png' % i)))
        manifest = imaging.load_manifest(os.path.join(self.out, 'train.txt'))
        self.assertEqual(len(manifest.entries), 2)
        manifest = imaging.load_manifest(os.path.join(self.out, 'test.txt'))
        self.assertEqual(len(manifest.entries), 1)
        self.assertTrue(os.path.exists(os.path.join(self.out, 'run.cfg')))

    def test_corpus_held_out_too_large(self):
        self.assertEqual(self.run_cli('corpus', '--count', '2',
                                      '--held-out', '2'), cli.EXIT_INPUT)

    def test_dataset(self):
        self.save_image('a.png')
        manifest = self.write_manifest('m.txt', ['a.png'])
        self.assertEqual(self.run_cli('dataset', manifest), cli.EXIT_OK)
        scale, patches = training.load_patches(
            os.path.join(self.out, 'patches.cmsr'))
        self.assertEqual(scale, 3)
        self.assertEqual(len(patches), 25)
        self.assertEqual(patches[0].lr.shape, (16, 16))
        self.assertEqual(patches[0].hr.shape, (48, 48))

    def test_dataset_with_augmentation(self):
        self.save_image('a.png')
        manifest = self.write_manifest('m.txt', ['a.png'])
        self.assertEqual(self.run_cli('dataset', manifest, '--augment', 'all'),
                         cli.EXIT_OK)
        _, patches = training.load_patches(
            os.path.join(self.out, 'patches.cmsr'))
        self.assertEqual(len(patches), 200)

    def test_dataset_at_scale_two(self):
        self.save_image('a.png')
        manifest = self.write_manifest('m.txt', ['a.png'])
        self.assertEqual(self.run_cli('dataset', manifest, '--scale', '2',
                                      '--patch', '24', '--stride', '8'),
                         cli.EXIT_OK)
        scale, patches = training.load_patches(
            os.path.join(self.out, 'patches.cmsr'))
        self.assertEqual(scale, 2)
        self.assertEqual(len(patches), 16)

    def test_empty_manifest(self):
        manifest = self.write_manifest('m.txt', ['# nothing'])
        self.assertEqual(self.run_cli('dataset', manifest), cli.EXIT_INPUT)

    def test_missing_images(self):
        manifest = self.write_manifest('m.txt', ['a.png', 'b.png'])
        with self.assertLogs('cmsr.cli', 'ERROR') as logs:
            code = self.run_cli('dataset', manifest)
        self.assertEqual(code, cli.EXIT_INPUT)
        self.assertEqual(len(logs.output), 2)


class TrainCommandTestCase(BaseCliTestCase):
    "Tests for the train command"
    def setUp(self):
        super(TrainCommandTestCase, self).setUp()
        self.patches = self.save_patches()

    def test_train(self):
        code = self.run_cli('train', self.patches, '--iters', '2',
                            '--batch', '2')
        self.assertEqual(code, cli.EXIT_OK)
        params = network.load_model(os.path.join(self.out, 'model.cmsr'))
        self.assertEqual(params.scale, 3)
        rows = self.read_csv(os.path.join(self.out, 'train_log.csv'))
        self.assertEqual([row['stage'] for row in rows],
                         ['1', '1', '2', '2', '3', '3'])

    def test_train_without_residue_branch(self):
        code = self.run_cli('train', self.patches, '--iters', '1',
                            '--batch', '2', '--no-rcn')
        self.assertEqual(code, cli.EXIT_OK)
        rows = self.read_csv(os.path.join(self.out, 'train_log.csv'))
        self.assertEqual([row['stage'] for row in rows], ['1', '3'])
        params = network.load_model(os.path.join(self.out, 'model.cmsr'))
        self.assertFalse(params.rcn_out.kernels.any())

    def test_seeded_runs_are_identical(self):
        outputs = []
        for run in ('first', 'second'):
            out = self.path(run)
            code = cli.main(['train', self.patches, '--iters', '3',
                             '--batch', '2', '--seed', '7', '--out', out])
            self.assertEqual(code, cli.EXIT_OK)
            files = []
            for name in ('train_log.csv', 'model.cmsr'):
                with open(os.path.join(out, name), 'rb') as f:
                    files.append(f.read())
            outputs.append(files)
        self.assertEqual(outputs[0], outputs[1])

    def test_scale_mismatch(self):
        self.assertEqual(self.run_cli('train', self.patches, '--scale', '2',
                                      '--iters', '1'), cli.EXIT_INPUT)

    def test_divergence_exits_with_numeric_code(self):
        config = self.path('desk.cfg')
        with open(config, 'w') as f:
            f.write("[training]\ndivergence_limit = 1e-12\n")
        code = self.run_cli('train', self.patches, '--iters', '1',
                            '--batch', '2', '--config', config)
        self.assertEqual(code, cli.EXIT_NUMERIC)

    def test_patch_file_is_not_a_model(self):
        self.assertEqual(self.run_cli('sr', self.patches, self.patches,
                                      self.path('out.png')), cli.EXIT_INPUT)


class SrCommandTestCase(BaseCliTestCase):
    "Tests for the sr command"
    def setUp(self):
        super(SrCommandTestCase, self).setUp()
        self.model = self.save_model()

    def test_grayscale(self):
        source = self.save_image('in.png', 40)
        output = self.path('sr.png')
        self.assertEqual(self.run_cli('sr', self.model, source, output),
                         cli.EXIT_OK)
        self.assertEqual(imaging.read_png(output).shape, (120, 120))

    def test_rgb(self):
        rgb = self.rng.integers(0, 256, size=(20, 24, 3)).astype(np.uint8)
        imaging.write_png(self.path('in.png'), rgb / 255.0)
        output = self.path('sr.png')
        self.assertEqual(self.run_cli('sr', self.model, self.path('in.png'),
                                      output), cli.EXIT_OK)
        self.assertEqual(imaging.read_png(output).shape, (60, 72, 3))

    def test_chroma_is_bicubic(self):
        rgb = self.rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
        params = network.load_model(self.model)
        y, cb, cr = cli.upscale_ycbcr(params, rgb)
        _, cb_lr, cr_lr = imaging.rgb_to_ycbcr(rgb)
        self.assertEqual(y.shape, (36, 36))
        np.testing.assert_array_equal(cb, imaging.resize_bicubic(cb_lr, 3))
        np.testing.assert_array_equal(cr, imaging.resize_bicubic(cr_lr, 3))

    def test_input_below_receptive_field(self):
        source = self.save_image('in.png', 8)
        self.assertEqual(self.run_cli('sr', self.model, source,
                                      self.path('sr.png')), cli.EXIT_INPUT)

    def test_scale_flag_must_match_model(self):
        source = self.save_image('in.png', 20)
        self.assertEqual(self.run_cli('sr', self.model, source,
                                      self.path('sr.png'), '--scale', '2'),
                         cli.EXIT_INPUT)

    def test_truncated_model(self):
        with open(self.model, 'rb') as f:
            data = f.read()
        with open(self.model, 'wb') as f:
            f.write(data[:len(data) // 2])
        source = self.save_image('in.png', 20)
        self.assertEqual(self.run_cli('sr', self.model, source,
                                      self.path('sr.png')), cli.EXIT_INPUT)


class EvalCommandTestCase(BaseCliTestCase):
    "Tests for the eval command and evaluate_manifest"
    def setUp(self):
        super(EvalCommandTestCase, self).setUp()
        self.save_image('a.png', 48)
        self.save_image('b.png', 48)
        self.manifest = self.write_manifest('test.txt', ['a.png', 'b.png'])

    def test_baseline_only(self):
        code = self.run_cli('eval', '--baseline-only', self.manifest)
        self.assertEqual(code, cli.EXIT_OK)
        rows = self.read_csv(os.path.join(self.out, 'eval.csv'))
        self.assertEqual([row['image'] for row in rows[:2]],
                         ['a.png', 'b.png'])
        self.assertEqual(rows[2]['image'], 'mean')
        for row in rows:
            self.assertEqual(row['psnr'], row['bicubic_psnr'])
            self.assertEqual(row['ssim'], row['bicubic_ssim'])

    def test_baseline_matches_direct_scores(self):
        self.save_image('c.png', 48)
        manifest = self.write_manifest('three.txt',
                                       ['a.png', 'b.png', 'c.png'])
        self.assertEqual(self.run_cli('eval', '--baseline-only', manifest),
                         cli.EXIT_OK)
        rows = self.read_csv(os.path.join(self.out, 'eval.csv'))
        entries = imaging.load_manifest(manifest).entries
        self.assertEqual(len(rows), 4)
        for row, entry in zip(rows, entries):
            triplet = imaging.load_entry(entry, 3)
            hr = imaging.to_uint8(triplet.hr) / 255.0
            bicubic = imaging.to_uint8(imaging.resize_bicubic(
                triplet.lr.astype(np.float64), 3)) / 255.0
            g, p = hr[3:-3, 3:-3], bicubic[3:-3, 3:-3]
            edges = np.argwhere(np.logical_or.reduce(
                [b >= 0.5 for b in triplet.boundaries]))
            mask = np.zeros(hr.shape, dtype=bool)
            for i, j in np.ndindex(*hr.shape):
                distance = np.sqrt(((edges - (i, j)) ** 2).sum(axis=1))
                mask[i, j] = distance.min() < settings.CMSR_EDGE_RADIUS
            mask = mask[3:-3, 3:-3]
            squared = (255.0 * g - 255.0 * p) ** 2
            expected = {
                'psnr': 10 * math.log10(255.0 ** 2 / squared.mean()),
                'ssim': ssim_oracle(g, p),
                'epsnr': 10 * math.log10(255.0 ** 2 / squared[mask].mean()),
            }
            self.assertEqual(row['image'], os.path.basename(entry.hr_path))
            for name, value in expected.items():
                self.assertAlmostEqual(float(row[name]), value, delta=1e-6)
                self.assertEqual(row[name], row['bicubic_' + name])
        self.assertAlmostEqual(float(rows[3]['psnr']),
                               np.mean([float(r['psnr']) for r in rows[:3]]),
                               delta=1e-5)

    def test_model(self):
        model = self.save_model()
        self.assertEqual(self.run_cli('eval', model, self.manifest),
                         cli.EXIT_OK)
        rows = self.read_csv(os.path.join(self.out, 'eval.csv'))
        self.assertEqual(len(rows), 3)
        self.assertTrue(float(rows[0]['psnr']) > 0)

    def test_model_required(self):
        self.assertEqual(self.run_cli('eval'), cli.EXIT_INPUT)

    def test_perfect_prediction(self):
        manifest = imaging.load_manifest(self.manifest)
        model, bicubic = cli.evaluate_manifest(
            manifest, predict=lambda triplet: triplet.hr, workers=2)
        self.assertEqual([s.image for s in model], ['a.png', 'b.png'])
        self.assertEqual(model[0].psnr, float('inf'))
        self.assertAlmostEqual(model[0].ssim, 1.0)
        self.assertLess(bicubic[0].psnr, float('inf'))

    def test_shave(self):
        manifest = imaging.load_manifest(self.manifest)
        shaved, _ = cli.evaluate_manifest(manifest, shave=True)
        full, _ = cli.evaluate_manifest(manifest, shave=False)
        self.assertNotEqual(shaved[0].psnr, full[0].psnr)


class InspectKernelsTestCase(BaseCliTestCase):
    "Tests for the inspect-kernels command"
    def setUp(self):
        super(InspectKernelsTestCase, self).setUp()
        self.model = self.save_model()
        self.dump = self.path('kernels')

    def test_images(self):
        self.assertEqual(self.run_cli('inspect-kernels', self.model,
                                      self.dump), cli.EXIT_OK)
        for layer in ('interp1', 'interp2'):
            for c in range(8):
                image = imaging.read_png(
                    os.path.join(self.dump, layer, 'kernel_%i.png' % c))
                self.assertEqual(image.shape, (11, 11))
                self.assertEqual(image.max(), 255)
        self.assertEqual(imaging.read_png(
            os.path.join(self.dump, 'bicubic.png')).shape, (11, 11))

    def test_csv_holds_raw_values(self):
        self.run_cli('inspect-kernels', self.model, self.dump)
        rows = self.read_csv(os.path.join(self.dump, 'kernels.csv'))
        kernels = network.load_model(self.model).interp1.kernels
        interp1 = [r for r in rows if r['layer'] == 'interp1']
        self.assertEqual(len(interp1), kernels.size)
        for row in interp1[:200]:
            index = tuple(int(row[k]) for k in ('in_channel', 'out_channel',
                                                'row', 'col'))
            self.assertAlmostEqual(float(row['value']), kernels[index],
                                   places=6)
        bicubic = [r for r in rows if r['layer'] == 'bicubic']
        self.assertEqual(len(bicubic), 121)

    def test_initial_kernels_are_bicubic(self):
        self.run_cli('inspect-kernels', self.model, self.dump)
        learned = imaging.read_png(
            os.path.join(self.dump, 'interp1', 'kernel_0.png'))
        analytic = imaging.read_png(os.path.join(self.dump, 'bicubic.png'))
        np.testing.assert_array_equal(learned, analytic)

    def test_kernel_image_normalization(self):
        image = cli._kernel_image(np.array([[-2.0, 1.0], [0.0, 0.5]]))
        np.testing.assert_allclose(image, [[1.0, 0.5], [0.0, 0.25]])
        self.assertFalse(cli._kernel_image(np.zeros((3, 3))).any())


class AblateCommandTestCase(BaseCliTestCase):
    "Tests for the ablate command"
    def setUp(self):
        super(AblateCommandTestCase, self).setUp()
        self.patches = self.save_patches()
        self.save_image('a.png', 48)
        self.manifest = self.write_manifest('test.txt', ['a.png'])

    def test_fcn_study(self):
        code = self.run_cli('ablate', self.patches, self.manifest,
                            '--depths', '3', '--iters', '2', '--batch', '2')
        self.assertEqual(code, cli.EXIT_OK)
        rows = self.read_csv(os.path.join(self.out, 'ablation.csv'))
        self.assertEqual([row['model'] for row in rows],
                         ['bicubic', 'interpolation', 'fcn-3'])
        self.assertEqual([(row['layers'], row['weights']) for row in rows],
                         [('0', '0'), ('7', '51720'), ('3', '9792')])
        for row in rows:
            self.assertGreater(float(row['psnr']), 0)

    def test_deconv_study(self):
        code = self.run_cli('ablate', self.patches, self.manifest,
                            '--study', 'deconv', '--iters', '2')
        self.assertEqual(code, cli.EXIT_OK)
        rows = self.read_csv(os.path.join(self.out, 'ablation.csv'))
        self.assertEqual(rows[1]['model'], 'deconv')
        self.assertEqual((rows[1]['layers'], rows[1]['weights']),
                         ('1', '121'))
        kernels = os.path.join(self.out, 'kernels')
        self.assertEqual(imaging.read_png(
            os.path.join(kernels, 'deconv', 'kernel_0.png')).shape, (11, 11))
        self.assertTrue(os.path.exists(os.path.join(kernels, 'bicubic.png')))

    def test_held_out_manifest_required(self):
        self.assertEqual(self.run_cli('ablate', self.patches),
                         cli.EXIT_INPUT)

    def test_depths_must_be_at_least_two(self):
        with self.assertRaises(SystemExit):
            self.run_cli('ablate', self.patches, self.manifest,
                         '--depths', '1')
