# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import os
import tempfile
from statistics import median
from unittest import skipUnless

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from ddrm.conf import load_config
from ddrm.pipeline import evaluate_run, load_split, prepare_dataset, run_pipeline
from ddrm.sweep import noise_sweep, parse_axis_values, read_sweep, run_sweep, write_sweep

from .fixtures import planted_blocks, write_tsv


class SweepTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def config(self, rows, **values):
        dataset = write_tsv(os.path.join(tempfile.mkdtemp(dir=self.tmp.name), 'ratings.tsv'), rows)
        values.update({'dataset': dataset, 'out': self.tmp.name, 'log_wall_time': False})
        return load_config(overrides=values)


class TestAxisValues(SimpleTestCase):
    def test_types(self):
        self.assertEqual(parse_axis_values('diffusion_steps', '5, 10'), [5, 10])
        self.assertEqual(parse_axis_values('lambda', '0,0.4'), [0.0, 0.4])
        self.assertEqual(parse_axis_values('gamma', '0.1,none'), [0.1, None])
        self.assertEqual(parse_axis_values('schedule', 'linear,cosine'), ['linear', 'cosine'])

    def test_unknown_axis(self):
        with self.assertRaises(ImproperlyConfigured):
            parse_axis_values('depth', '1,2')


class TestRunSweep(SweepTestCase):
    def test_rows_follow_values_then_seeds(self):
        config = self.config(planted_blocks(num_users=40, num_items=20, per_user=6, seed=2))
        rows = run_sweep(config, 'diffusion_steps', [2, 3], seeds=[1, 2])
        self.assertEqual([(row.value, row.seed) for row in rows], [(2, 1), (2, 2), (3, 1), (3, 2)])
        # The backend is shared across the values of one seed.
        self.assertEqual(rows[0].backend.as_dict(), rows[2].backend.as_dict())

        path = os.path.join(self.tmp.name, 'sweep.csv')
        write_sweep(rows, path, header='# sweep', wall_time=False)
        written = read_sweep(path)
        self.assertEqual([row['value'] for row in written], ['2', '2', '3', '3'])
        self.assertEqual({row['infer_seconds'] for row in written}, {'0.0'})

    def test_invalid_variant(self):
        config = self.config(planted_blocks(num_users=40, num_items=20, per_user=6, seed=2))
        with self.assertRaises(ImproperlyConfigured):
            run_sweep(config, 'diffusion_steps', [0], seeds=[1])

    def test_duplicate_values(self):
        config = self.config(planted_blocks(num_users=40, num_items=20, per_user=6, seed=2))
        with self.assertRaises(ImproperlyConfigured):
            run_sweep(config, 'diffusion_steps', [2, 3, 2], seeds=[1])


@skipUnless(settings.ENABLE_SLOW_TESTS, 'Slow tests are disabled (set DDRM_SLOW_TESTS=1).')
class TestSyntheticExperiments(SweepTestCase):
    SEEDS = (1, 2, 3, 4, 5)

    def setUp(self):
        super().setUp()
        self.experiment = self.config(planted_blocks(seed=6), **{
            'noise': 'random', 'noise.ratio': 0.3, 'backend.epochs': 30, 'backend.dim': 16, 'train.epochs': 10,
        })

    def test_noise_hurts_the_backend(self):
        config = self.config(planted_blocks(seed=4), **{'backend.epochs': 30, 'backend.dim': 16})
        rows = noise_sweep(load_split(config), config, ratios=(0.0, 0.6), seeds=(1, 2, 3))
        self.assertEqual([row.value for row in rows], [0.0] * 3 + [0.6] * 3)
        clean = median(row.backend.mean('recall', 20) for row in rows[:3])
        noisy = median(row.backend.mean('recall', 20) for row in rows[3:])
        self.assertGreaterEqual(clean, noisy)

    def test_denoising_beats_the_backend(self):
        backend, ddrm, pure_noise = [], [], []
        for seed in self.SEEDS:
            ds = prepare_dataset(self.experiment, seed)
            result = run_pipeline(self.experiment, seed, ds=ds)
            backend.append(result.evaluation.backend.mean('recall', 20))
            ddrm.append(result.evaluation.ddrm.mean('recall', 20))
            noise_start = evaluate_run(ds, result.tables, result.params, self.experiment, seed, start='pure_noise')
            pure_noise.append(noise_start.ddrm.mean('recall', 20))
        # Ranking the ~90 unseen items at random recalls about 0.22.
        self.assertGreater(median(ddrm), 0.3)
        self.assertGreaterEqual(median(ddrm), median(backend))
        self.assertLess(median(pure_noise), median(ddrm))

    def test_denoising_holds_up_at_every_noise_ratio(self):
        ratios = (0.0, 0.2, 0.4, 0.6)
        rows = noise_sweep(load_split(self.experiment), self.experiment, ratios=ratios, seeds=self.SEEDS)
        for ratio in ratios:
            at_ratio = [row for row in rows if row.value == ratio]
            self.assertEqual(len(at_ratio), len(self.SEEDS))
            self.assertGreaterEqual(
                median(row.ddrm.mean('recall', 20) for row in at_ratio),
                median(row.backend.mean('recall', 20) for row in at_ratio),
                ratio,
            )

    def test_inference_time_grows_with_the_steps(self):
        steps = [5, 10, 25, 50, 100]
        rows = run_sweep(self.experiment, 'diffusion_steps', steps, seeds=[1])
        self.assertEqual([row.value for row in rows], steps)
        path = os.path.join(self.tmp.name, 'steps.csv')
        write_sweep(rows, path)
        seconds = [float(row['infer_seconds']) for row in read_sweep(path)]
        self.assertTrue(all(value > 0 for value in seconds))
        self.assertGreater(seconds[-1], seconds[0])
