# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Experiment sweeps: one full pipeline run per (axis value, seed).

Sweeping the noise ratio re-injects noise into the clean split for every value.
The other axes only touch the denoiser, so the dataset and the backend are built
once per seed and shared across the values.
"""
import csv
import logging
from dataclasses import dataclass

from django.core.exceptions import ImproperlyConfigured

from ddrm.conf import parse_list
from ddrm.evaluation import MetricReport
from ddrm.pipeline import add_noise, load_split, prepare_dataset, pretrain_backend, run_pipeline

logger = logging.getLogger('ddrm.sweep')

# Axis name -> the setting it overrides.
AXES = {
    'noise_ratio': 'noise.ratio',
    'diffusion_steps': 'train.steps',
    'lambda': 'train.lambda',
    'gamma': 'train.gamma',
    'noise_scale': 'train.noise_scale',
    'schedule': 'train.schedule',
}
DEFAULT_NOISE_RATIOS = (0.0, 0.2, 0.4, 0.6)
SWEEP_KS = (10, 20)

COLUMNS = [
    'axis', 'value', 'seed',
    'backend_recall10', 'backend_recall20', 'backend_ndcg10', 'backend_ndcg20',
    'ddrm_recall10', 'ddrm_recall20', 'ddrm_ndcg10', 'ddrm_ndcg20',
    'n_users', 'train_seconds', 'infer_seconds',
]


@dataclass
class SweepRow:
    axis: str
    value: object
    seed: int
    backend: MetricReport
    ddrm: MetricReport
    train_seconds: float
    infer_seconds: float

    def as_dict(self, wall_time=True):
        row = {'axis': self.axis, 'value': self.value, 'seed': self.seed}
        for name, report in (('backend', self.backend), ('ddrm', self.ddrm)):
            for metric in ('recall', 'ndcg'):
                for k in SWEEP_KS:
                    row['%s_%s%d' % (name, metric, k)] = report.mean(metric, k)
        row['n_users'] = self.ddrm.n_users
        row['train_seconds'] = self.train_seconds if wall_time else 0.0
        row['infer_seconds'] = self.infer_seconds if wall_time else 0.0
        return row


def parse_axis_values(axis, text):
    if axis not in AXES:
        raise ImproperlyConfigured('Unknown sweep axis %r; choose one of %s.' % (axis, ', '.join(AXES)))
    if axis == 'diffusion_steps':
        return parse_list(text, int)
    if axis == 'schedule':
        return parse_list(text, str)
    if axis == 'gamma':
        return [None if part.strip().lower() == 'none' else float(part) for part in str(text).split(',')
                if part.strip()]
    return parse_list(text, float)


def _row(axis, value, seed, result):
    evaluation = result.evaluation
    return SweepRow(
        axis, value, seed, evaluation.backend, evaluation.ddrm, result.train_seconds, evaluation.seconds,
    )


def _log_row(row):
    logger.info(
        'Sweep %s=%s seed %d: backend recall@20 %.4f, ddrm recall@20 %.4f',
        row.axis, row.value, row.seed, row.backend.mean('recall', 20), row.ddrm.mean('recall', 20),
        extra={'axis': row.axis, 'value': row.value, 'seed': row.seed},
    )


def noise_sweep(ds, config, ratios=DEFAULT_NOISE_RATIOS, seeds=None):
    """
    Inject random noise into the clean split ``ds`` at every ratio and run the whole
    pipeline, once per seed. Rows come back ordered by ratio, then seed.
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    ks = tuple(config.ks) + SWEEP_KS
    rows = []
    for ratio in ratios:
        for seed in seeds:
            noisy = add_noise(ds, config, seed, ratio=ratio)
            row = _row('noise_ratio', ratio, seed, run_pipeline(config, seed, ds=noisy, ks=ks))
            _log_row(row)
            rows.append(row)
    return rows


def run_sweep(config, axis, values, seeds=None):
    """One row per (value, seed) along ``axis``, ordered by value, then seed."""
    if axis not in AXES:
        raise ImproperlyConfigured('Unknown sweep axis %r; choose one of %s.' % (axis, ', '.join(AXES)))
    values = list(values)
    if len(set(values)) != len(values):
        raise ImproperlyConfigured('Sweep values along %r must be distinct, got %r.' % (axis, values))
    seeds = [config.seed] if seeds is None else list(seeds)
    if axis == 'noise_ratio':
        if config['manifest']:
            raise ImproperlyConfigured('A noise-ratio sweep needs the raw dataset, not a prepared manifest.')
        return noise_sweep(load_split(config), config, values, seeds)

    ks = tuple(config.ks) + SWEEP_KS
    variants = [config.replace(**{AXES[axis]: value}) for value in values]
    for variant in variants:
        variant.validate()
    by_seed = {}
    for seed in seeds:
        ds = prepare_dataset(config, seed)
        tables = pretrain_backend(ds, config, seed)
        for value, variant in zip(values, variants):
            by_seed[(seed, value)] = _row(axis, value, seed, run_pipeline(variant, seed, ds=ds, tables=tables, ks=ks))
            _log_row(by_seed[(seed, value)])
    return [by_seed[(seed, value)] for value in values for seed in seeds]


def write_sweep(rows, path, header='', wall_time=True):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        if header:
            f.write(header + '\n')
        writer = csv.DictWriter(f, fieldnames=COLUMNS, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            values = row.as_dict(wall_time)
            writer.writerow({
                key: ('none' if value is None else repr(value) if isinstance(value, float) else value)
                for key, value in values.items()
            })


def read_sweep(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(line for line in f if not line.startswith('#')))
