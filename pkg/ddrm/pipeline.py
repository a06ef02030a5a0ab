# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
End-to-end wiring of the pieces a run needs, driven by a ``RunConfig``.

All randomness of a run flows from its single seed through ``derive_seed`` with the
role tags ``noise``, ``backend``, ``train`` and ``infer``.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

from ddrm.backend import pretrain
from ddrm.data import apply_natural_noise, apply_random_noise, chronological_split, load_interactions, load_manifest
from ddrm.evaluation import BackendRanker, DiffusionRanker, MetricReport, evaluate, rank_users, report_from_lists
from ddrm.numerics import Rng, derive_seed
from ddrm.training import train

logger = logging.getLogger('ddrm.pipeline')


def load_split(config):
    """The raw dataset split chronologically, before any noise is injected."""
    ds = load_interactions(config['dataset'])
    return chronological_split(ds, config.split_ratios)


def add_noise(ds, config, seed, ratio=None):
    mode = config['noise'] if ratio is None else 'random'
    if mode == 'natural':
        return apply_natural_noise(ds)
    if mode == 'random':
        ratio = config['noise.ratio'] if ratio is None else ratio
        return apply_random_noise(ds, ratio, Rng(derive_seed(seed, 'noise')))
    return ds


def prepare_dataset(config, seed=None):
    """The noisy split dataset of a run: from the manifest if one is configured."""
    seed = config.seed if seed is None else seed
    if config['manifest']:
        return load_manifest(config['manifest'])
    return add_noise(load_split(config), config, seed)


def pretrain_backend(ds, config, seed=None, trace=None):
    seed = config.seed if seed is None else seed
    return pretrain(ds, config.backend_config(), Rng(derive_seed(seed, 'backend')), trace=trace)


def train_denoiser(ds, tables, config, seed=None, initial=None):
    seed = config.seed if seed is None else seed
    return train(ds, tables, config.train_config(), Rng(derive_seed(seed, 'train')), initial=initial)


def diffusion_ranker(tables, params, config, seed=None, start=None, stochastic=None):
    seed = config.seed if seed is None else seed
    return DiffusionRanker(
        tables, params, config.schedule(), seed=derive_seed(seed, 'infer'),
        start=config['infer.start'] if start is None else start,
        stochastic=config['infer.stochastic'] if stochastic is None else stochastic,
    )


@dataclass
class Evaluation:
    backend: MetricReport
    ddrm: MetricReport
    recommendations: List = field(default_factory=list)
    seconds: float = 0.0


def evaluate_run(ds, tables, params, config, seed=None, start=None, stochastic=None, ks=None):
    """Score the frozen backend and the diffusion recommender on the test split."""
    ks = tuple(sorted(set(ks or config.ks)))
    backend = evaluate(BackendRanker(tables), ds, ks=ks, config_hash=config.fingerprint)
    started = time.perf_counter()
    ranker = diffusion_ranker(tables, params, config, seed, start, stochastic)
    lists = rank_users(ranker, ds, ds.evaluable_users('test'), ks[-1])
    seconds = time.perf_counter() - started
    ddrm = report_from_lists(lists, ds, ks, 'test', config.fingerprint)
    logger.info(
        'Recall@%d backend %.4f, ddrm %.4f over %d users', ks[-1],
        backend.mean('recall', ks[-1]), ddrm.mean('recall', ks[-1]), ddrm.n_users,
        extra={'backend': backend.as_dict(), 'ddrm': ddrm.as_dict(), 'n_users': ddrm.n_users},
    )
    return Evaluation(backend, ddrm, lists, seconds)


@dataclass
class RunResult:
    evaluation: Evaluation
    train_seconds: float
    best_epoch: int
    tables: Optional[object] = None
    params: Optional[object] = None


def run_pipeline(config, seed=None, ds=None, tables=None, ks=None):
    """Pretrain (unless ``tables`` is given), train and evaluate one configuration."""
    seed = config.seed if seed is None else seed
    ds = prepare_dataset(config, seed) if ds is None else ds
    if tables is None:
        tables = pretrain_backend(ds, config, seed)
    started = time.perf_counter()
    result = train_denoiser(ds, tables, config, seed)
    train_seconds = time.perf_counter() - started
    evaluation = evaluate_run(ds, tables, result.params, config, seed, ks=ks)
    return RunResult(evaluation, train_seconds, result.best_epoch, tables, result.params)
