# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Joint training of the user and item denoisers on top of a frozen backend.

For every sampled triplet ``(u, i, j)`` and step ``t`` both positive-pair embeddings
are noised to step ``t`` and reconstructed, each conditioned on the original
embedding of its counterpart. The per-triplet loss mixes BPR on the reconstructions
(against the original negative item) with the reconstruction error, scaled by a
confidence weight ``sigmoid(score)^gamma`` that carries no gradient.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import expit

from ddrm import autograd as ad
from ddrm.backend import bpr_graph
from ddrm.data import sample_triplets
from ddrm.diffusion import DenoiserParams, build_schedule, denoise, forward_to_t, layer_nodes
from ddrm.exceptions import ContractViolation, TrainingDiverged
from ddrm.numerics import DTYPE, Rng, derive_seed

logger = logging.getLogger('ddrm.training')

VALIDATION_K = 20


@dataclass(frozen=True)
class TrainConfig:
    """
    ``balance`` mixes BPR (weight ``balance``) with reconstruction (``1 - balance``);
    ``reweight`` is the confidence exponent, ``None`` switching the weight off.
    ``hidden_width`` of 0 means the embedding dimension.
    """
    balance: float = 0.4
    reweight: Optional[float] = 0.1
    lr: float = 0.01
    batch_size: int = 256
    epochs: int = 20
    patience: int = 5
    steps: int = 20
    noise_scale: float = 1e-3
    noise_min: float = 1e-3
    noise_max: float = 1e-2
    schedule: str = 'linear_variance'
    hidden_width: int = 0
    hidden_layers: int = 1
    denoise_user: bool = True

    def __post_init__(self):
        if not 0.0 <= self.balance <= 1.0:
            raise ContractViolation('loss balance must lie in [0, 1], got %r' % self.balance)
        if self.reweight is not None and self.reweight < 0:
            raise ContractViolation('reweight factor must be non-negative, got %r' % self.reweight)
        if not self.lr > 0:
            raise ContractViolation('learning rate must be positive, got %r' % self.lr)
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractViolation('batch size must be positive and epochs non-negative')
        if self.hidden_width < 0 or self.hidden_layers < 1:
            raise ContractViolation('denoiser needs a non-negative hidden width and at least one hidden layer')

    def build_schedule(self):
        return build_schedule(self.steps, self.noise_scale, self.noise_min, self.noise_max, self.schedule)

    def width_for(self, dim):
        return self.hidden_width or dim


@dataclass(frozen=True)
class TrainStepRecord:
    epoch: int
    l_re: float
    l_bpr: float
    mean_w: float
    recall20_valid: float
    seconds: float


@dataclass(frozen=True, eq=False)
class TripletBatch:
    """
    Everything random about one optimization step, drawn up front so that a loss is a
    pure function of the parameters. ``weights`` overrides the confidence weights.
    """
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    steps: np.ndarray
    user_noise: np.ndarray
    item_noise: np.ndarray
    weights: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.users)


def draw_batch(ds, dim, schedule, rng, size):
    users, positives, negatives = sample_triplets(ds, rng, size)
    steps = rng.integers(1, schedule.steps + 1, size=size)
    user_noise = rng.standard_normal((size, dim))
    item_noise = rng.standard_normal((size, dim))
    return TripletBatch(users, positives, negatives, steps, user_noise, item_noise)


def _single(u, i, j, t, dim, noise):
    users = np.atleast_1d(np.asarray(u, dtype=np.int64))
    n = len(users)
    user_noise, item_noise = noise if noise is not None else (np.zeros((n, dim)), np.zeros((n, dim)))
    return TripletBatch(
        users,
        np.atleast_1d(np.asarray(i, dtype=np.int64)),
        np.atleast_1d(np.asarray(j if j is not None else i, dtype=np.int64)),
        np.broadcast_to(np.asarray(t, dtype=np.int64), (n,)),
        np.atleast_2d(np.asarray(user_noise, dtype=DTYPE)),
        np.atleast_2d(np.asarray(item_noise, dtype=DTYPE)),
    )


def loss_terms(nodes, batch, tables, schedule, cfg):
    """
    Per-triplet loss pieces as autograd nodes over the denoiser parameter ``nodes``.

    Returns ``(l_final, l_re, l_bpr, weights)``: row-wise nodes for the weighted
    loss, the reconstruction and BPR terms, and the constant weights.
    """
    e_u = ad.constant(tables.user_emb[batch.users])
    e_i = ad.constant(tables.item_emb[batch.positives])
    e_j = ad.constant(tables.item_emb[batch.negatives])
    x_i = forward_to_t(e_i.value, batch.steps, schedule, noise=batch.item_noise, role='item')

    denoised_i = denoise(layer_nodes(nodes, 'item'), x_i.vector, e_u, batch.steps)
    item_error = ad.sq_norm(e_i - denoised_i)
    if cfg.denoise_user:
        x_u = forward_to_t(e_u.value, batch.steps, schedule, noise=batch.user_noise, role='user')
        denoised_u = denoise(layer_nodes(nodes, 'user'), x_u.vector, e_i, batch.steps)
        l_re = 0.5 * (ad.sq_norm(e_u - denoised_u) + item_error)
    else:
        denoised_u = e_u
        l_re = 0.5 * item_error
    l_bpr = bpr_graph(denoised_u, denoised_i, e_j)

    if batch.weights is not None:
        weights = np.asarray(batch.weights, dtype=DTYPE)
    elif cfg.reweight is None:
        weights = np.ones(len(batch))
    else:
        scores = np.sum(denoised_u.value * denoised_i.value, axis=-1)
        weights = expit(scores) ** cfg.reweight
    l_final = ad.weighted_sum((cfg.balance, l_bpr), (1.0 - cfg.balance, l_re))
    return l_final, l_re, l_bpr, weights


def batch_loss(nodes, batch, tables, schedule, cfg):
    """Mean weighted loss over the batch as a scalar node."""
    l_final, _, _, weights = loss_terms(nodes, batch, tables, schedule, cfg)
    return ad.reduce_sum(l_final, weights=weights / len(batch))


def reconstruction_loss(u, i, t, tables, schedule, params, rng=None, noise=None, cfg=None):
    """
    ``(||e_u - f_theta(e_t^u, e_i, t)||^2 + ||e_i - f_psi(e_t^i, e_u, t)||^2) / 2``,
    averaged when ``u``/``i``/``t`` are arrays. ``noise`` forces the forward noise as a
    ``(user_noise, item_noise)`` pair; otherwise it is drawn from ``rng``, users first.
    """
    cfg = cfg or TrainConfig()
    if noise is None:
        n = np.size(u)
        noise = (rng.standard_normal((n, tables.dim)), rng.standard_normal((n, tables.dim)))
    batch = _single(u, i, None, t, tables.dim, noise)
    _, l_re, _, _ = loss_terms(params.as_dict(), batch, tables, schedule, cfg)
    return float(np.mean(l_re.value))


def combined_loss(u, i, j, t, tables, schedule, params, cfg, rng=None, noise=None):
    """``w * [balance * BPR + (1 - balance) * L_re]`` for one triplet, or the mean over a batch."""
    if noise is None:
        n = np.size(u)
        noise = (rng.standard_normal((n, tables.dim)), rng.standard_normal((n, tables.dim)))
    batch = _single(u, i, j, t, tables.dim, noise)
    return float(batch_loss(params.as_dict(), batch, tables, schedule, cfg).value)


def confidence_weight(score, reweight):
    """``sigmoid(score) ** reweight``; ``None`` disables weighting."""
    if reweight is None:
        return np.ones_like(np.asarray(score, dtype=DTYPE))
    return expit(np.asarray(score, dtype=DTYPE)) ** reweight


@dataclass
class TrainResult:
    params: DenoiserParams
    records: List[TrainStepRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def _validation_recall(ds, tables, params, schedule, seed):
    from ddrm.evaluation import DiffusionRanker, evaluate

    if not len(ds.evaluable_users('valid')):
        return 0.0
    ranker = DiffusionRanker(tables, params, schedule, seed=seed)
    report = evaluate(ranker, ds, ks=(VALIDATION_K,), split='valid')
    return report.mean('recall', VALIDATION_K)


def train(ds, tables, cfg, rng, initial=None):
    """
    Optimize the denoisers by mini-batch SGD; the embedding table is only read.

    Each epoch draws ``ceil(|train| / batch_size)`` batches, then scores validation
    Recall@20 (train positives excluded). The parameters of the best validation epoch
    are returned; training stops after ``patience`` epochs without improvement
    (``patience`` of 0 never stops early). Without validation users the last epoch wins.
    """
    schedule = cfg.build_schedule()
    if initial is None:
        params = DenoiserParams.initialize(
            tables.dim, cfg.width_for(tables.dim), cfg.hidden_layers, rng.spawn('init'),
        )
    elif initial.dim != tables.dim:
        raise ContractViolation(
            'initial denoiser dimension %d does not match the embeddings (%d)' % (initial.dim, tables.dim)
        )
    else:
        params = initial

    batch_rng = rng.spawn('batches')
    valid_seed = derive_seed(rng.seed, 'valid')
    has_validation = len(ds.evaluable_users('valid')) > 0
    batches = max(1, math.ceil(len(ds.train) / cfg.batch_size))
    result = TrainResult(params)
    best_recall, stale = -1.0, 0

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        sums = np.zeros(3)
        for _ in range(batches):
            batch = draw_batch(ds, tables.dim, schedule, batch_rng, cfg.batch_size)
            pieces = {}

            def loss_builder(nodes):
                l_final, l_re, l_bpr, weights = loss_terms(nodes, batch, tables, schedule, cfg)
                pieces.update(l_re=l_re.value, l_bpr=l_bpr.value, weights=weights)
                return ad.reduce_sum(l_final, weights=weights / len(batch))

            loss, grads = ad.value_and_grad(loss_builder, params.as_dict())
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    'denoiser loss became %r at epoch %d' % (loss, epoch), last_good=params, epoch=epoch,
                    records=result.records,
                )
            try:
                params = params.sgd_step(grads, cfg.lr)
            except ContractViolation as e:
                raise TrainingDiverged(
                    'denoiser update at epoch %d: %s' % (epoch, e), last_good=params, epoch=epoch,
                    records=result.records,
                )
            sums += [np.mean(pieces['l_re']), np.mean(pieces['l_bpr']), np.mean(pieces['weights'])]

        l_re, l_bpr, mean_w = (float(value) for value in sums / batches)
        recall = _validation_recall(ds, tables, params, schedule, valid_seed) if has_validation else 0.0
        seconds = time.perf_counter() - started
        result.records.append(TrainStepRecord(epoch, l_re, l_bpr, mean_w, recall, seconds))
        logger.info(
            'Denoiser epoch %d/%d: l_re %.6f, l_bpr %.6f, mean w %.4f, valid recall@20 %.4f',
            epoch, cfg.epochs, l_re, l_bpr, mean_w, recall,
            extra={'epoch': epoch, 'l_re': l_re, 'l_bpr': l_bpr, 'mean_w': mean_w, 'recall20_valid': recall},
        )

        if not has_validation or recall > best_recall:
            best_recall, stale = recall, 0
            result.params, result.best_epoch = params, epoch
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                logger.info('Early stop after epoch %d (best epoch %d)', epoch, result.best_epoch)
                result.stopped_early = True
                break
    return result


def write_train_log(records, path, header='', wall_time=True):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        if header:
            f.write(header + '\n')
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['epoch', 'l_re', 'l_bpr', 'mean_w', 'recall20_valid', 'seconds'])
        for r in records:
            writer.writerow([
                r.epoch, repr(r.l_re), repr(r.l_bpr), repr(r.mean_w), repr(r.recall20_valid),
                repr(r.seconds if wall_time else 0.0),
            ])


def read_train_log(path):
    with open(path, newline='', encoding='utf-8') as f:
        rows = [line for line in f if not line.startswith('#')]
    return [
        TrainStepRecord(
            int(row['epoch']), float(row['l_re']), float(row['l_bpr']), float(row['mean_w']),
            float(row['recall20_valid']), float(row['seconds']),
        )
        for row in csv.DictReader(rows)
    ]
