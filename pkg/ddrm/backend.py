# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Pre-trained recommender backends and the frozen embedding tables they produce.

Two backends are available: matrix factorization trained with BPR (``mf_bpr``) and a
light graph-propagation model (``light_graph``) whose BPR loss is computed on
layer-averaged embeddings of the user-item graph.
"""
import csv
import hashlib
import logging
import math
import struct
import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import log_expit

from ddrm import autograd as ad
from ddrm.data import sample_triplets
from ddrm.exceptions import CheckpointError, ContractViolation, TrainingDiverged
from ddrm.numerics import DTYPE, STORAGE_DTYPE, check_finite

logger = logging.getLogger('ddrm.backend')

KINDS = ('mf_bpr', 'light_graph')

EMBEDDING_MAGIC = b'DDRMEMB1'
_EMBEDDING_HEADER = struct.Struct('<3I')


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    user_emb: np.ndarray
    item_emb: np.ndarray

    def __post_init__(self):
        for name in ('user_emb', 'item_emb'):
            array = np.array(getattr(self, name), dtype=DTYPE)
            if array.ndim != 2:
                raise ContractViolation('%s must be two-dimensional, got shape %r' % (name, array.shape))
            check_finite(array, name)
            array.flags.writeable = False
            object.__setattr__(self, name, array)
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ContractViolation(
                'user and item embeddings differ in dimension: %d vs %d'
                % (self.user_emb.shape[1], self.item_emb.shape[1])
            )
        if self.dim < 1:
            raise ContractViolation('embedding dimension must be at least 1')

    @property
    def dim(self):
        return self.user_emb.shape[1]

    @property
    def num_users(self):
        return self.user_emb.shape[0]

    @property
    def num_items(self):
        return self.item_emb.shape[0]

    def fingerprint(self):
        digest = hashlib.sha256()
        digest.update(_EMBEDDING_HEADER.pack(self.num_users, self.num_items, self.dim))
        digest.update(self.user_emb.tobytes())
        digest.update(self.item_emb.tobytes())
        return digest.hexdigest()

    def stacked(self):
        """Users followed by items, as the node matrix of the interaction graph."""
        return np.vstack([self.user_emb, self.item_emb])


@dataclass(frozen=True)
class BackendConfig:
    kind: str = 'mf_bpr'
    dim: int = 64
    lr: float = 0.05
    l2: float = 1e-4
    epochs: int = 30
    batch_size: int = 256
    layers: int = 2
    init_std: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation('backend kind must be one of %s, got %r' % (', '.join(KINDS), self.kind))
        if not self.lr > 0:
            raise ContractViolation('backend learning rate must be positive, got %r' % self.lr)
        if self.l2 < 0:
            raise ContractViolation('backend L2 weight must be non-negative, got %r' % self.l2)
        if self.dim < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ContractViolation('backend dim and batch size must be positive and epochs non-negative')
        if self.kind == 'light_graph' and self.layers < 1:
            raise ContractViolation('the light graph backend needs at least one propagation layer')


@dataclass(frozen=True)
class PretrainRecord:
    epoch: int
    loss: float
    seconds: float


def bpr_loss(e_u, e_i, e_j):
    """``-log sigmoid(e_u.e_i - e_u.e_j)``; row-wise when given matrices."""
    e_u, e_i, e_j = (np.asarray(e, dtype=DTYPE) for e in (e_u, e_i, e_j))
    if not e_u.shape == e_i.shape == e_j.shape:
        raise ContractViolation('BPR operands differ in shape: %r, %r, %r' % (e_u.shape, e_i.shape, e_j.shape))
    margin = np.sum(e_u * e_i, axis=-1) - np.sum(e_u * e_j, axis=-1)
    loss = -log_expit(margin)
    return float(loss) if np.ndim(loss) == 0 else loss


def bpr_graph(u, i, j):
    """Per-row BPR loss as an autograd node."""
    return -ad.log_sigmoid(ad.inner(u, i) - ad.inner(u, j))


def initial_table(num_users, num_items, cfg, rng):
    """I.i.d. normal embeddings with standard deviation ``cfg.init_std``, users drawn first."""
    user_emb = cfg.init_std * rng.standard_normal((num_users, cfg.dim))
    item_emb = cfg.init_std * rng.standard_normal((num_items, cfg.dim))
    return EmbeddingTable(user_emb, item_emb)


def normalized_adjacency(ds):
    """
    Symmetric-normalized adjacency ``D^-1/2 A D^-1/2`` of the bipartite train graph,
    users first. Isolated nodes get a unit self-loop so they keep their embedding.
    """
    r = ds.train_matrix
    adjacency = sparse.bmat([[None, r], [r.T, None]], format='csr')
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    isolated = degree == 0
    if isolated.any():
        adjacency = adjacency + sparse.diags(isolated.astype(DTYPE), format='csr')
        degree = np.where(isolated, 1.0, degree)
    scale = sparse.diags(1.0 / np.sqrt(degree))
    return (scale @ adjacency @ scale).tocsr()


def _layer_mean(adjacency, nodes, layers):
    current, terms = nodes, [(1.0 / (layers + 1), nodes)]
    for _ in range(layers):
        current = ad.matmul(adjacency, current)
        terms.append((1.0 / (layers + 1), current))
    return ad.weighted_sum(*terms)


def propagate_light_graph(table, ds, layers):
    """Mean of the layer-0..K embeddings under symmetric-normalized neighbor averaging."""
    if layers < 0:
        raise ContractViolation('propagation layers must be non-negative, got %r' % layers)
    if (table.num_users, table.num_items) != (ds.num_users, ds.num_items):
        raise ContractViolation('embedding table does not match the dataset size')
    if layers == 0:
        return table
    nodes = _layer_mean(normalized_adjacency(ds), ad.constant(table.stacked()), layers).value
    return EmbeddingTable(nodes[:ds.num_users], nodes[ds.num_users:])


def _selector(rows, size):
    return sparse.csr_matrix((np.ones(len(rows)), (np.arange(len(rows)), rows)), shape=(len(rows), size))


def _mf_step(user_emb, item_emb, users, positives, negatives, cfg):
    def loss_builder(p):
        bpr = ad.reduce_sum(bpr_graph(p['u'], p['i'], p['j']))
        if not cfg.l2:
            return bpr
        penalty = ad.sq_norm(p['u']) + ad.sq_norm(p['i']) + ad.sq_norm(p['j'])
        return bpr + cfg.l2 * ad.reduce_sum(penalty)

    loss, grads = ad.value_and_grad(
        loss_builder, {'u': user_emb[users], 'i': item_emb[positives], 'j': item_emb[negatives]},
    )
    np.add.at(user_emb, users, -cfg.lr * grads['u'])
    np.add.at(item_emb, positives, -cfg.lr * grads['i'])
    np.add.at(item_emb, negatives, -cfg.lr * grads['j'])
    return loss


def _graph_step(nodes, adjacency, num_users, users, positives, negatives, cfg):
    size = nodes.shape[0]
    select_u = _selector(users, size)
    select_i = _selector(num_users + positives, size)
    select_j = _selector(num_users + negatives, size)
    touched = np.concatenate([users, num_users + positives, num_users + negatives])

    def loss_builder(p):
        propagated = _layer_mean(adjacency, p['nodes'], cfg.layers)
        u = ad.matmul(select_u, propagated)
        i = ad.matmul(select_i, propagated)
        j = ad.matmul(select_j, propagated)
        bpr = ad.reduce_sum(bpr_graph(u, i, j))
        if not cfg.l2:
            return bpr
        return bpr + cfg.l2 * ad.reduce_sum(ad.sq_norm(ad.matmul(_selector(touched, size), p['nodes'])))

    loss, grads = ad.value_and_grad(loss_builder, {'nodes': nodes})
    nodes -= cfg.lr * grads['nodes']
    return loss


def pretrain(ds, cfg, rng, trace=None):
    """
    Fit a backend on the train split by mini-batch SGD over sampled BPR triplets.

    Each epoch draws ``ceil(|train| / batch_size)`` batches. The summed batch loss
    (BPR plus L2 on the touched rows) drives the update. Per-epoch records are
    appended to ``trace`` when a list is given. With zero epochs an ``mf_bpr`` backend returns
    the initial table and a ``light_graph`` backend returns that table propagated over
    ``cfg.layers``, the same serving form its trained tables take.
    """
    table = initial_table(ds.num_users, ds.num_items, cfg, rng)
    user_emb = np.array(table.user_emb)
    item_emb = np.array(table.item_emb)
    nodes = table.stacked()
    adjacency = normalized_adjacency(ds) if cfg.kind == 'light_graph' else None
    batches = max(1, math.ceil(len(ds.train) / cfg.batch_size))
    last_good = table

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        total = 0.0
        for _ in range(batches):
            users, positives, negatives = sample_triplets(ds, rng, cfg.batch_size)
            if adjacency is None:
                total += _mf_step(user_emb, item_emb, users, positives, negatives, cfg)
            else:
                total += _graph_step(nodes, adjacency, ds.num_users, users, positives, negatives, cfg)
        loss = total / (batches * cfg.batch_size)
        if not math.isfinite(loss):
            raise TrainingDiverged(
                'backend loss became %r at epoch %d' % (loss, epoch), last_good=last_good, epoch=epoch,
            )
        if adjacency is not None:
            user_emb, item_emb = nodes[:ds.num_users], nodes[ds.num_users:]
        last_good = EmbeddingTable(user_emb, item_emb)
        seconds = time.perf_counter() - started
        logger.info(
            'Backend %s epoch %d/%d: loss %.6f', cfg.kind, epoch, cfg.epochs, loss,
            extra={'epoch': epoch, 'loss': loss, 'seconds': seconds},
        )
        if trace is not None:
            trace.append(PretrainRecord(epoch, loss, seconds))

    if cfg.kind == 'light_graph':
        return propagate_light_graph(last_good, ds, cfg.layers)
    return last_good


def write_embeddings(table, path):
    with open(path, 'wb') as f:
        f.write(EMBEDDING_MAGIC)
        f.write(_EMBEDDING_HEADER.pack(table.num_users, table.num_items, table.dim))
        f.write(table.user_emb.astype(STORAGE_DTYPE).tobytes())
        f.write(table.item_emb.astype(STORAGE_DTYPE).tobytes())


def read_embeddings(path):
    with open(path, 'rb') as f:
        payload = f.read()
    head = len(EMBEDDING_MAGIC) + _EMBEDDING_HEADER.size
    if payload[:len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise CheckpointError('%s is not an embedding checkpoint (bad magic)' % path)
    if len(payload) < head:
        raise CheckpointError('%s is truncated' % path)
    num_users, num_items, dim = _EMBEDDING_HEADER.unpack_from(payload, len(EMBEDDING_MAGIC))
    expected = head + (num_users + num_items) * dim * STORAGE_DTYPE.itemsize
    if len(payload) != expected:
        raise CheckpointError('%s holds %d bytes, expected %d' % (path, len(payload), expected))
    values = np.frombuffer(payload, dtype=STORAGE_DTYPE, offset=head).astype(DTYPE)
    try:
        return EmbeddingTable(
            values[:num_users * dim].reshape(num_users, dim),
            values[num_users * dim:].reshape(num_items, dim),
        )
    except ContractViolation as e:
        raise CheckpointError('%s: %s' % (path, e))


def write_pretrain_log(records, path, header='', wall_time=True):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        if header:
            f.write(header + '\n')
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['epoch', 'loss', 'seconds'])
        for r in records:
            writer.writerow([r.epoch, repr(r.loss), repr(r.seconds if wall_time else 0.0)])
