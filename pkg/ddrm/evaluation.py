# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Full-ranking evaluation: every catalog item except the user's excluded ones is scored,
and Recall@K / NDCG@K are averaged over users with at least one relevant item.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from ddrm.exceptions import ContractViolation
from ddrm.inference import RankedList, generate_ideal_items, top_k

logger = logging.getLogger('ddrm.evaluation')

METRICS = ('recall', 'ndcg')
DEFAULT_KS = (10, 20)
CHUNK_SIZE = 256

# Items excluded from ranking, per evaluated split.
EXCLUSIONS = {'test': 'seen', 'valid': 'train'}


def _hits(ranked, relevant, k):
    items = ranked.items if isinstance(ranked, RankedList) else np.asarray(ranked)
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ContractViolation('relevant item set is empty')
    return [int(item) in relevant for item in items[:k]], relevant


def recall_at_k(ranked, relevant, k):
    hits, relevant = _hits(ranked, relevant, k)
    return sum(hits) / len(relevant)


def ndcg_at_k(ranked, relevant, k):
    hits, relevant = _hits(ranked, relevant, k)
    dcg = sum(1.0 / math.log2(rank + 1) for rank, hit in enumerate(hits, 1) if hit)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(relevant), k) + 1))
    return dcg / idcg


_METRIC_FUNCTIONS = {'recall': recall_at_k, 'ndcg': ndcg_at_k}


@dataclass
class MetricReport:
    ks: Tuple[int, ...]
    users: np.ndarray
    per_user: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)
    config_hash: str = ''

    @property
    def n_users(self):
        return len(self.users)

    def mean(self, metric, k):
        values = self.per_user[(metric, k)]
        return float(np.mean(values)) if len(values) else 0.0

    def rows(self):
        for metric in METRICS:
            for k in self.ks:
                yield metric, k, self.mean(metric, k), self.n_users, self.config_hash

    def as_dict(self):
        return {'%s@%d' % (metric, k): value for metric, k, value, _, _ in self.rows()}


class BackendRanker:
    """Scores items with the frozen backend: ``e_u . e_i``."""
    name = 'backend'

    def __init__(self, tables):
        self.tables = tables

    def score_users(self, users, ds):
        return self.tables.user_emb[users] @ self.tables.item_emb.T


class DiffusionRanker:
    """Scores items against the generated ideal item embedding of each user."""
    name = 'ddrm'

    def __init__(self, tables, params, schedule, seed=0, start='average', stochastic=False):
        self.tables = tables
        self.params = params
        self.schedule = schedule
        self.seed = seed
        self.start = start
        self.stochastic = stochastic

    def score_users(self, users, ds):
        vectors = generate_ideal_items(
            users, ds, self.tables, self.params, self.schedule, self.seed,
            start=self.start, stochastic=self.stochastic,
        )
        return vectors @ self.tables.item_emb.T


def rank_users(ranker, ds, users, k, exclude='seen'):
    """Top-``k`` ``RankedList`` per user, excluding the user's ``exclude`` positives."""
    lists = []
    users = np.asarray(users, dtype=np.int64)
    for start in range(0, len(users), CHUNK_SIZE):
        chunk = users[start:start + CHUNK_SIZE]
        scores = ranker.score_users(chunk, ds)
        excluded = [ds.positives(int(u), exclude) for u in chunk]
        for u, (items, item_scores) in zip(chunk, top_k(scores, excluded, k)):
            lists.append(RankedList(int(u), items, item_scores, truncated=len(items) < k))
    return lists


def report_from_lists(lists, ds, ks=DEFAULT_KS, split='test', config_hash=''):
    ks = tuple(sorted(set(int(k) for k in ks)))
    per_user = {(metric, k): np.zeros(len(lists)) for metric in METRICS for k in ks}
    for index, ranked in enumerate(lists):
        relevant = ds.positives(ranked.user_id, split)
        for metric in METRICS:
            for k in ks:
                per_user[(metric, k)][index] = _METRIC_FUNCTIONS[metric](ranked, relevant, k)
    users = np.array([ranked.user_id for ranked in lists], dtype=np.int64)
    return MetricReport(ks, users, per_user, config_hash)


def evaluate(ranker, ds, ks=DEFAULT_KS, split='test', config_hash=''):
    """
    Score ``ranker`` on ``split``: test excludes train and valid positives, valid
    excludes train positives.
    """
    if split not in EXCLUSIONS:
        raise ContractViolation('can only evaluate on valid or test, got %r' % split)
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ContractViolation('K values must be positive, got %r' % (ks,))
    users = ds.evaluable_users(split)
    lists = rank_users(ranker, ds, users, ks[-1], exclude=EXCLUSIONS[split])
    report = report_from_lists(lists, ds, ks, split, config_hash)
    logger.debug(
        'Evaluated %s on %s: %s', getattr(ranker, 'name', type(ranker).__name__), split, report.as_dict(),
        extra={'split': split, 'n_users': report.n_users},
    )
    return report


def write_metrics(report, path, header=''):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        if header:
            f.write(header + '\n')
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['metric', 'k', 'value', 'n_users', 'config_hash'])
        for metric, k, value, n_users, config_hash in report.rows():
            writer.writerow([metric, k, repr(value), n_users, config_hash])


def read_metrics(path):
    with open(path, newline='', encoding='utf-8') as f:
        rows = [line for line in f if not line.startswith('#')]
    return {(row['metric'], int(row['k'])): float(row['value']) for row in csv.DictReader(rows)}
