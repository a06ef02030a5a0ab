# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Generating an ideal item embedding per user and rounding it to catalog items.

The chain starts from the mean embedding of the user's liked (train) items, noised
to step T, and is walked back to step 0 through the item denoiser conditioned on
the user's original embedding. Alternatively it starts from pure Gaussian noise.
"""
import csv
import logging
from dataclasses import dataclass

import numpy as np

from ddrm.diffusion import DiffusionState, forward_to_t, reconstruct, reverse_step
from ddrm.exceptions import ColdUserError, ContractViolation
from ddrm.numerics import DTYPE, Rng, derive_seed

logger = logging.getLogger('ddrm.inference')

START_MODES = ('average', 'pure_noise')


@dataclass(frozen=True, eq=False)
class RankedList:
    user_id: int
    items: np.ndarray
    scores: np.ndarray
    truncated: bool = False

    def __len__(self):
        return len(self.items)


def average_liked_embedding(user, ds, tables):
    liked = ds.positives(user, 'train')
    if not len(liked):
        raise ColdUserError(user)
    return tables.item_emb[liked].mean(axis=0)


def _chain_noise(rng, steps, dim, stochastic):
    """One start draw, then one draw per reverse step when sampling stochastically."""
    return rng.standard_normal((1 + steps if stochastic else 1, dim))


def _run_chain(starts, conditions, noise, params, schedule, start, stochastic):
    steps = schedule.steps
    if start == 'average':
        state = forward_to_t(starts, steps, schedule, noise=noise[:, 0], role='item')
    else:
        state = DiffusionState(noise[:, 0].copy(), steps, 'item')
    for t in range(steps, 0, -1):
        tilde_e0 = reconstruct(state, conditions, params, role='item')
        state = reverse_step(
            state, tilde_e0, schedule, stochastic=stochastic,
            noise=noise[:, steps - t + 1] if stochastic else None,
        )
    return state.vector


def _check_start(start):
    if start not in START_MODES:
        raise ContractViolation('start must be one of %s, got %r' % (', '.join(START_MODES), start))


def generate_ideal_item(user, ds, tables, params, schedule, rng, start='average', stochastic=False):
    """The generated item embedding for one user, with all noise drawn from ``rng``."""
    _check_start(start)
    starts = average_liked_embedding(user, ds, tables)[None, :] if start == 'average' else None
    noise = _chain_noise(rng, schedule.steps, tables.dim, stochastic)[None, :, :]
    conditions = tables.user_emb[[user]]
    return _run_chain(starts, conditions, noise, params, schedule, start, stochastic)[0]


def generate_ideal_items(users, ds, tables, params, schedule, seed, start='average', stochastic=False):
    """
    Batched ``generate_ideal_item``; user ``u`` draws from its own stream
    ``Rng(derive_seed(seed, 'infer', u))`` so results do not depend on batching.
    """
    _check_start(start)
    users = np.asarray(users, dtype=np.int64)
    if not len(users):
        return np.zeros((0, tables.dim))
    noise = np.stack([
        _chain_noise(Rng(derive_seed(seed, 'infer', int(u))), schedule.steps, tables.dim, stochastic)
        for u in users
    ])
    starts = None
    if start == 'average':
        starts = np.stack([average_liked_embedding(int(u), ds, tables) for u in users])
    return _run_chain(starts, tables.user_emb[users], noise, params, schedule, start, stochastic)


def top_k(scores, excluded, k):
    """
    Item ids and scores of the ``k`` best non-excluded items per row; ties go to the
    lower item id. Rows with fewer candidates than ``k`` come back shorter.
    """
    scores = np.array(scores, dtype=DTYPE)
    single = scores.ndim == 1
    scores = np.atleast_2d(scores)
    masked = scores.copy()
    for row, items in enumerate(excluded):
        masked[row, np.asarray(items, dtype=np.int64)] = -np.inf
    order = np.argsort(-masked, axis=1, kind='stable')[:, :k]
    picked = []
    for row in range(len(masked)):
        items = order[row]
        items = items[np.isfinite(masked[row, items])]
        picked.append((items, scores[row, items]))
    return picked[0] if single else picked


def round_to_items(vector, tables, exclusions, k, user_id=-1):
    """Rank the catalog by inner product with ``vector``, skipping ``exclusions``."""
    if k < 1:
        raise ContractViolation('K must be at least 1, got %r' % k)
    vector = np.asarray(vector, dtype=DTYPE)
    if vector.shape != (tables.dim,):
        raise ContractViolation('expected a %d-dimensional embedding, got shape %r' % (tables.dim, vector.shape))
    items, scores = top_k(tables.item_emb @ vector, [exclusions], k)
    return RankedList(user_id, items, scores, truncated=len(items) < k)


def write_recommendations(lists, path, header='', user_ids=None, item_ids=None):
    """``user_id,rank,item_id,score`` rows; ids are mapped back to raw ids when maps are given."""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        if header:
            f.write(header + '\n')
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['user_id', 'rank', 'item_id', 'score'])
        for ranked in lists:
            user = ranked.user_id if user_ids is None else user_ids[ranked.user_id]
            for rank, (item, score) in enumerate(zip(ranked.items, ranked.scores), 1):
                writer.writerow([
                    int(user), rank, int(item if item_ids is None else item_ids[item]), repr(float(score)),
                ])
