# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import os

import numpy as np

from ddrm.backend import EmbeddingTable
from ddrm.data import chronological_split, load_interactions, load_manifest


def write_tsv(path, rows):
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write('\t'.join(str(value) for value in row) + '\n')
    return path


def planted_blocks(num_users=200, num_items=100, per_user=15, low_per_user=0, seed=0):
    """
    Two-block preferences: the first half of the users like (rating 5) items from the
    first half of the catalog, the second half from the second. ``low_per_user``
    rating-2 rows land in the other block.
    """
    generator = np.random.default_rng(seed)
    half_users, half_items = num_users // 2, num_items // 2
    rows = []
    for user in range(num_users):
        own = 0 if user < half_users else half_items
        other = half_items - own
        liked = generator.choice(half_items, size=per_user, replace=False) + own
        disliked = generator.choice(half_items, size=low_per_user, replace=False) + other
        for item in liked:
            rows.append((user, int(item), 5, int(generator.integers(0, 1000000))))
        for item in disliked:
            rows.append((user, int(item), 2, int(generator.integers(0, 1000000))))
    return rows


def in_block(user, item, num_users=200, num_items=100):
    return (user < num_users // 2) == (item < num_items // 2)


def dataset_from_rows(directory, rows, name='ratings.tsv', ratios=None):
    ds = load_interactions(write_tsv(os.path.join(directory, name), rows))
    return chronological_split(ds) if ratios is None else chronological_split(ds, ratios)


def random_tables(num_users, num_items, dim, seed=0, scale=1.0):
    generator = np.random.default_rng(seed)
    return EmbeddingTable(
        scale * generator.standard_normal((num_users, dim)),
        scale * generator.standard_normal((num_items, dim)),
    )


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


def numeric_gradient(function, params, h=1e-3):
    """Central finite differences of ``function(params)`` for every entry of every array."""
    grads = {}
    for name, value in params.items():
        grad = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            shifted = {key: array.copy() for key, array in params.items()}
            shifted[name][index] = value[index] + h
            upper = function(shifted)
            shifted[name][index] = value[index] - h
            lower = function(shifted)
            grad[index] = (upper - lower) / (2 * h)
        grads[name] = grad
    return grads


def tiny_manifest(directory):
    """
    Two users and five items with hand-placed splits:

    train (0, 0), (0, 1), (1, 2); valid (0, 2); test (0, 3), (1, 4).
    """
    path = os.path.join(directory, 'split.tsv')
    rows = [
        (0, 0, 'train', 1), (0, 1, 'train', 2), (1, 2, 'train', 3),
        (0, 2, 'valid', 4), (0, 3, 'test', 5), (1, 4, 'test', 6),
    ]
    with open(path, 'w', encoding='utf-8') as f:
        f.write('# ddrm-manifest num_users=2 num_items=5\n')
        for user, item, split, timestamp in rows:
            f.write('%d\t%d\t5.0\t%d\t%s\t0\n' % (user, item, timestamp, split))
    return load_manifest(path)


def tiny_tables():
    """User 0 ranks items 0 > 1 > 2 > 3 > 4; user 1 ranks 3 > 4 > 0 = 1 = 2."""
    return EmbeddingTable(
        np.array([[1.0, 0.0], [0.0, 1.0]]),
        np.array([[5.0, 0.0], [4.0, 0.0], [3.0, 0.0], [2.0, 0.5], [0.0, 0.1]]),
    )
