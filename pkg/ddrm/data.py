# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Timestamped interaction data: loading, chronological splits, noise injection and
BPR triplet sampling.

Ratings of 4 and above are true positives; anything below is a false-positive
interaction that only ever enters the train and valid splits.
"""
import logging
import math
import os
import re
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from django.utils.functional import cached_property
from scipy import sparse

from ddrm.exceptions import ContractViolation, DatasetError

logger = logging.getLogger('ddrm.data')

POSITIVE_THRESHOLD = 4.0
NOISE_RATING = -1.0
SOFT_NOISE_RATIO = 0.6
SPLITS = ('train', 'valid', 'test')
DEFAULT_RATIOS = (0.7, 0.1, 0.2)

# Above this many (user, item) cells unobserved pairs are found by rejection sampling.
DENSE_SAMPLING_LIMIT = 1 << 22
MAX_RESAMPLE_ROUNDS = 32

_INDEX_RE = re.compile(r'^[0-9]+$')


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    timestamp: int


@dataclass(frozen=True, eq=False)
class Interactions:
    """Column-oriented interaction records; ``noise`` marks injected rows."""
    user: np.ndarray
    item: np.ndarray
    rating: np.ndarray
    timestamp: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        for name, dtype in (('user', np.int64), ('item', np.int64), ('rating', np.float64),
                            ('timestamp', np.int64), ('noise', np.bool_)):
            column = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            column.flags.writeable = False
            object.__setattr__(self, name, column)
        if len({len(self.user), len(self.item), len(self.rating), len(self.timestamp), len(self.noise)}) != 1:
            raise ContractViolation('interaction columns differ in length')

    @classmethod
    def empty(cls):
        return cls([], [], [], [], [])

    @classmethod
    def from_records(cls, records, noise=False):
        records = list(records)
        return cls(
            [r.user_id for r in records], [r.item_id for r in records],
            [r.rating for r in records], [r.timestamp for r in records],
            [noise] * len(records),
        )

    def __len__(self):
        return len(self.user)

    def __iter__(self):
        for u, i, r, t in zip(self.user, self.item, self.rating, self.timestamp):
            yield Interaction(int(u), int(i), float(r), int(t))

    def take(self, index):
        return Interactions(
            self.user[index], self.item[index], self.rating[index], self.timestamp[index], self.noise[index],
        )

    def concat(self, other):
        return Interactions(
            np.concatenate([self.user, other.user]),
            np.concatenate([self.item, other.item]),
            np.concatenate([self.rating, other.rating]),
            np.concatenate([self.timestamp, other.timestamp]),
            np.concatenate([self.noise, other.noise]),
        )

    def chronological(self):
        """Rows ordered by timestamp, ties broken by (user_id, item_id) ascending."""
        return self.take(np.lexsort((self.item, self.user, self.timestamp)))

    def keys(self, num_items):
        return self.user * num_items + self.item


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    num_users: int
    num_items: int
    interactions: Interactions
    user_ids: np.ndarray
    item_ids: np.ndarray
    train: Optional[Interactions] = None
    valid: Optional[Interactions] = None
    test: Optional[Interactions] = None
    boundaries: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    cold_users: Tuple[int, ...] = ()

    @property
    def is_split(self):
        return self.train is not None

    @property
    def noise_flags(self):
        self._require_split()
        return self.train.noise

    def _require_split(self):
        if not self.is_split:
            raise ContractViolation('dataset has not been split yet')

    def split(self, name):
        self._require_split()
        if name not in SPLITS:
            raise ContractViolation('unknown split %r' % name)
        return getattr(self, name)

    def _matrix(self, *names):
        rows = [self.split(name) for name in names]
        users = np.concatenate([r.user for r in rows])
        items = np.concatenate([r.item for r in rows])
        matrix = sparse.csr_matrix(
            (np.ones(len(users)), (users, items)), shape=(self.num_users, self.num_items),
        )
        matrix.sum_duplicates()
        matrix.data[:] = 1.0
        return matrix

    @cached_property
    def train_matrix(self):
        return self._matrix('train')

    @cached_property
    def seen_matrix(self):
        """Train and valid positives: the exclusion set at test time."""
        return self._matrix('train', 'valid')

    @cached_property
    def valid_matrix(self):
        return self._matrix('valid')

    @cached_property
    def test_matrix(self):
        return self._matrix('test')

    @cached_property
    def _train_keys(self):
        return np.unique(self.train.keys(self.num_items))

    def positives(self, user, split='train'):
        """Sorted item ids of ``user`` in ``split`` (``seen`` is train and valid)."""
        matrix = self.seen_matrix if split == 'seen' else getattr(self, '%s_matrix' % split)
        return matrix.indices[matrix.indptr[user]:matrix.indptr[user + 1]].copy()

    def is_train_positive(self, users, items):
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        if not len(self._train_keys):
            return np.zeros(keys.shape, dtype=bool)
        found = np.minimum(np.searchsorted(self._train_keys, keys), len(self._train_keys) - 1)
        return self._train_keys[found] == keys

    def evaluable_users(self, split='test'):
        """Users with at least one relevant item in ``split`` and one training positive."""
        self.split(split)
        relevant = np.diff(getattr(self, '%s_matrix' % split).indptr)
        has_train = np.diff(self.train_matrix.indptr) > 0
        users = np.flatnonzero((relevant > 0) & has_train)
        if self.cold_users:
            users = np.setdiff1d(users, np.asarray(self.cold_users, dtype=np.int64))
        return users

    def statistics(self):
        stats = {'users': self.num_users, 'items': self.num_items, 'interactions': len(self.interactions)}
        if self.is_split:
            for name in SPLITS:
                rows = self.split(name)
                stats[name] = len(rows)
                stats['%s_noise' % name] = int(rows.noise.sum())
            stats['cold_users'] = len(self.cold_users)
        return stats


def _parse_index(text, what, line):
    text = text.strip()
    if not _INDEX_RE.match(text):
        raise DatasetError('%s must be a non-negative base-10 integer, got %r' % (what, text), line=line)
    return int(text)


def _parse_rating(text, line):
    try:
        value = float(text)
    except ValueError:
        raise DatasetError('rating must be a decimal number, got %r' % text.strip(), line=line)
    if not math.isfinite(value):
        raise DatasetError('rating must be finite, got %r' % text.strip(), line=line)
    return value


def _read_rows(path, width):
    rows = []
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, 1):
            line = line.rstrip('\r\n')
            if not line.strip() or line.startswith('#'):
                continue
            fields = line.split('\t')
            if len(fields) != width:
                raise DatasetError(
                    'expected %d tab-separated fields, got %d' % (width, len(fields)), line=line_number,
                )
            rows.append((line_number, fields))
    if not rows:
        raise DatasetError('%s contains no interactions' % path)
    return rows


def load_interactions(path):
    """
    Parse a ``user_id<TAB>item_id<TAB>rating<TAB>timestamp`` file.

    Raw ids are re-indexed densely in ascending raw-id order; the raw ids stay
    available as ``user_ids``/``item_ids`` (dense index -> raw id).
    """
    users, items, ratings, stamps = [], [], [], []
    for line_number, fields in _read_rows(path, 4):
        users.append(_parse_index(fields[0], 'user_id', line_number))
        items.append(_parse_index(fields[1], 'item_id', line_number))
        ratings.append(_parse_rating(fields[2], line_number))
        stamps.append(_parse_index(fields[3], 'timestamp', line_number))

    user_ids, user = np.unique(np.asarray(users, dtype=np.int64), return_inverse=True)
    item_ids, item = np.unique(np.asarray(items, dtype=np.int64), return_inverse=True)
    logger.info(
        'Loaded %d interactions (%d users, %d items) from %s', len(users), len(user_ids), len(item_ids), path,
        extra={'interactions': len(users), 'users': len(user_ids), 'items': len(item_ids)},
    )
    return InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        interactions=Interactions(user, item, ratings, stamps, np.zeros(len(users), dtype=bool)),
        user_ids=user_ids,
        item_ids=item_ids,
    )


def _deduplicate(rows, num_items):
    """Keep one row per (user, item): the latest timestamp, then the last in file order."""
    order = np.lexsort((np.arange(len(rows)), rows.timestamp))[::-1]
    _, first = np.unique(rows.keys(num_items)[order], return_index=True)
    keep = np.sort(order[first])
    if len(keep) < len(rows):
        logger.debug('Dropped %d duplicate (user, item) rows', len(rows) - len(keep))
    return rows.take(keep)


def _time_range(rows):
    if not len(rows):
        return None
    return int(rows.timestamp.min()), int(rows.timestamp.max())


def chronological_split(ds, ratios=DEFAULT_RATIOS):
    if ds.is_split:
        raise ContractViolation('dataset is already split')
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractViolation('split ratios must be three non-negative numbers summing to 1, got %r' % (ratios,))

    rows = _deduplicate(ds.interactions, ds.num_items)
    positives = rows.take(rows.rating >= POSITIVE_THRESHOLD).chronological()
    n = len(positives)
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_valid = int(math.floor(n * (ratios[0] + ratios[1]) + 1e-9)) - n_train
    train = positives.take(slice(0, n_train))
    valid = positives.take(slice(n_train, n_train + n_valid))
    test = positives.take(slice(n_train + n_valid, n))

    boundaries = {}
    for name, split_rows in zip(SPLITS, (train, valid, test)):
        time_range = _time_range(split_rows)
        if time_range is not None:
            boundaries[name] = time_range

    seen_users = np.unique(np.concatenate([valid.user, test.user]))
    cold = np.setdiff1d(seen_users, np.unique(train.user))
    if len(cold):
        logger.warning(
            '%d users have no training positives and are dropped from evaluation', len(cold),
            extra={'cold_users': len(cold)},
        )
    logger.info(
        'Chronological split: %d train, %d valid, %d test', len(train), len(valid), len(test),
        extra={'train': len(train), 'valid': len(valid), 'test': len(test)},
    )
    return replace(
        ds, interactions=rows, train=train, valid=valid, test=test,
        boundaries=boundaries, cold_users=tuple(int(u) for u in cold),
    )


def _observed_keys(ds):
    return np.unique(np.concatenate([ds.split(name).keys(ds.num_items) for name in SPLITS]))


def _flagged(rows):
    return Interactions(rows.user, rows.item, rows.rating, rows.timestamp, np.ones(len(rows), dtype=bool))


def apply_natural_noise(ds):
    """Add the false-positive interactions (rating below 4) to the train and valid splits."""
    ds._require_split()
    if 'train' not in ds.boundaries:
        raise DatasetError('cannot place natural noise without a training split')
    false_positives = ds.interactions.take(ds.interactions.rating < POSITIVE_THRESHOLD)
    fresh = ~np.isin(false_positives.keys(ds.num_items), _observed_keys(ds))
    false_positives = false_positives.take(fresh)

    train_end = ds.boundaries['train'][1]
    valid_end = ds.boundaries.get('valid', ds.boundaries['train'])[1]
    to_train = false_positives.timestamp <= train_end
    to_valid = ~to_train & (false_positives.timestamp <= valid_end)
    discarded = len(false_positives) - int(to_train.sum()) - int(to_valid.sum())
    logger.info(
        'Natural noise: %d rows into train, %d into valid, %d in the test period discarded',
        int(to_train.sum()), int(to_valid.sum()), discarded,
        extra={'train_noise': int(to_train.sum()), 'valid_noise': int(to_valid.sum()), 'discarded': discarded},
    )
    return replace(
        ds,
        train=ds.train.concat(_flagged(false_positives.take(to_train))).chronological(),
        valid=ds.valid.concat(_flagged(false_positives.take(to_valid))).chronological(),
    )


def _sample_unobserved(observed, space, n, rng):
    available = space - len(observed)
    if n > available:
        raise DatasetError('cannot inject %d noisy pairs, only %d unobserved pairs exist' % (n, available))
    if space <= DENSE_SAMPLING_LIMIT or available < 4 * n:
        candidates = np.setdiff1d(np.arange(space, dtype=np.int64), observed, assume_unique=True)
        return rng.choice(candidates, size=n, replace=False)
    picked, taken = [], set()
    while len(picked) < n:
        draws = rng.integers(0, space, size=2 * (n - len(picked)))
        for key in draws[~np.isin(draws, observed)]:
            key = int(key)
            if key not in taken:
                taken.add(key)
                picked.append(key)
                if len(picked) == n:
                    break
    return np.asarray(picked, dtype=np.int64)


def _injected(keys, num_items, time_range, rng):
    low, high = time_range
    return Interactions(
        keys // num_items,
        keys % num_items,
        np.full(len(keys), NOISE_RATING),
        rng.integers(low, high + 1, size=len(keys)),
        np.ones(len(keys), dtype=bool),
    )


def apply_random_noise(ds, ratio, rng):
    """
    Add ``floor(ratio * |split|)`` uniformly sampled unobserved pairs to train and
    valid. Injected rows carry the rating sentinel -1 and a timestamp drawn
    uniformly within the target split's time range.
    """
    ds._require_split()
    ratio = float(ratio)
    if not 0.0 <= ratio <= 1.0:
        raise ContractViolation('noise ratio must lie in [0, 1], got %r' % ratio)
    if ratio > SOFT_NOISE_RATIO:
        warnings.warn('noise ratio %.2f exceeds the studied range (0 to 0.6)' % ratio, RuntimeWarning)
    n_train = int(math.floor(ratio * len(ds.train)))
    n_valid = int(math.floor(ratio * len(ds.valid)))
    if n_train + n_valid == 0:
        return ds
    if 'train' not in ds.boundaries:
        raise DatasetError('cannot place random noise without a training split')

    keys = _sample_unobserved(_observed_keys(ds), ds.num_users * ds.num_items, n_train + n_valid, rng)
    train_range = ds.boundaries['train']
    valid_range = ds.boundaries.get('valid', train_range)
    train = ds.train.concat(_injected(keys[:n_train], ds.num_items, train_range, rng))
    valid = ds.valid.concat(_injected(keys[n_train:], ds.num_items, valid_range, rng))
    logger.info(
        'Random noise (ratio %.2f): %d rows into train, %d into valid', ratio, n_train, n_valid,
        extra={'ratio': ratio, 'train_noise': n_train, 'valid_noise': n_valid},
    )
    return replace(ds, train=train.chronological(), valid=valid.chronological())


def sample_triplets(ds, rng, n):
    """
    Draw ``n`` BPR triplets: (u, i) uniformly from the train rows, j uniformly among
    the items that are not train positives of u.
    """
    ds._require_split()
    if not len(ds.train):
        raise ContractViolation('cannot sample triplets from an empty training split')
    saturated = np.diff(ds.train_matrix.indptr) >= ds.num_items

    rows = rng.integers(0, len(ds.train), size=n)
    for _ in range(MAX_RESAMPLE_ROUNDS):
        redo = np.flatnonzero(saturated[ds.train.user[rows]])
        if not len(redo):
            break
        rows[redo] = rng.integers(0, len(ds.train), size=len(redo))
    else:
        raise DatasetError('could not draw a user with a free negative item')
    users = ds.train.user[rows]
    positives = ds.train.item[rows]

    negatives = rng.integers(0, ds.num_items, size=n)
    for _ in range(MAX_RESAMPLE_ROUNDS):
        redo = np.flatnonzero(ds.is_train_positive(users, negatives))
        if not len(redo):
            break
        negatives[redo] = rng.integers(0, ds.num_items, size=len(redo))
    else:
        # Users with very few free items: draw directly from their complement.
        for k in np.flatnonzero(ds.is_train_positive(users, negatives)):
            free = np.setdiff1d(np.arange(ds.num_items), ds.positives(users[k]))
            negatives[k] = rng.choice(free, size=1)[0]
    return users, positives, negatives


def sample_triplet(ds, rng):
    users, positives, negatives = sample_triplets(ds, rng, 1)
    return int(users[0]), int(positives[0]), int(negatives[0])


def write_manifest(ds, path, header=''):
    """Write every split as ``user<TAB>item<TAB>rating<TAB>timestamp<TAB>split<TAB>noise`` (dense ids)."""
    ds._require_split()
    with open(path, 'w', encoding='utf-8') as f:
        f.write('# ddrm-manifest num_users=%d num_items=%d %s\n' % (ds.num_users, ds.num_items, header))
        for name in SPLITS:
            rows = ds.split(name)
            for u, i, r, t, noise in zip(rows.user, rows.item, rows.rating, rows.timestamp, rows.noise):
                f.write('%d\t%d\t%r\t%d\t%s\t%d\n' % (u, i, float(r), t, name, int(noise)))


def write_id_map(ds, path):
    with open(path, 'w', encoding='utf-8') as f:
        for kind, ids in (('user', ds.user_ids), ('item', ds.item_ids)):
            for dense_id, raw_id in enumerate(ids):
                f.write('%s\t%d\t%d\n' % (kind, dense_id, raw_id))


def _read_id_map(path, num_users, num_items):
    user_ids, item_ids = np.arange(num_users), np.arange(num_items)
    if os.path.exists(path):
        for line_number, fields in _read_rows(path, 3):
            target = {'user': user_ids, 'item': item_ids}.get(fields[0])
            if target is None:
                raise DatasetError('unknown id kind %r' % fields[0], line=line_number)
            dense_id = _parse_index(fields[1], 'dense id', line_number)
            if dense_id >= len(target):
                raise DatasetError('dense id %d out of range' % dense_id, line=line_number)
            target[dense_id] = _parse_index(fields[2], 'raw id', line_number)
    return user_ids, item_ids


def _manifest_counts(path):
    with open(path, encoding='utf-8') as f:
        first = f.readline()
    counts = dict(re.findall(r'(num_users|num_items)=(\d+)', first))
    return int(counts.get('num_users', 0)), int(counts.get('num_items', 0))


def load_manifest(path, id_map_path=None):
    """Rebuild a split dataset written by ``write_manifest``."""
    columns = {name: ([], [], [], [], []) for name in SPLITS}
    for line_number, fields in _read_rows(path, 6):
        split_name = fields[4].strip()
        if split_name not in columns:
            raise DatasetError('split must be one of train, valid, test; got %r' % split_name, line=line_number)
        if fields[5].strip() not in ('0', '1'):
            raise DatasetError('noise flag must be 0 or 1, got %r' % fields[5].strip(), line=line_number)
        target = columns[split_name]
        target[0].append(_parse_index(fields[0], 'user_id', line_number))
        target[1].append(_parse_index(fields[1], 'item_id', line_number))
        target[2].append(_parse_rating(fields[2], line_number))
        target[3].append(_parse_index(fields[3], 'timestamp', line_number))
        target[4].append(fields[5].strip() == '1')

    splits = {name: Interactions(*columns[name]) for name in SPLITS}
    num_users, num_items = _manifest_counts(path)
    everything = splits['train'].concat(splits['valid']).concat(splits['test'])
    num_users = max(num_users, int(everything.user.max()) + 1)
    num_items = max(num_items, int(everything.item.max()) + 1)
    if id_map_path is None:
        id_map_path = os.path.join(os.path.dirname(os.path.abspath(path)), 'id_map.tsv')
    user_ids, item_ids = _read_id_map(id_map_path, num_users, num_items)

    clean_train = splits['train'].take(~splits['train'].noise)
    boundaries = {name: _time_range(rows) for name, rows in splits.items() if len(rows)}
    if len(clean_train):
        boundaries['train'] = _time_range(clean_train)
    cold = np.setdiff1d(
        np.unique(np.concatenate([splits[name].take(~splits[name].noise).user for name in ('valid', 'test')])),
        np.unique(clean_train.user),
    )
    return InteractionDataset(
        num_users=num_users, num_items=num_items, interactions=everything,
        user_ids=user_ids, item_ids=item_ids, boundaries=boundaries,
        cold_users=tuple(int(u) for u in cold), **splits,
    )
