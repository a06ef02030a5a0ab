# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Dense matrices, seeded random streams and sub-seed derivation.

Dense matrices are plain 2-D ``numpy`` arrays of float64. Checkpoints store them as
little-endian float32; all arithmetic happens in float64.
"""
import hashlib

import numpy as np

from ddrm.exceptions import ContractViolation

DTYPE = np.float64
STORAGE_DTYPE = np.dtype('<f4')


def check_finite(array, what='matrix'):
    if not np.all(np.isfinite(array)):
        raise ContractViolation('%s contains NaN or Inf' % what)
    return array


def dense(data, rows=None, cols=None):
    """Build a DenseMatrix from nested sequences or a flat row-major buffer."""
    array = np.array(data, dtype=DTYPE)
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise ContractViolation('rows and cols must be given together')
        if array.size != rows * cols:
            raise ContractViolation('data length %d != %d x %d' % (array.size, rows, cols))
        array = array.reshape(rows, cols)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ContractViolation('a DenseMatrix is two-dimensional, got shape %r' % (array.shape,))
    return check_finite(array)


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation('matmul expects 2-D operands, got %r and %r' % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ContractViolation('matmul dimension mismatch: %r x %r' % (a.shape, b.shape))
    return check_finite(a @ b, 'matmul result')


def derive_seed(seed, *tags):
    """Stable 63-bit sub-seed for ``seed`` and a sequence of role tags."""
    key = ':'.join([str(int(seed))] + [str(tag) for tag in tags])
    digest = hashlib.blake2b(key.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little') >> 1


class Rng:
    """
    Seeded random stream.

    Backed by numpy's PCG64 bit generator; normal draws use numpy's ziggurat sampler
    (``Generator.standard_normal``). Equal seeds give identical draw sequences.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return 'Rng(seed=%d)' % self.seed

    def spawn(self, *tags):
        return Rng(derive_seed(self.seed, *tags))

    def standard_normal(self, size):
        return self._generator.standard_normal(size, dtype=DTYPE)

    def integers(self, low, high, size=None):
        """Integers in the half-open range [low, high)."""
        return self._generator.integers(low, high, size=size, dtype=np.int64)

    def uniform(self, size=None):
        return self._generator.random(size, dtype=DTYPE)

    def choice(self, population, size, replace=True):
        return self._generator.choice(population, size=size, replace=replace)

    def permutation(self, n):
        return self._generator.permutation(n)


def sample_standard_normal(rng, n):
    if n <= 0:
        raise ContractViolation('n must be positive, got %r' % n)
    return rng.standard_normal(int(n))
