# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Reverse-mode gradients for the closed family of primitives used by the backends and
the denoisers: matmul, add, concat, tanh, sigmoid, log-sigmoid, squared norm,
row-wise inner product and scalar-weighted sums.

A loss is described by a builder function that receives the parameter nodes and
combines them through the functions of this module only. Anything else (a numpy
ufunc applied to a node, a foreign object returned as the loss) is rejected with
ContractViolation.
"""
import numpy as np
from scipy import sparse
from scipy.special import expit, log_expit

from ddrm.exceptions import ContractViolation
from ddrm.numerics import DTYPE

PRIMITIVES = frozenset({
    'add',
    'concat',
    'inner',
    'log_sigmoid',
    'matmul',
    'reduce_sum',
    'sigmoid',
    'sq_norm',
    'tanh',
    'weighted_sum',
})


class Var:
    """A value in a loss computation, remembering how to push gradients to its inputs."""

    __slots__ = ('value', 'op', 'requires_grad', '_parents', '_backward')

    def __init__(self, value, op='leaf', parents=(), backward=None, requires_grad=False):
        self.value = value
        self.op = op
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return 'Var(op=%s, shape=%r)' % (self.op, self.shape)

    @property
    def shape(self):
        return np.shape(self.value)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise ContractViolation('unsupported primitive %r in a loss computation' % ufunc.__name__)

    def __array_function__(self, func, types, args, kwargs):
        raise ContractViolation('unsupported primitive %r in a loss computation' % func.__name__)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return weighted_sum((1.0, self), (-1.0, other))

    def __rsub__(self, other):
        return weighted_sum((1.0, other), (-1.0, self))

    def __neg__(self):
        return weighted_sum((-1.0, self))

    def __mul__(self, other):
        if not np.isscalar(other):
            raise ContractViolation('only scalar weights may multiply a node')
        return weighted_sum((float(other), self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def constant(value):
    return Var(np.asarray(value, dtype=DTYPE))


def parameter(value):
    return Var(np.array(value, dtype=DTYPE), requires_grad=True)


def lift(x):
    return x if isinstance(x, Var) else constant(x)


def _node(value, op, parents, backward):
    requires_grad = any(p.requires_grad for p in parents)
    return Var(value, op, parents if requires_grad else (), backward if requires_grad else None, requires_grad)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b):
    if sparse.issparse(a):
        # Constant sparse operator, e.g. a normalized adjacency matrix.
        b = lift(b)
        if a.shape[1] != b.shape[0]:
            raise ContractViolation('matmul dimension mismatch: %r x %r' % (a.shape, b.shape))
        return _node(np.asarray(a @ b.value), 'matmul', (b,), lambda g: (np.asarray(a.T @ g),))
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation('matmul dimension mismatch: %r x %r' % (a.shape, b.shape))
    return _node(
        a.value @ b.value, 'matmul', (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def add(a, b):
    a, b = lift(a), lift(b)
    try:
        value = a.value + b.value
    except ValueError as e:
        raise ContractViolation('add shape mismatch: %s' % e)
    return _node(
        value, 'add', (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def weighted_sum(*terms):
    """Linear combination ``sum(c * x)`` with scalar coefficients ``c``."""
    if not terms:
        raise ContractViolation('weighted_sum needs at least one term')
    coefs = [float(c) for c, _ in terms]
    parts = [lift(x) for _, x in terms]
    value = coefs[0] * parts[0].value
    for c, x in zip(coefs[1:], parts[1:]):
        value = value + c * x.value
    return _node(
        value, 'weighted_sum', tuple(parts),
        lambda g: tuple(_unbroadcast(c * g, x.shape) for c, x in zip(coefs, parts)),
    )


def concat(parts, axis=-1):
    parts = [lift(x) for x in parts]
    value = np.concatenate([x.value for x in parts], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in parts])[:-1]
    return _node(value, 'concat', tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def tanh(x):
    x = lift(x)
    y = np.tanh(x.value)
    return _node(y, 'tanh', (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = lift(x)
    y = expit(x.value)
    return _node(y, 'sigmoid', (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x):
    x = lift(x)
    return _node(log_expit(x.value), 'log_sigmoid', (x,), lambda g: (g * expit(-x.value),))


def sq_norm(x):
    """Squared Euclidean norm along the last axis."""
    x = lift(x)
    return _node(
        np.sum(x.value * x.value, axis=-1), 'sq_norm', (x,),
        lambda g: (2.0 * np.expand_dims(g, -1) * x.value,),
    )


def inner(a, b):
    """Row-wise inner product along the last axis."""
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise ContractViolation('inner shape mismatch: %r vs %r' % (a.shape, b.shape))
    return _node(
        np.sum(a.value * b.value, axis=-1), 'inner', (a, b),
        lambda g: (np.expand_dims(g, -1) * b.value, np.expand_dims(g, -1) * a.value),
    )


def reduce_sum(x, weights=None):
    """Scalar ``sum(w * x)``; the weights are constants and receive no gradient."""
    x = lift(x)
    w = 1.0 if weights is None else np.asarray(weights, dtype=DTYPE)
    return _node(
        np.sum(w * x.value), 'reduce_sum', (x,),
        lambda g: (np.array(np.broadcast_to(g * w, x.shape)),),
    )


def _topological(loss):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if p.requires_grad and id(p) not in seen)
    return order


def backprop(loss):
    """Gradients of a scalar node, keyed by ``id`` of every node that requires them."""
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        if node.op not in PRIMITIVES:
            raise ContractViolation('unsupported primitive %r in a loss computation' % node.op)
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    return grads


def value_and_grad(loss_builder, params):
    """
    Evaluate ``loss_builder`` on parameter nodes built from ``params`` (a mapping of
    names to arrays) and return ``(loss, {name: gradient})``.
    """
    leaves = {name: parameter(value) for name, value in params.items()}
    loss = loss_builder(leaves)
    if not isinstance(loss, Var):
        raise ContractViolation('loss builder returned %s, not a node' % type(loss).__name__)
    if np.ndim(loss.value) != 0:
        raise ContractViolation('loss must be a scalar, got shape %r' % (loss.shape,))
    if not loss.requires_grad:
        return float(loss.value), {name: np.zeros_like(leaf.value) for name, leaf in leaves.items()}
    grads = backprop(loss)
    return float(loss.value), {
        name: grads.get(id(leaf), np.zeros_like(leaf.value)) for name, leaf in leaves.items()
    }


def grad(loss_builder, params):
    return value_and_grad(loss_builder, params)[1]
