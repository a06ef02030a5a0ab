# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Noise schedules, the closed-form forward process, posterior reverse steps and the
conditioned denoising MLPs over embedding vectors.

Every operation accepts a single vector with a scalar step ``t`` or a batch of rows
with one step per row.
"""
import logging
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ddrm import autograd as ad
from ddrm.exceptions import CheckpointError, ContractViolation, ScheduleError
from ddrm.numerics import DTYPE, STORAGE_DTYPE, check_finite

logger = logging.getLogger('ddrm.diffusion')

SCHEDULE_KINDS = ('linear_variance', 'linear', 'cosine', 'binomial')
ROLES = ('user', 'item')

# Floor for the final cumulative signal level of the beta-based schedules.
MIN_ALPHA_BAR = 1e-5
MAX_BETA = 0.999
COSINE_OFFSET = 0.008

DENOISER_MAGIC = b'DDRMDNZ1'
_DENOISER_HEADER = struct.Struct('<3I')


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Per-step arrays indexed by ``t = 0..T``; index 0 is the clean state (alpha_bar 1).

    ``one_minus_alpha_bar`` is the primary quantity and is kept exactly as built, so
    small noise levels do not lose precision to ``1 - alpha_bar``.
    """
    steps: int
    scale: float
    alpha_min: float
    alpha_max: float
    kind: str
    one_minus_alpha_bar: np.ndarray
    alpha_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    posterior_variance: np.ndarray
    posterior_coef_xt: np.ndarray
    posterior_coef_x0: np.ndarray

    def check_step(self, t, low=1):
        t = np.asarray(t)
        if t.size and (np.any(t < low) or np.any(t > self.steps)):
            raise ContractViolation('step must lie in [%d, %d], got %r' % (low, self.steps, t.tolist()))


def _from_one_minus_alpha_bar(one_minus, steps, scale, alpha_min, alpha_max, kind):
    one_minus = np.concatenate([[0.0], np.asarray(one_minus, dtype=DTYPE)])
    if len(one_minus) != steps + 1:
        raise ScheduleError('expected %d noise levels, got %d' % (steps, len(one_minus) - 1))
    if not np.all(np.isfinite(one_minus)) or np.any(one_minus[1:] <= 0) or np.any(one_minus[1:] >= 1):
        raise ScheduleError('alpha_bar must lie strictly inside (0, 1) for every step')
    if np.any(np.diff(one_minus) <= 0):
        raise ScheduleError('alpha_bar must be strictly decreasing in t')

    alpha_bar = 1.0 - one_minus
    beta = np.zeros(steps + 1)
    beta[1:] = np.diff(one_minus) / alpha_bar[:-1]
    alpha = 1.0 - beta
    posterior_variance = np.zeros(steps + 1)
    coef_xt = np.zeros(steps + 1)
    coef_x0 = np.zeros(steps + 1)
    posterior_variance[1:] = beta[1:] * one_minus[:-1] / one_minus[1:]
    coef_xt[1:] = np.sqrt(alpha[1:]) * one_minus[:-1] / one_minus[1:]
    coef_x0[1:] = np.sqrt(alpha_bar[:-1]) * beta[1:] / one_minus[1:]
    for array in (one_minus, alpha_bar, alpha, beta, posterior_variance, coef_xt, coef_x0):
        array.flags.writeable = False
    return NoiseSchedule(
        steps=steps, scale=scale, alpha_min=alpha_min, alpha_max=alpha_max, kind=kind,
        one_minus_alpha_bar=one_minus, alpha_bar=alpha_bar, alpha=alpha, beta=beta,
        posterior_variance=posterior_variance, posterior_coef_xt=coef_xt, posterior_coef_x0=coef_x0,
    )


def schedule_from_alpha_bar(alpha_bar, kind='custom'):
    """Schedule from explicit cumulative signal levels for ``t = 1..T``."""
    alpha_bar = np.asarray(alpha_bar, dtype=DTYPE)
    return _from_one_minus_alpha_bar(1.0 - alpha_bar, len(alpha_bar), 0.0, 0.0, 0.0, kind)


def _betas(steps, scale, alpha_min, alpha_max, kind):
    t = np.arange(1, steps + 1, dtype=DTYPE)
    if kind == 'linear':
        return np.linspace(scale * alpha_min, scale * alpha_max, steps)
    if kind == 'cosine':
        def level(tau):
            return np.cos((tau / steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
        return np.minimum(1.0 - level(t) / level(t - 1), MAX_BETA)
    return 1.0 / (steps - t + 2)


def build_schedule(steps, scale, alpha_min, alpha_max, kind='linear_variance'):
    """
    Build a noise schedule with ``steps`` diffusion steps.

    ``linear_variance`` interpolates ``1 - alpha_bar_t`` linearly from
    ``scale * alpha_min`` at ``t = 1`` to ``scale * alpha_max`` at ``t = T`` (a single
    step sits at the ``alpha_min`` end). The other kinds define ``beta_t`` and take
    the cumulative product; when it would fall below 1e-5 the whole curve is lifted
    onto ``[1e-5, 1]``.
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError('schedule kind must be one of %s, got %r' % (', '.join(SCHEDULE_KINDS), kind))
    if int(steps) != steps or steps < 1:
        raise ScheduleError('the number of diffusion steps must be a positive integer, got %r' % steps)
    steps = int(steps)
    scale, alpha_min, alpha_max = float(scale), float(alpha_min), float(alpha_max)
    if kind in ('linear_variance', 'linear'):
        if not 0 < alpha_min < alpha_max:
            raise ScheduleError('need 0 < alpha_min < alpha_max, got %r and %r' % (alpha_min, alpha_max))
        if not 0 < scale < 1:
            raise ScheduleError('noise scale must lie in (0, 1), got %r' % scale)

    if kind == 'linear_variance':
        one_minus = scale * np.linspace(alpha_min, alpha_max, steps) if steps > 1 else np.array([scale * alpha_min])
    else:
        beta = _betas(steps, scale, alpha_min, alpha_max, kind)
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ScheduleError('%s schedule produced betas outside (0, 1)' % kind)
        alpha_bar = np.cumprod(1.0 - beta)
        if alpha_bar[-1] < MIN_ALPHA_BAR:
            alpha_bar = MIN_ALPHA_BAR + (1.0 - MIN_ALPHA_BAR) * alpha_bar
        one_minus = 1.0 - alpha_bar
    return _from_one_minus_alpha_bar(one_minus, steps, scale, alpha_min, alpha_max, kind)


@dataclass(frozen=True, eq=False)
class DiffusionState:
    """An embedding (or a batch of rows) at diffusion step ``t``."""
    vector: np.ndarray
    t: object
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractViolation('role must be user or item, got %r' % self.role)
        if np.any(np.asarray(self.t) < 0):
            raise ContractViolation('diffusion step must be non-negative')


def _per_row(values, t, ndim):
    """Coefficient ``values[t]`` shaped to broadcast against a vector or a batch of rows."""
    picked = values[np.asarray(t)]
    return picked[:, None] if np.ndim(picked) == 1 and ndim == 2 else picked


def forward_to_t(x0, t, schedule, rng=None, noise=None, role='item'):
    """``sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps``; ``noise`` forces eps."""
    x0 = np.asarray(x0, dtype=DTYPE)
    schedule.check_step(t)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    noise = np.asarray(noise, dtype=DTYPE)
    if noise.shape != x0.shape:
        raise ContractViolation('noise shape %r does not match %r' % (noise.shape, x0.shape))
    vector = (
        np.sqrt(_per_row(schedule.alpha_bar, t, x0.ndim)) * x0
        + np.sqrt(_per_row(schedule.one_minus_alpha_bar, t, x0.ndim)) * noise
    )
    return DiffusionState(vector, t, role)


def forward_step(x_prev, t, schedule, rng=None, noise=None):
    """One transition ``q(x_t | x_{t-1})``: ``sqrt(alpha_t) * x + sqrt(beta_t) * eps``."""
    x_prev = np.asarray(x_prev, dtype=DTYPE)
    schedule.check_step(t)
    if noise is None:
        noise = rng.standard_normal(x_prev.shape)
    return (
        np.sqrt(_per_row(schedule.alpha, t, x_prev.ndim)) * x_prev
        + np.sqrt(_per_row(schedule.beta, t, x_prev.ndim)) * noise
    )


def encode_step(t, dim):
    """Sinusoidal step encoding with interleaved ``(sin, cos)`` pairs at frequencies ``10000^(-2k/dim)``."""
    if dim < 2 or dim % 2:
        raise ContractViolation('step-encoding dimension must be even and positive, got %r' % dim)
    t = np.asarray(t, dtype=DTYPE)
    if np.any(t < 0):
        raise ContractViolation('step must be non-negative')
    frequencies = np.power(10000.0, -2.0 * np.arange(dim // 2) / dim)
    angles = t[..., None] * frequencies
    encoding = np.empty(angles.shape[:-1] + (dim,), dtype=DTYPE)
    encoding[..., 0::2] = np.sin(angles)
    encoding[..., 1::2] = np.cos(angles)
    return encoding


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    """
    Weights of the user (``theta``) and item (``psi``) reconstruction MLPs.

    Each is a tuple of ``(W, b)`` pairs: ``3d -> h``, then ``h -> h`` for every
    additional hidden layer, then the linear output ``h -> d``.
    """
    user_layers: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    item_layers: Tuple[Tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        shapes = []
        for name in ('user_layers', 'item_layers'):
            layers = []
            for index, (w, b) in enumerate(getattr(self, name)):
                w, b = np.array(w, dtype=DTYPE), np.array(b, dtype=DTYPE)
                check_finite(w, '%s[%d] weights' % (name, index))
                check_finite(b, '%s[%d] bias' % (name, index))
                if w.ndim != 2 or b.shape != (w.shape[1],):
                    raise ContractViolation('%s[%d] has inconsistent shapes %r, %r' % (name, index, w.shape, b.shape))
                w.flags.writeable = False
                b.flags.writeable = False
                layers.append((w, b))
            if len(layers) < 2:
                raise ContractViolation('%s needs at least one hidden layer' % name)
            for (w, _), (w_next, _) in zip(layers, layers[1:]):
                if w.shape[1] != w_next.shape[0]:
                    raise ContractViolation('%s layers do not chain: %r then %r' % (name, w.shape, w_next.shape))
            object.__setattr__(self, name, tuple(layers))
            shapes.append([w.shape for w, _ in layers])
        if shapes[0] != shapes[1]:
            raise ContractViolation('user and item denoisers must share one architecture')
        if self.user_layers[0][0].shape[0] != 3 * self.dim:
            raise ContractViolation('denoiser input width must be three times the embedding dimension')

    @property
    def dim(self):
        return self.user_layers[-1][0].shape[1]

    @property
    def hidden_width(self):
        return self.user_layers[0][0].shape[1]

    @property
    def hidden_layers(self):
        return len(self.user_layers) - 1

    @classmethod
    def initialize(cls, dim, hidden_width, hidden_layers, rng, zero=False):
        """Xavier-normal weights and zero biases, theta drawn before psi; ``zero`` gives an all-zero MLP."""
        if dim < 2 or dim % 2:
            raise ContractViolation('embedding dimension must be even to carry the step encoding, got %r' % dim)
        if hidden_width < 1 or hidden_layers < 1:
            raise ContractViolation('denoiser needs a positive hidden width and at least one hidden layer')
        sizes = [3 * dim] + [hidden_width] * hidden_layers + [dim]

        def mlp():
            layers = []
            for fan_in, fan_out in zip(sizes, sizes[1:]):
                if zero:
                    w = np.zeros((fan_in, fan_out))
                else:
                    w = np.sqrt(2.0 / (fan_in + fan_out)) * rng.standard_normal((fan_in, fan_out))
                layers.append((w, np.zeros(fan_out)))
            return tuple(layers)

        user_layers = mlp()
        return cls(user_layers, mlp())

    def layers(self, role):
        if role not in ROLES:
            raise ContractViolation('role must be user or item, got %r' % role)
        return self.user_layers if role == 'user' else self.item_layers

    def as_dict(self):
        params = {}
        for role in ROLES:
            for index, (w, b) in enumerate(self.layers(role)):
                params['%s.%d.W' % (role, index)] = w
                params['%s.%d.b' % (role, index)] = b
        return params

    @classmethod
    def from_dict(cls, params):
        def collect(role):
            count = len([name for name in params if name.startswith(role + '.')]) // 2
            return tuple((params['%s.%d.W' % (role, i)], params['%s.%d.b' % (role, i)]) for i in range(count))
        return cls(collect('user'), collect('item'))

    def sgd_step(self, grads, lr):
        """New parameters ``p - lr * grad``; names missing from ``grads`` are left unchanged."""
        return DenoiserParams.from_dict({
            name: value - lr * grads[name] if name in grads else value
            for name, value in self.as_dict().items()
        })

    def allclose(self, other, atol=0.0):
        mine, theirs = self.as_dict(), other.as_dict()
        return mine.keys() == theirs.keys() and all(
            mine[name].shape == theirs[name].shape and np.allclose(mine[name], theirs[name], rtol=0.0, atol=atol)
            for name in mine
        )


def layer_nodes(nodes, role):
    """The ``(W, b)`` pairs of one MLP from a name -> node mapping built on ``as_dict`` names."""
    count = len([name for name in nodes if name.startswith(role + '.')]) // 2
    return [(nodes['%s.%d.W' % (role, i)], nodes['%s.%d.b' % (role, i)]) for i in range(count)]


def denoise(layers, x_t, condition, t):
    """
    The reconstruction MLP as an autograd node: ``MLP(concat(x_t, condition, enc(t)))``
    with tanh hidden layers and a linear output. ``x_t`` and ``condition`` are batches
    of rows.
    """
    x_t = ad.lift(x_t)
    condition = ad.lift(condition)
    if x_t.shape != condition.shape or len(x_t.shape) != 2:
        raise ContractViolation(
            'state %r and condition %r must be matching 2-D batches' % (x_t.shape, condition.shape)
        )
    dim = x_t.shape[1]
    steps = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
    h = ad.concat([x_t, condition, ad.constant(encode_step(steps, dim))])
    inputs = np.shape(_value(layers[0][0]))[0]
    if h.shape[1] != inputs:
        raise ContractViolation('denoiser expects %d inputs, got %d' % (inputs, h.shape[1]))
    for w, b in layers[:-1]:
        h = ad.tanh(ad.add(ad.matmul(h, w), b))
    w, b = layers[-1]
    return ad.add(ad.matmul(h, w), b)


def _value(x):
    return x.value if isinstance(x, ad.Var) else x


def reconstruct(state, condition, params, role=None):
    """Predict the clean embedding from a noisy state and its collaborative condition."""
    role = role or state.role
    x_t = np.asarray(state.vector, dtype=DTYPE)
    condition = np.asarray(condition, dtype=DTYPE)
    if x_t.shape != condition.shape:
        raise ContractViolation('state %r and condition %r differ in shape' % (x_t.shape, condition.shape))
    if x_t.shape[-1] != params.dim:
        raise ContractViolation(
            'embedding dimension %d does not match the denoiser (%d)' % (x_t.shape[-1], params.dim)
        )
    single = x_t.ndim == 1
    out = denoise(params.layers(role), np.atleast_2d(x_t), np.atleast_2d(condition), state.t).value
    return out[0] if single else out


def reverse_step(state, tilde_e0, schedule, rng=None, stochastic=False, noise=None):
    """
    Posterior mean of ``x_{t-1}`` given ``x_t`` and the predicted clean embedding.

    With ``stochastic`` the posterior noise ``sqrt(beta_tilde_t) * eps`` is added
    (it vanishes at ``t = 1``).
    """
    t = state.t
    if np.any(np.asarray(t) < 1):
        raise ContractViolation('cannot take a reverse step from t = 0')
    schedule.check_step(t)
    x_t = np.asarray(state.vector, dtype=DTYPE)
    tilde_e0 = np.asarray(tilde_e0, dtype=DTYPE)
    if x_t.shape != tilde_e0.shape:
        raise ContractViolation('state %r and prediction %r differ in shape' % (x_t.shape, tilde_e0.shape))
    vector = (
        _per_row(schedule.posterior_coef_xt, t, x_t.ndim) * x_t
        + _per_row(schedule.posterior_coef_x0, t, x_t.ndim) * tilde_e0
    )
    if stochastic:
        if noise is None:
            noise = rng.standard_normal(x_t.shape)
        vector = vector + np.sqrt(_per_row(schedule.posterior_variance, t, x_t.ndim)) * noise
    return DiffusionState(vector, np.asarray(t) - 1 if np.ndim(t) else int(t) - 1, state.role)


def write_denoiser(params, path):
    with open(path, 'wb') as f:
        f.write(DENOISER_MAGIC)
        f.write(_DENOISER_HEADER.pack(params.dim, params.hidden_width, params.hidden_layers))
        for role in ROLES:
            for w, b in params.layers(role):
                f.write(w.astype(STORAGE_DTYPE).tobytes())
                f.write(b.astype(STORAGE_DTYPE).tobytes())


def read_denoiser(path):
    with open(path, 'rb') as f:
        payload = f.read()
    if payload[:len(DENOISER_MAGIC)] != DENOISER_MAGIC:
        raise CheckpointError('%s is not a denoiser checkpoint (bad magic)' % path)
    offset = len(DENOISER_MAGIC) + _DENOISER_HEADER.size
    if len(payload) < offset:
        raise CheckpointError('%s is truncated' % path)
    dim, width, count = _DENOISER_HEADER.unpack_from(payload, len(DENOISER_MAGIC))
    if dim < 1 or width < 1 or count < 1:
        raise CheckpointError('%s has an invalid header (d=%d, width=%d, layers=%d)' % (path, dim, width, count))
    sizes = [3 * dim] + [width] * count + [dim]
    expected = offset + 2 * sum((i + 1) * o for i, o in zip(sizes, sizes[1:])) * STORAGE_DTYPE.itemsize
    if len(payload) != expected:
        raise CheckpointError('%s holds %d bytes, expected %d' % (path, len(payload), expected))

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        array = np.frombuffer(payload, dtype=STORAGE_DTYPE, count=n, offset=offset).astype(DTYPE).reshape(shape)
        offset += n * STORAGE_DTYPE.itemsize
        return array

    mlps = [tuple((take((i, o)), take((o,))) for i, o in zip(sizes, sizes[1:])) for _ in ROLES]
    try:
        return DenoiserParams(*mlps)
    except ContractViolation as e:
        raise CheckpointError('%s: %s' % (path, e))
