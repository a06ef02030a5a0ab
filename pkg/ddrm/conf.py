# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Run configuration.

Values are looked up in this order, later sources winning: ``DEFAULTS``, the
project's ``settings.DDRM`` dict, a flat ``key = value`` config file, and
command-line overrides. Every value is coerced to the type of its default.
"""
import hashlib
import os

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.utils.functional import cached_property

from ddrm.backend import BackendConfig
from ddrm.exceptions import ContractViolation
from ddrm.training import TrainConfig

DEFAULTS = {
    'dataset': '',
    'manifest': '',
    'embeddings': '',
    'denoiser': '',
    'out': 'ddrm-out',
    'seed': 2023,
    'log_wall_time': True,

    'split.train': 0.7,
    'split.valid': 0.1,
    'split.test': 0.2,
    'noise': 'natural',
    'noise.ratio': 0.2,

    'backend.kind': 'mf_bpr',
    'backend.dim': 64,
    'backend.lr': 0.05,
    'backend.l2': 1e-4,
    'backend.epochs': 30,
    'backend.batch_size': 256,
    'backend.layers': 2,
    'backend.init_std': 0.1,

    'train.lambda': 0.4,
    'train.gamma': 0.1,
    'train.lr': 0.01,
    'train.batch_size': 256,
    'train.epochs': 20,
    'train.patience': 5,
    'train.steps': 20,
    'train.noise_scale': 1e-3,
    'train.noise_min': 1e-3,
    'train.noise_max': 1e-2,
    'train.schedule': 'linear_variance',
    'train.hidden_width': 0,
    'train.hidden_layers': 1,
    'train.denoise_user': True,
    'train.resume': '',

    'infer.start': 'average',
    'infer.stochastic': False,
    'infer.k': '10,20',

    'sweep.axis': 'noise_ratio',
    'sweep.values': '0,0.2,0.4,0.6',
    'sweep.seeds': '1,2,3,4,5',
}

NOISE_MODES = ('natural', 'random', 'none')

# Keys whose value may be switched off with "none".
NULLABLE = frozenset({'train.gamma'})

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def _coerce(key, value):
    if key not in DEFAULTS:
        raise ImproperlyConfigured('Unknown DDRM setting %r.' % key)
    default = DEFAULTS[key]
    if key in NULLABLE and (value is None or str(value).strip().lower() in ('none', '')):
        return None
    if not isinstance(value, str):
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
        elif isinstance(default, int) and isinstance(value, (int, float)) and float(value).is_integer():
            return int(value)
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        elif isinstance(default, str):
            return str(value)
        value = str(value)
    text = value.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ImproperlyConfigured(
            'DDRM setting %r expects a value of type %s, got %r.' % (key, type(default).__name__, value)
        )
    return text


def _render(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_file(path):
    """Read ``key = value`` lines; ``#`` starts a comment line, blank lines are skipped."""
    if not os.path.exists(path):
        raise ImproperlyConfigured('Config file %s does not exist.' % path)
    values = {}
    with open(path, encoding='utf-8') as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ImproperlyConfigured('%s, line %d: expected "key = value", got %r.' % (path, number, line))
            key, value = (part.strip() for part in line.split('=', 1))
            values[key] = _coerce(key, value)
    return values


def parse_overrides(pairs):
    """``key=value`` strings from repeated ``--set`` flags."""
    values = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ImproperlyConfigured('Override %r is not of the form key=value.' % pair)
        key, value = (part.strip() for part in pair.split('=', 1))
        values[key] = _coerce(key, value)
    return values


def parse_list(text, kind=float):
    try:
        return [kind(part.strip()) for part in str(text).split(',') if part.strip()]
    except ValueError:
        raise ImproperlyConfigured('Expected a comma-separated list of %s, got %r.' % (kind.__name__, text))


class RunConfig:
    """An immutable, fully merged set of settings."""

    def __init__(self, values=None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            merged[key] = _coerce(key, value)
        self._values = merged

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(sorted(self._values))

    def __repr__(self):
        return '<RunConfig %s>' % self.fingerprint

    def as_dict(self):
        return dict(self._values)

    def replace(self, **values):
        """A copy with dotted keys given as ``replace(**{'train.steps': 10})``."""
        merged = self.as_dict()
        merged.update(values)
        return RunConfig(merged)

    @cached_property
    def fingerprint(self):
        canonical = '\n'.join('%s=%s' % (key, _render(self[key])) for key in self if key != 'out')
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

    @property
    def seed(self):
        return self['seed']

    @property
    def out(self):
        return self['out']

    def header(self, seed=None):
        return '# config_hash=%s seed=%d' % (self.fingerprint, self.seed if seed is None else seed)

    def output_path(self, name):
        return os.path.join(self.out, name)

    @property
    def ks(self):
        ks = sorted(set(parse_list(self['infer.k'], int)))
        if not ks or ks[0] < 1:
            raise ImproperlyConfigured('infer.k must list positive cut-offs, got %r.' % self['infer.k'])
        return tuple(ks)

    @property
    def split_ratios(self):
        return self['split.train'], self['split.valid'], self['split.test']

    def backend_config(self):
        try:
            return BackendConfig(
                kind=self['backend.kind'],
                dim=self['backend.dim'],
                lr=self['backend.lr'],
                l2=self['backend.l2'],
                epochs=self['backend.epochs'],
                batch_size=self['backend.batch_size'],
                layers=self['backend.layers'],
                init_std=self['backend.init_std'],
            )
        except ContractViolation as e:
            raise ImproperlyConfigured('Invalid backend settings: %s.' % e)

    def train_config(self):
        try:
            return TrainConfig(
                balance=self['train.lambda'],
                reweight=self['train.gamma'],
                lr=self['train.lr'],
                batch_size=self['train.batch_size'],
                epochs=self['train.epochs'],
                patience=self['train.patience'],
                steps=self['train.steps'],
                noise_scale=self['train.noise_scale'],
                noise_min=self['train.noise_min'],
                noise_max=self['train.noise_max'],
                schedule=self['train.schedule'],
                hidden_width=self['train.hidden_width'],
                hidden_layers=self['train.hidden_layers'],
                denoise_user=self['train.denoise_user'],
            )
        except ContractViolation as e:
            raise ImproperlyConfigured('Invalid training settings: %s.' % e)

    def validate(self):
        """Check the settings every command relies on."""
        if self['noise'] not in NOISE_MODES:
            raise ImproperlyConfigured('noise must be one of %s, got %r.' % (', '.join(NOISE_MODES), self['noise']))
        if self['manifest']:
            if not os.path.exists(self['manifest']):
                raise ImproperlyConfigured('Split manifest %s does not exist.' % self['manifest'])
        elif not self['dataset']:
            raise ImproperlyConfigured('No dataset configured; set "dataset" or "manifest".')
        elif not os.path.exists(self['dataset']):
            raise ImproperlyConfigured('Dataset %s does not exist.' % self['dataset'])
        if self['infer.start'] not in ('average', 'pure_noise'):
            raise ImproperlyConfigured('infer.start must be average or pure_noise, got %r.' % self['infer.start'])
        if not self.ks:
            raise ImproperlyConfigured('infer.k is empty.')
        self.backend_config()
        self.schedule()
        return self

    def schedule(self):
        try:
            return self.train_config().build_schedule()
        except ContractViolation as e:
            raise ImproperlyConfigured('Invalid noise schedule: %s.' % e)


def load_config(path=None, overrides=None):
    """Merge defaults, ``settings.DDRM``, the config file at ``path`` and ``overrides``."""
    values = {}
    project = getattr(settings, 'DDRM', {})
    if not isinstance(project, dict):
        raise ImproperlyConfigured('The DDRM setting must be a dict.')
    values.update(project)
    if path:
        values.update(parse_config_file(path))
    values.update(overrides or {})
    return RunConfig(values)
