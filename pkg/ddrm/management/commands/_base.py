# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import logging
import os

from django.core.exceptions import ImproperlyConfigured
from django.core.management.base import BaseCommand, CommandError

from ddrm.backend import read_embeddings
from ddrm.conf import load_config, parse_overrides
from ddrm.diffusion import read_denoiser
from ddrm.exceptions import CheckpointError, DDRMError

logger = logging.getLogger('ddrm.commands')

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class DDRMCommand(BaseCommand):
    """
    Shared surface of the ddrm commands: ``--config``, ``--seed``, ``--out`` and
    repeatable ``--set key=value``.

    Subclasses implement ``validate(config, options)``, which may raise
    ``ImproperlyConfigured`` or ``CheckpointError`` (exit status 2), and
    ``run(config, context, options)`` whose library and I/O errors exit with status 1.
    """
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Flat "key = value" run configuration file.')
        parser.add_argument('--seed', type=int, help='Top-level seed; every random stream derives from it.')
        parser.add_argument('--out', help='Output directory.')
        parser.add_argument(
            '--set', action='append', default=[], metavar='KEY=VALUE', dest='overrides',
            help='Override one setting; may be repeated.',
        )

    def build_config(self, options):
        overrides = parse_overrides(options['overrides'])
        if options.get('seed') is not None:
            overrides['seed'] = options['seed']
        if options.get('out'):
            overrides['out'] = options['out']
        overrides.update(self.option_overrides(options))
        return load_config(options.get('config'), overrides)

    def option_overrides(self, options):
        return {}

    def handle(self, *args, **options):
        try:
            config = self.build_config(options)
            context = self.validate(config, options)
            os.makedirs(config.out, exist_ok=True)
            self.run(config, context, options)
        except (ImproperlyConfigured, CheckpointError) as e:
            raise CommandError(str(e), returncode=USAGE_ERROR)
        except (DDRMError, OSError) as e:
            logger.error('%s failed: %s', self.command_name, e, extra={'error': type(e).__name__})
            raise CommandError(str(e), returncode=RUNTIME_ERROR)

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def validate(self, config, options):
        config.validate()
        return {}

    def run(self, config, context, options):
        raise NotImplementedError('subclasses of DDRMCommand must provide a run() method')

    def load_embeddings(self, config, ds=None):
        path = config['embeddings'] or config.output_path('embeddings.bin')
        if not os.path.exists(path):
            raise ImproperlyConfigured('Embedding checkpoint %s does not exist; run pretrain first.' % path)
        tables = read_embeddings(path)
        if ds is not None and (tables.num_users, tables.num_items) != (ds.num_users, ds.num_items):
            raise CheckpointError(
                'Embedding checkpoint %s holds %d users and %d items, the dataset has %d and %d.'
                % (path, tables.num_users, tables.num_items, ds.num_users, ds.num_items)
            )
        return tables

    def load_denoiser(self, path, tables):
        if not os.path.exists(path):
            raise ImproperlyConfigured('Denoiser checkpoint %s does not exist; run train first.' % path)
        params = read_denoiser(path)
        if params.dim != tables.dim:
            raise CheckpointError(
                'Denoiser checkpoint %s has d=%d but the embeddings have d=%d.' % (path, params.dim, tables.dim)
            )
        return params

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))
