# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

from ddrm.data import write_id_map, write_manifest
from ddrm.pipeline import prepare_dataset

from ._base import DDRMCommand


class Command(DDRMCommand):
    help = 'Splits the dataset, injects natural or random noise and writes split.tsv and id_map.tsv.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--ratio', type=float,
            help='Inject this ratio of random noise instead of the configured noise setting.',
        )

    def option_overrides(self, options):
        if options.get('ratio') is None:
            return {}
        return {'noise': 'random', 'noise.ratio': options['ratio']}

    def run(self, config, context, options):
        ds = prepare_dataset(config)
        write_manifest(ds, config.output_path('split.tsv'), config.header().lstrip('# '))
        write_id_map(ds, config.output_path('id_map.tsv'))
        stats = ds.statistics()
        self.success(
            'Wrote %d train (%d noisy), %d valid (%d noisy) and %d test interactions into %s' % (
                stats['train'], stats['train_noise'], stats['valid'], stats['valid_noise'], stats['test'],
                config.out,
            )
        )
