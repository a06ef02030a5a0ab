# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

from ddrm.backend import write_embeddings, write_pretrain_log
from ddrm.pipeline import prepare_dataset, pretrain_backend

from ._base import DDRMCommand


class Command(DDRMCommand):
    help = 'Pre-trains the backend on the noisy train split and writes embeddings.bin.'

    def run(self, config, context, options):
        ds = prepare_dataset(config)
        trace = []
        tables = pretrain_backend(ds, config, trace=trace)
        write_embeddings(tables, config.output_path('embeddings.bin'))
        write_pretrain_log(
            trace, config.output_path('pretrain_log.csv'), config.header(), wall_time=config['log_wall_time'],
        )
        self.success(
            'Pre-trained %s embeddings for %d users and %d items (d=%d) into %s'
            % (config['backend.kind'], tables.num_users, tables.num_items, tables.dim, config.out)
        )
