# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import logging

from ddrm.diffusion import write_denoiser
from ddrm.exceptions import TrainingDiverged
from ddrm.pipeline import prepare_dataset, train_denoiser
from ddrm.training import write_train_log

from ._base import DDRMCommand

logger = logging.getLogger('ddrm.commands')


class Command(DDRMCommand):
    help = 'Trains the user and item denoisers on frozen embeddings and writes denoiser.bin.'

    def validate(self, config, options):
        config.validate()
        ds = prepare_dataset(config)
        tables = self.load_embeddings(config, ds)
        initial = self.load_denoiser(config['train.resume'], tables) if config['train.resume'] else None
        return {'ds': ds, 'tables': tables, 'initial': initial}

    def save(self, config, params, records):
        write_denoiser(params, config.output_path('denoiser.bin'))
        write_train_log(
            records, config.output_path('train_log.csv'), config.header(), wall_time=config['log_wall_time'],
        )

    def run(self, config, context, options):
        try:
            result = train_denoiser(context['ds'], context['tables'], config, initial=context['initial'])
        except TrainingDiverged as e:
            if e.last_good is not None:
                self.save(config, e.last_good, e.records)
                logger.warning(
                    'Saved the last good denoiser before epoch %s to %s', e.epoch, config.output_path('denoiser.bin'),
                    extra={'epoch': e.epoch},
                )
            raise
        self.save(config, result.params, result.records)
        self.success(
            'Trained denoisers for %d epochs (best epoch %d) into %s'
            % (len(result.records), result.best_epoch, config.out)
        )
