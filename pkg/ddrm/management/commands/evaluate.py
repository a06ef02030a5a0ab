# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

from ddrm.evaluation import METRICS, write_metrics
from ddrm.inference import START_MODES, write_recommendations
from ddrm.pipeline import evaluate_run, prepare_dataset

from ._base import DDRMCommand


class Command(DDRMCommand):
    help = 'Generates recommendations on the test split and writes recall/NDCG reports.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--start', choices=START_MODES,
            help='Seed the reverse chain with the average liked-item embedding or pure noise.',
        )
        parser.add_argument(
            '--stochastic', action='store_true', default=None,
            help='Add posterior noise at every reverse step.',
        )

    def option_overrides(self, options):
        overrides = {}
        if options.get('start'):
            overrides['infer.start'] = options['start']
        if options.get('stochastic'):
            overrides['infer.stochastic'] = True
        return overrides

    def validate(self, config, options):
        config.validate()
        ds = prepare_dataset(config)
        tables = self.load_embeddings(config, ds)
        params = self.load_denoiser(config['denoiser'] or config.output_path('denoiser.bin'), tables)
        return {'ds': ds, 'tables': tables, 'params': params}

    def run(self, config, context, options):
        ds = context['ds']
        evaluation = evaluate_run(ds, context['tables'], context['params'], config)
        header = config.header()
        write_recommendations(
            evaluation.recommendations, config.output_path('recommendations.csv'), header,
            user_ids=ds.user_ids, item_ids=ds.item_ids,
        )
        write_metrics(evaluation.ddrm, config.output_path('metrics.csv'), header)
        write_metrics(evaluation.backend, config.output_path('backend_metrics.csv'), header)

        self.stdout.write('%-10s %4s %10s %10s' % ('metric', 'k', 'backend', 'ddrm'))
        for metric in METRICS:
            for k in evaluation.ddrm.ks:
                self.stdout.write('%-10s %4d %10.4f %10.4f' % (
                    metric, k, evaluation.backend.mean(metric, k), evaluation.ddrm.mean(metric, k),
                ))
        self.success('Evaluated %d users (start=%s) into %s' % (
            evaluation.ddrm.n_users, config['infer.start'], config.out,
        ))
