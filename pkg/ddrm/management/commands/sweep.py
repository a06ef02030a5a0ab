# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

from django.core.exceptions import ImproperlyConfigured

from ddrm.conf import parse_list
from ddrm.sweep import AXES, parse_axis_values, run_sweep, write_sweep

from ._base import DDRMCommand


class Command(DDRMCommand):
    help = 'Runs pretrain, train and evaluate for every (axis value, seed) and writes sweep.csv.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--axis', choices=sorted(AXES), help='Setting to sweep.')
        parser.add_argument('--values', help='Comma-separated axis values.')
        parser.add_argument('--seeds', help='Comma-separated seeds.')

    def option_overrides(self, options):
        overrides = {}
        for option in ('axis', 'values', 'seeds'):
            if options.get(option):
                overrides['sweep.%s' % option] = options[option]
        return overrides

    def validate(self, config, options):
        config.validate()
        axis = config['sweep.axis']
        try:
            values = parse_axis_values(axis, config['sweep.values'])
        except ValueError:
            raise ImproperlyConfigured('Cannot parse %r as values of the %s axis.' % (config['sweep.values'], axis))
        seeds = parse_list(config['sweep.seeds'], int)
        if not values or not seeds:
            raise ImproperlyConfigured('A sweep needs at least one value and one seed.')
        return {'axis': axis, 'values': values, 'seeds': seeds}

    def run(self, config, context, options):
        rows = run_sweep(config, context['axis'], context['values'], context['seeds'])
        write_sweep(rows, config.output_path('sweep.csv'), config.header(), wall_time=config['log_wall_time'])
        self.success('Swept %s over %d values and %d seeds into %s' % (
            context['axis'], len(context['values']), len(context['seeds']), config.out,
        ))
