#!/usr/bin/env python

# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import os
import sys

import django
from django.conf import settings
from django.test.utils import get_runner

if __name__ == "__main__":
    os.environ['DJANGO_SETTINGS_MODULE'] = 'testapp.settings'
    if '--slow' in sys.argv:
        os.environ['DDRM_SLOW_TESTS'] = '1'
    django.setup()
    TestRunner = get_runner(settings)
    test_runner = TestRunner()
    failures = test_runner.run_tests(["testapp.tests"])
    sys.exit(bool(failures))
