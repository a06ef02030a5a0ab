# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import os

DATABASES = {}

INSTALLED_APPS = (
    'ddrm',
)

SECRET_KEY = "django_tests_secret_key"

USE_TZ = False

# Small, fast defaults for the test suite; production runs use ddrm.conf.DEFAULTS.
DDRM = {
    'backend.dim': 8,
    'backend.epochs': 5,
    'backend.batch_size': 64,
    'train.epochs': 2,
    'train.batch_size': 64,
    'train.steps': 5,
    'sweep.seeds': '1',
}

# Multi-seed end-to-end experiments take minutes; enable with DDRM_SLOW_TESTS=1.
ENABLE_SLOW_TESTS = os.environ.get('DDRM_SLOW_TESTS', '').lower() in ('1', 'true', 'yes')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
        },
    },
    'loggers': {
        'ddrm': {
            'handlers': ['console'],
            'level': os.environ.get('DDRM_LOG_LEVEL', 'WARNING'),
        },
    },
}

TEST_RUNNER = "testapp.runners.XMLTestSuiteRunner"
