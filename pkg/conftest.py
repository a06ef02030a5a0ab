# Configure Django for pytest collection, mirroring manage.py.
import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "testapp.settings")
django.setup()
