import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'iquery.settings.development')
django.setup()
