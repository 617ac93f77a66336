# Settings package; manage.py defaults to development
