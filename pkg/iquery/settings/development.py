from .base import *

DEBUG = True

LOGGING['loggers']['apps']['level'] = config('IQUERY_LOG_LEVEL', default='DEBUG')
