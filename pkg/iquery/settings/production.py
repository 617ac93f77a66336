from .base import *

DEBUG = False

# Long desk-scale runs: keep the epoch lines, drop per-step chatter.
LOGGING['loggers']['apps']['level'] = config('IQUERY_LOG_LEVEL', default='INFO')
WORKERS = config('IQUERY_WORKERS', default=8, cast=int)
