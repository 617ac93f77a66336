"""
Base settings for the iQuery audio-visual separation toolkit.

There is no web surface: Django provides settings, management commands,
form validation of run configs and the test runner.
"""
from pathlib import Path
from decouple import config

BASE_DIR = Path(__file__).resolve().parent.parent.parent

SECRET_KEY = config('SECRET_KEY', default='iquery-local-only')

DJANGO_APPS = []

LOCAL_APPS = [
    'apps.core',
    'apps.tensorcore',
    'apps.dsp',
    'apps.synthdata',
    'apps.separator',
    'apps.training',
    'apps.bsseval',
]

INSTALLED_APPS = DJANGO_APPS + LOCAL_APPS

# No ORM models: runs, corpora and reports are plain files.
DATABASES = {}

USE_I18N = False
USE_TZ = True
TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# ── Paths ──────────────────────────────────────────────────────────────────────
CORPUS_ROOT = Path(config('IQUERY_CORPUS_ROOT', default=str(BASE_DIR / 'corpus')))
ARTIFACT_ROOT = Path(config('IQUERY_ARTIFACT_ROOT', default=str(BASE_DIR / 'artifacts')))

# ── Reproducibility ────────────────────────────────────────────────────────────
SEED = config('IQUERY_SEED', default=7, cast=int)
TENSOR_DTYPE = config('IQUERY_TENSOR_DTYPE', default='float32')   # float64 for grad checks
WORKERS = config('IQUERY_WORKERS', default=4, cast=int)           # corpus / eval thread pool

# ── Signal geometry ────────────────────────────────────────────────────────────
SAMPLE_RATE = 11025
CLIP_SECONDS = 6
N_FFT = 1022            # 512 frequency bins
HOP_LENGTH = 256
SPEC_FRAMES = 256       # frame count forced for every clip
LOGFREQ_BINS = 256

# ── Synthetic corpus ───────────────────────────────────────────────────────────
ACTIVITY_DIM = 16
ACTIVITY_FRAMES = 64
FEATURE_DIM = config('IQUERY_FEATURE_DIM', default=256, cast=int)   # object / motion width, must equal model channels

# ── Logging ────────────────────────────────────────────────────────────────────
LOG_LEVEL = config('IQUERY_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {'format': '%(asctime)s %(levelname)s %(name)s: %(message)s'},
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'apps': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
    },
}
