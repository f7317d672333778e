"""
Settings for the adaptation experiments. Everything that varies between
machines (seed, data and run directories, log level) comes from the
environment or a .env file next to manage.py.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

# Only management commands run here; the key just has to exist.
SECRET_KEY = os.environ.get('SECRET_KEY', 'segmentation-adaptation-local')

DEBUG = os.environ.get('DJANGO_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'upl',
]

# No database: runs keep their state in files under UPL_RUNS_DIR.
DATABASES = {}


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Experiments

UPL_SEED = int(os.environ.get('UPL_SEED', '42'))

UPL_DATA_DIR = Path(os.environ.get('UPL_DATA_DIR', BASE_DIR / 'data'))

UPL_RUNS_DIR = Path(os.environ.get('UPL_RUNS_DIR', BASE_DIR / 'runs'))

UPL_DEFAULT_BENCHMARK = os.environ.get('UPL_DEFAULT_BENCHMARK', 'SYN-A-B')

UPL_LOG_LEVEL = os.environ.get('UPL_LOG_LEVEL', 'INFO').upper()


# Logging
# https://docs.djangoproject.com/en/5.2/topics/logging/

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'upl': {
            'handlers': ['console'],
            'level': UPL_LOG_LEVEL,
            'propagate': False,
        },
    },
}
