"""
Django settings for the vista_story project.

The project has no web surface: it exists for the management commands, the
run registry and the test runner. Process-level settings come from the
environment (or a .env file) through python-decouple; pipeline
hyperparameters live in story.schemas.config.
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
# Nothing here signs data for the outside world; the default only satisfies Django.
SECRET_KEY = config('SECRET_KEY', default='vista-story-local-batch-key')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "story",
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": config('VISTA_DATABASE_PATH', default=str(BASE_DIR / "runs.sqlite3")),
    }
}


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True


# Default primary key field type
# https://docs.djangoproject.com/en/5.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Pipeline runtime

# Worker threads for corpus generation, story generation and evaluation
VISTA_THREADS = config('VISTA_THREADS', default=4, cast=int)

# Default parent directory for run outputs when a command gets a bare name
VISTA_RUNS_ROOT = Path(config('VISTA_RUNS_ROOT', default=str(BASE_DIR / "runs")))

VISTA_LOG_LEVEL = config('VISTA_LOG_LEVEL', default='INFO')


# Logging

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "story": {
            "handlers": ["console"],
            "level": VISTA_LOG_LEVEL,
            "propagate": False,
        },
    },
}
