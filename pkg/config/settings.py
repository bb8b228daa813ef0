"""
Django settings for the n-gram language modeling toolkit.
Configuration is read from environment variables (and an optional .env file).
"""
import os
from pathlib import Path

import environ

# Build paths
BASE_DIR = Path(__file__).resolve().parent.parent

# Environment variables
env = environ.Env(
    DEBUG=(bool, False),
    CELERY_TASK_ALWAYS_EAGER=(bool, True),
)

# Read .env file if exists
environ.Env.read_env(os.path.join(BASE_DIR, ".env"))

SECRET_KEY = env("SECRET_KEY", default="django-insecure-dev-key-change-in-production")
DEBUG = env("DEBUG")
ALLOWED_HOSTS = env.list("ALLOWED_HOSTS", default=[])

# Application definition
INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "django.contrib.auth",
    # Third party
    "rest_framework",
    # Local apps
    "apps.lm",
]

# Database
DATABASES = {
    "default": env.db(
        "DATABASE_URL",
        default=f"sqlite:///{BASE_DIR / 'lm_runs.sqlite3'}",
    )
}

if DATABASES["default"]["ENGINE"] == "django.db.backends.postgresql":
    # Connection reuse for long-running workers
    DATABASES["default"]["CONN_MAX_AGE"] = 600
    DATABASES["default"]["OPTIONS"] = {
        "connect_timeout": 10,
    }

# Internationalization
LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = True
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Cache (run status lookups); a redis:// URL selects django-redis
CACHES = {
    "default": env.cache("CACHE_URL", default="locmemcache://lm-runs"),
}
CACHES["default"].setdefault("KEY_PREFIX", "ngram_lm")
CACHES["default"].setdefault("TIMEOUT", 300)

# Celery Configuration
CELERY_BROKER_URL = env("CELERY_BROKER_URL", default="redis://localhost:6379/0")
CELERY_RESULT_BACKEND = env("CELERY_RESULT_BACKEND", default="redis://localhost:6379/0")
CELERY_TASK_ALWAYS_EAGER = env("CELERY_TASK_ALWAYS_EAGER")
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_ACCEPT_CONTENT = ["json"]
CELERY_TASK_SERIALIZER = "json"
CELERY_RESULT_SERIALIZER = "json"
CELERY_TIMEZONE = TIME_ZONE
CELERY_TASK_TRACK_STARTED = True
CELERY_TASK_TIME_LIMIT = 24 * 60 * 60  # training runs take hours
CELERY_TASK_SOFT_TIME_LIMIT = 23 * 60 * 60
CELERY_WORKER_PREFETCH_MULTIPLIER = 1  # One task at a time per worker
CELERY_WORKER_MAX_TASKS_PER_CHILD = 100

# Toolkit settings
LM_FLOAT_WIDTH = env.int("LM_FLOAT_WIDTH", default=64)
LM_DEFAULT_SEED = env.int("LM_DEFAULT_SEED", default=1234)
LM_KATZ_GT_MAX = env.int("LM_KATZ_GT_MAX", default=5)
LM_CLIP_NORM = env.float("LM_CLIP_NORM", default=5.0)
LM_INIT_STDDEV = env.float("LM_INIT_STDDEV", default=0.1)
LM_BATCH_SIZE = env.int("LM_BATCH_SIZE", default=64)
LM_EVAL_BATCH_SIZE = env.int("LM_EVAL_BATCH_SIZE", default=512)
LM_ADAGRAD_LR = env.float("LM_ADAGRAD_LR", default=0.1)
LM_ADAGRAD_INITIAL_ACCUMULATOR = env.float("LM_ADAGRAD_INITIAL_ACCUMULATOR", default=0.1)
LM_SGD_CONSTANT_EPOCHS = env.int("LM_SGD_CONSTANT_EPOCHS", default=4)
LM_SGD_DECAY_EPOCHS = env.int("LM_SGD_DECAY_EPOCHS", default=9)

# Logging
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{levelname} {asctime} {module} {process:d} {thread:d} {message}",
            "style": "{",
        },
        "simple": {
            "format": "{levelname} {message}",
            "style": "{",
        },
        "json": {
            "()": "pythonjsonlogger.jsonlogger.JsonFormatter",
            "format": "%(asctime)s %(levelname)s %(name)s %(process)d %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
            "stream": "ext://sys.stderr",
        },
        "file": {
            "class": "logging.handlers.RotatingFileHandler",
            "filename": BASE_DIR / "logs" / "lm.log",
            "maxBytes": 1024 * 1024 * 10,  # 10 MB
            "backupCount": 5,
            "formatter": "json",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "WARNING",
    },
    "loggers": {
        "django": {
            "handlers": ["console", "file"],
            "level": "INFO",
            "propagate": False,
        },
        "apps": {
            "handlers": ["console", "file"],
            "level": env("LM_LOG_LEVEL", default="DEBUG" if DEBUG else "INFO"),
            "propagate": False,
        },
        "celery": {
            "handlers": ["console", "file"],
            "level": "INFO",
            "propagate": False,
        },
    },
}

# Create logs directory
os.makedirs(BASE_DIR / "logs", exist_ok=True)
