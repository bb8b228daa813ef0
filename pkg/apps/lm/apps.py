from django.apps import AppConfig


class LanguageModelConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "apps.lm"
    label = "lm"
    verbose_name = "N-gram Language Modeling"
