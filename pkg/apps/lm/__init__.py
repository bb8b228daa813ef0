"""
N-gram language modeling app - back-off and neural n-gram smoothing.
"""
default_app_config = "apps.lm.apps.LanguageModelConfig"
