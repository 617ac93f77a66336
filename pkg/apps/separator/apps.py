from django.apps import AppConfig

class SeparatorConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.separator'
    label = 'separator'
