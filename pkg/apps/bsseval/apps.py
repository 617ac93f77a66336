from django.apps import AppConfig

class BssevalConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.bsseval'
    label = 'bsseval'
