from django.apps import AppConfig


class SweepingConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'sweeping'
    verbose_name = 'Sweeping processes'
