"""AppConfig for the parp app."""
from django.apps import AppConfig


class ParpAppConfig(AppConfig):
    """Master class for the parp AppConfig."""

    default_auto_field = "django.db.models.BigAutoField"
    name = "parp"
    verbose_name = "Accountable RPC simulator"
