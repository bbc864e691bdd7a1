"""URLConf for the parp app."""
from django.urls import path

from . import views

app_name = "parp"
urlpatterns = [
    path("", views.index, name="index"),
    path("runs/<int:run_id>/report", views.run_report, name="run_report"),
]
