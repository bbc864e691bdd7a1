"""Control available admin features for the parp app."""
from django.contrib import admin

from .models import ScenarioRun
from .runner import execute_path, store


@admin.action(description="Re-run selected scenarios with the same seed.")
def rerun_scenarios(modeladmin, request, queryset):  # pylint: disable=W0613
    """Run each selected scenario file again and store a fresh run."""
    for run in queryset.exclude(path=""):
        store(execute_path(run.path, run.seed), run.path)


class ScenarioRunAdmin(admin.ModelAdmin):
    """A better view for scenario runs."""

    list_display = ["name", "seed", "outcome", "trace_digest", "created"]
    list_filter = ["outcome", "name"]
    search_fields = ["name", "trace_digest"]
    readonly_fields = ["report", "failures", "trace_digest", "created"]
    actions = [rerun_scenarios]


admin.site.register(ScenarioRun, ScenarioRunAdmin)
