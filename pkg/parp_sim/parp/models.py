"""Stored scenario runs, so reports can be browsed and re-run from the admin site."""
from django.db import models


class ScenarioRun(models.Model):
    """One execution of a scenario: its seed, verdict against expectations and the derived report."""

    class Meta:
        """Show the newest runs first."""

        ordering = ["-created"]

    class Outcome(models.IntegerChoices):
        """How a run compared with its scenario's expectations."""

        PASSED = 0
        FAILED = 1
        ERROR = 2

    name = models.CharField(max_length=80)
    path = models.CharField(max_length=255, blank=True, default="")
    seed = models.BigIntegerField(default=0)
    outcome = models.IntegerField(choices=Outcome.choices, default=Outcome.PASSED)
    trace_digest = models.CharField(max_length=64, blank=True, default="")
    report = models.JSONField(default=dict)
    failures = models.JSONField(default=list)
    created = models.DateTimeField(auto_now_add=True)

    def __str__(self):
        """Return an easy string representation."""
        return f"{self.name} (seed {self.seed})"

    @property
    def passed(self):
        """Tell whether the run met every expectation."""
        return self.outcome == self.Outcome.PASSED
