"""Run one scenario file and write its trace and report."""
from django.core.management.base import BaseCommand, CommandError
import logging

from parp.metrics import render_text
from parp.runner import execute_path, store, write_outputs
from parp.scenarios import ScenarioError, ScenarioNotFound


class Command(BaseCommand):
    """Simulate a scenario, write trace.jsonl and report.json, and fail when expectations are not met."""

    help = "Run a scenario file through the simulator."

    def add_arguments(self, parser):
        """Declare the scenario path and the parameter overrides."""
        parser.add_argument("path", help="Scenario JSON file or the name of a bundled scenario.")
        parser.add_argument("--seed", type=int, default=None, help="Override the scenario seed.")
        parser.add_argument("--out", default="out", help="Directory for trace.jsonl and report.json.")
        parser.add_argument("--block-interval", type=int, default=None, dest="block_interval")
        parser.add_argument("--dispute-window", type=int, default=None, dest="dispute_window")
        parser.add_argument("--horizon", type=int, default=None)

    def handle(self, *args, **kwargs):
        """Run the scenario and report the outcome through the exit status."""
        logger = logging.getLogger("django")
        overrides = {key: kwargs[key] for key in ("block_interval", "dispute_window", "horizon")}
        try:
            result = execute_path(kwargs["path"], kwargs["seed"], **overrides)
        except ScenarioNotFound as err:
            raise CommandError(err.detail, returncode=2) from err
        except ScenarioError as err:
            raise CommandError(err.detail, returncode=1) from err
        if result.error:
            raise CommandError(result.error, returncode=1)
        out_dir = write_outputs(result, kwargs["out"])
        store(result, kwargs["path"])
        logger.info(f"Scenario {result.name} written to {out_dir}.")
        self.stdout.write(render_text(result.report))
        if result.failures:
            raise CommandError("; ".join(result.failures), returncode=1)
        self.stdout.write(self.style.SUCCESS(f"{result.name}: all expectations met."))
