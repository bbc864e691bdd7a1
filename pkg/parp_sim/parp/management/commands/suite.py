"""Run every bundled scenario."""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from django.core.management.base import BaseCommand, CommandError
import logging

from parp.runner import execute_path, store, write_outputs
from parp.scenarios import bundled_scenarios


class Command(BaseCommand):
    """Run the bundled scenarios, in parallel if asked, and print a pass/fail table."""

    help = "Run all bundled scenarios and check their expectations."

    def add_arguments(self, parser):
        """Declare the worker count and the output directory."""
        parser.add_argument("--jobs", type=int, default=1, help="Scenarios to run at once.")
        parser.add_argument("--out", default=None, help="Write each run's files to OUT/<scenario>/.")
        parser.add_argument("--only", nargs="*", default=None, help="Run only these scenario names.")

    def handle(self, *args, **kwargs):
        """Run the scenarios; exit with status 1 if any of them fails."""
        logger = logging.getLogger("django")
        paths = bundled_scenarios()
        if kwargs["only"]:
            paths = [path for path in paths if path.stem in kwargs["only"]]
        with ThreadPoolExecutor(max_workers=max(1, kwargs["jobs"])) as pool:
            results = list(pool.map(execute_path, paths))
        failed = []
        for path, result in zip(paths, results):
            if kwargs["out"]:
                write_outputs(result, Path(kwargs["out"]) / path.stem)
            store(result, path)
            status = result.outcome.label.upper()
            self.stdout.write(f"{result.name:<24}{status:>8}  {'; '.join(result.failures) or result.error}")
            if status != "PASSED":
                failed.append(result.name)
        logger.info(f"Suite finished: {len(results) - len(failed)} of {len(results)} scenarios passed.")
        if failed:
            raise CommandError(f"Failed scenarios: {', '.join(failed)}.", returncode=1)
        self.stdout.write(self.style.SUCCESS(f"All {len(results)} scenarios passed."))
