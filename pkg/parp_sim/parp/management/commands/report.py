"""Print the metrics report of a stored trace."""
from django.core.management.base import BaseCommand, CommandError

from parp.metrics import MalformedTrace, build_report, read_trace, render_json, render_text


class Command(BaseCommand):
    """Re-derive the report of a trace file; the output only depends on the trace."""

    help = "Summarize a trace.jsonl file."

    def add_arguments(self, parser):
        """Declare the trace path and the output format."""
        parser.add_argument("trace", help="Trace file written by run_scenario.")
        parser.add_argument("--json", action="store_true", help="Print canonical JSON instead of a table.")

    def handle(self, *args, **kwargs):
        """Read the trace and print the report."""
        try:
            records = read_trace(kwargs["trace"])
        except FileNotFoundError as err:
            raise CommandError(f"No trace file at {kwargs['trace']}.", returncode=2) from err
        except MalformedTrace as err:
            raise CommandError(err.detail, returncode=1) from err
        report = build_report(records)
        self.stdout.write(render_json(report) if kwargs["json"] else render_text(report), ending="")
