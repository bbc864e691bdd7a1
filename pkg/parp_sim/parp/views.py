"""JSON views over stored scenario runs."""
from django.http import JsonResponse
from django.shortcuts import get_object_or_404

from .models import ScenarioRun
from .scenarios import bundled_scenarios

JSON_DUMPS = {"sort_keys": True, "separators": (",", ":")}


def index(request):  # pylint: disable=W0613
    """List the bundled scenarios and the latest stored runs."""
    runs = [
        {
            "id": run.pk,
            "name": run.name,
            "seed": run.seed,
            "outcome": run.get_outcome_display(),
            "trace_digest": run.trace_digest,
        }
        for run in ScenarioRun.objects.all()[:50]
    ]
    scenarios = [path.stem for path in bundled_scenarios()]
    return JsonResponse({"scenarios": scenarios, "runs": runs}, json_dumps_params=JSON_DUMPS)


def run_report(request, run_id):  # pylint: disable=W0613
    """Return the stored report and failures of one run."""
    run = get_object_or_404(ScenarioRun, pk=run_id)
    body = {"name": run.name, "seed": run.seed, "outcome": run.get_outcome_display(), "failures": run.failures}
    return JsonResponse({**body, "report": run.report}, json_dumps_params=JSON_DUMPS)
