"""Run a scenario end to end: simulate, derive the report, check expectations and store the outcome."""
from dataclasses import dataclass, field, replace
from pathlib import Path
import logging

from django.db import DatabaseError

from .errors import ParpError
from .metrics import build_report, render_json
from .models import ScenarioRun
from .scenarios import check_expectations, load_scenario
from .simnet import run


@dataclass
class RunResult:
    """Everything one scenario run produced."""

    name: str
    seed: int
    trace: object = None
    report: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    error: str = ""

    @property
    def outcome(self):
        """Map the result onto the stored outcome choices."""
        if self.error:
            return ScenarioRun.Outcome.ERROR
        return ScenarioRun.Outcome.FAILED if self.failures else ScenarioRun.Outcome.PASSED


def execute(scenario, seed=None, **overrides):
    """Simulate a loaded scenario and compare the report with its expect block."""
    logger = logging.getLogger("django")
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    result = RunResult(scenario.name, scenario.seed)
    try:
        config = scenario.config(**overrides)
        result.trace = run(scenario, config)
    except ParpError as err:
        logger.error(f"Scenario {scenario.name} could not run: {err.code}: {err.detail}")
        result.error = f"{err.code}: {err.detail}"
        return result
    result.report = build_report(result.trace.records)
    result.failures = check_expectations(result.report, scenario.expect)
    for failure in result.failures:
        logger.warning(f"Scenario {scenario.name}: {failure}")
    return result


def execute_path(path, seed=None, **overrides):
    """Load a scenario file and execute it; file errors propagate as ScenarioError."""
    return execute(load_scenario(path), seed, **overrides)


def write_outputs(result, out_dir):
    """Write trace.jsonl and report.json of a run into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if result.trace is not None:
        result.trace.write(out_dir / "trace.jsonl")
    (out_dir / "report.json").write_text(render_json(result.report), encoding="utf-8")
    return out_dir


def store(result, path=""):
    """Record a run in the database; storage problems are logged, never raised."""
    try:
        return ScenarioRun.objects.create(
            name=result.name,
            path=str(path),
            seed=result.seed,
            outcome=result.outcome,
            trace_digest=result.trace.digest() if result.trace is not None else "",
            report=result.report,
            failures=result.failures or ([result.error] if result.error else []),
        )
    except DatabaseError as err:
        logging.getLogger("django").error(f"Could not store the run of {result.name}: {err}")
        return None
