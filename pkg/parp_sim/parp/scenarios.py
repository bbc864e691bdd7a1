"""Scenario files: loading, validation and checking a run's report against its expectations."""
from dataclasses import dataclass, field, replace
from pathlib import Path
import json

from .conf import ParpConfig
from .errors import ParpError

BUNDLED_DIR = Path(__file__).resolve().parent / "scenarios"
ACTIONS = {"handshake", "call", "calls", "close", "deposit", "transfer"}
TOP_LEVEL = {
    "name",
    "description",
    "seed",
    "horizon",
    "delay",
    "params",
    "accounts",
    "nodes",
    "witness",
    "clients",
    "links",
    "script",
    "expect",
}


class ScenarioError(ParpError):
    """A scenario file is unreadable or does not follow the schema."""


class ScenarioNotFound(ScenarioError):
    """The scenario path does not exist."""


@dataclass(frozen=True)
class Scenario:
    """A declarative run: actors, their policies, a timed script and the expected outcome."""

    name: str
    seed: int = 0
    horizon: int = None
    delay: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    accounts: dict = field(default_factory=dict)
    nodes: list = field(default_factory=list)
    witness: str = None
    clients: list = field(default_factory=list)
    links: list = field(default_factory=list)
    script: list = field(default_factory=list)
    expect: dict = field(default_factory=dict)
    description: str = ""

    @property
    def ordered(self):
        """Return whether links keep per-link FIFO order (the default)."""
        return self.delay.get("ordered", True)

    def config(self, **overrides):
        """Build the run config: settings, then scenario params, then explicit overrides."""
        values = dict(self.params)
        if self.horizon is not None:
            values["horizon"] = self.horizon
        if "min" in self.delay or "max" in self.delay:
            values["delay"] = (self.delay.get("min", 1), self.delay.get("max", 2))
        values.update({key: value for key, value in overrides.items() if value is not None})
        return ParpConfig.from_settings(**values)

    @classmethod
    def from_dict(cls, data):
        """Validate a parsed scenario document and build the Scenario."""
        if not isinstance(data, dict):
            raise ScenarioError("A scenario must be a JSON object.")
        unknown = sorted(set(data) - TOP_LEVEL)
        if unknown:
            raise ScenarioError(f"Unknown scenario keys: {', '.join(unknown)}.", keys=unknown)
        if not data.get("name"):
            raise ScenarioError("A scenario needs a name.")
        for actor in data.get("nodes", []):
            if "id" not in actor:
                raise ScenarioError("Every node needs an id.")
        for actor in data.get("clients", []):
            if "id" not in actor or "node" not in actor:
                raise ScenarioError("Every client needs an id and a node.")
        for link in data.get("links", []):
            if not {"from", "to", "min", "max"} <= set(link):
                raise ScenarioError("Links need from, to, min and max.")
        for action in data.get("script", []):
            if action.get("action") not in ACTIONS:
                raise ScenarioError(f"Unknown action {action.get('action')!r}.", action=action.get("action"))
        return cls(**data)

    def with_node_policy(self, node_id, policy):
        """Return a copy in which one node runs a different policy."""
        nodes = [dict(actor, policy=policy) if actor["id"] == node_id else actor for actor in self.nodes]
        return replace(self, nodes=nodes)


def load_scenario(path):
    """Read and validate a scenario file; a bare name such as "honest" picks a bundled scenario."""
    path = Path(path)
    if not path.is_file() and not path.suffix and path.parent == Path("."):
        path = BUNDLED_DIR / f"{path.name}.json"
    if not path.is_file():
        raise ScenarioNotFound(f"No scenario file at {path}.", path=str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as err:
        raise ScenarioError(f"Cannot read {path}: {err}", path=str(path)) from err
    return Scenario.from_dict(data)


def bundled_scenarios():
    """Return the paths of the scenarios shipped with the app, sorted by name."""
    return sorted(BUNDLED_DIR.glob("*.json"))


def _verdict_count(verdicts, key):
    """Count verdicts equal to key or refining it, so "Invalid" also counts "Invalid:ChannelMismatch"."""
    return sum(count for verdict, count in verdicts.items() if verdict == key or verdict.startswith(key + ":"))


def check_expectations(report, expect):
    """Compare a report with a scenario's expect block and return a list of failure messages."""
    failures = []
    if not report.get("conserved", False):
        failures.append("token supply was not conserved")
    for key, count in sorted(expect.get("verdicts", {}).items()):
        actual = _verdict_count(report["verdicts"], key)
        if actual != count:
            failures.append(f"verdicts {key}: expected {count}, got {actual}")
    for key, count in sorted(expect.get("min_verdicts", {}).items()):
        actual = _verdict_count(report["verdicts"], key)
        if actual < count:
            failures.append(f"verdicts {key}: expected at least {count}, got {actual}")
    if "fraud_accepted" in expect and len(report["slashes"]) != expect["fraud_accepted"]:
        failures.append(f"fraud_accepted: expected {expect['fraud_accepted']}, got {len(report['slashes'])}")
    if "rejected_fraud" in expect:
        rejected = report["onchain"].get("SubmitFraudProof", {}).get("rejected", 0)
        if rejected != expect["rejected_fraud"]:
            failures.append(f"rejected_fraud: expected {expect['rejected_fraud']}, got {rejected}")
    if "slashed" in expect:
        slashed = sorted({slash["fn"] for slash in report["slashes"]})
        if slashed != sorted(expect["slashed"]):
            failures.append(f"slashed: expected {sorted(expect['slashed'])}, got {slashed}")
    if "channels_closed" in expect and len(report["settlements"]) != expect["channels_closed"]:
        failures.append(f"channels_closed: expected {expect['channels_closed']}, got {len(report['settlements'])}")
    for wanted in expect.get("settlements", []):
        matches = [item for item in report["settlements"] if all(item.get(k) == v for k, v in wanted.items())]
        if not matches:
            failures.append(f"no settlement matching {json.dumps(wanted, sort_keys=True)}")
    for client, step in sorted(expect.get("final_steps", {}).items()):
        actual = report["final_steps"].get(client, "IDLE")
        if actual != step:
            failures.append(f"final step of {client}: expected {step}, got {actual}")
    return failures
