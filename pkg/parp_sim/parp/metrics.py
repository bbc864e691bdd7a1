"""Metrics derived from a trace, plus the proof-size benchmark and the report renderers."""
from collections import Counter
from functools import lru_cache
import json

from .chain import Payload
from .codec import REQUEST_OVERHEAD, RESPONSE_OVERHEAD, overhead_delta
from .errors import ParpError
from .trie import Trie, proof_size, tx_key

BENCHMARK_SIZES = (50, 100, 200, 300, 400)
BENCHMARK_SENDER = b"\x11" * 20
BENCHMARK_PAYLOAD = 64
REFERENCE_REQUEST_OVERHEAD = 226
REFERENCE_RESPONSE_OVERHEAD = 187
REFERENCE_PROOF_SIZE = 1150
REFERENCE_PROOF_BLOCK = 200


class MalformedTrace(ParpError):
    """A trace file is not a sequence of JSON records."""


def _stats(values):
    """Return count, min, mean and max of a list of numbers."""
    if not values:
        return {"count": 0, "min": 0, "mean": 0, "max": 0}
    return {"count": len(values), "min": min(values), "mean": round(sum(values) / len(values), 2), "max": max(values)}


@lru_cache(maxsize=None)
def proof_size_table(block_sizes=BENCHMARK_SIZES):
    """Measure the serialized inclusion-proof size of every index of synthetic Payload blocks."""
    table = {}
    for size in block_sizes:
        items = []
        for index in range(size):
            payload = index.to_bytes(8, "big") * (BENCHMARK_PAYLOAD // 8)
            items.append((tx_key(index), Payload(BENCHMARK_SENDER, payload).encode()))
        trie = Trie.from_items(items)
        sizes = [proof_size(trie.prove(tx_key(index))) for index in range(size)]
        table[size] = {**_stats(sizes), "sizes": sizes}
    return table


def discontinuities(sizes):
    """Return the indices where the proof size changes from the previous index."""
    return [index for index in range(1, len(sizes)) if sizes[index] != sizes[index - 1]]


def read_trace(path):
    """Parse a JSON-lines trace file."""
    records = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as err:
                raise MalformedTrace(f"Line {number} is not JSON.", line=number) from err
            if not isinstance(record, dict) or "type" not in record:
                raise MalformedTrace(f"Line {number} is not a trace record.", line=number)
            records.append(record)
    return records


def _comparison(requests, responses):
    """Compare measured metadata overheads and the 200-transaction proof size with reference figures."""
    request_overhead = requests["mean"] if requests["count"] else REQUEST_OVERHEAD
    response_overhead = responses["mean"] if responses["count"] else RESPONSE_OVERHEAD
    proof_mean = proof_size_table()[REFERENCE_PROOF_BLOCK]["mean"]
    rows = [
        ("request overhead (bytes)", request_overhead, REFERENCE_REQUEST_OVERHEAD),
        ("response overhead (bytes)", response_overhead, REFERENCE_RESPONSE_OVERHEAD),
        (f"proof size, {REFERENCE_PROOF_BLOCK}-tx block (bytes)", proof_mean, REFERENCE_PROOF_SIZE),
    ]
    comparison = []
    for name, measured, reference in rows:
        delta = round(overhead_delta(measured, reference), 1)
        comparison.append({"metric": name, "measured": measured, "reference": reference, "delta_pct": delta})
    return comparison


def build_report(records):
    """Derive the metrics report from trace records; the same trace always gives the same report."""
    scenario = next((record for record in records if record["type"] == "scenario"), {})
    end = next((record for record in reversed(records) if record["type"] == "end"), {})
    by_type = {}
    for record in records:
        by_type.setdefault(record["type"], []).append(record)
    requests = by_type.get("request", [])
    responses = by_type.get("response", [])
    request_overheads = [item["size"] - item["gamma_len"] - 4 for item in requests]
    response_overheads = [item["size"] - item["result_len"] - item["proof_len"] - 8 for item in responses]
    onchain = {}
    for item in by_type.get("tx", []):
        counts = onchain.setdefault(item["kind"], {"accepted": 0, "rejected": 0})
        counts["accepted" if item["accepted"] else "rejected"] += 1
    settlements = [
        {key: item[key] for key in ("alpha", "fn", "lc", "fn_amount", "lc_amount", "t")}
        for item in by_type.get("settlement", [])
    ]
    slash_keys = ("alpha", "fn", "lc", "reporter", "condition", "deposit", "client", "witness", "treasury")
    slashes = [{key: item[key] for key in slash_keys} for item in by_type.get("slash", [])]
    final_steps = {name: "IDLE" for name in scenario.get("clients", [])}
    for item in by_type.get("transition", []):
        final_steps[item["actor"]] = item["to"]
    serve_rejects = [item for item in by_type.get("reject", []) if item.get("kind") == "request"]
    request_stats = _stats(request_overheads)
    response_stats = _stats(response_overheads)
    return {
        "scenario": scenario.get("name", ""),
        "seed": scenario.get("seed", 0),
        "messages": {
            "request": {**_stats([item["size"] for item in requests]), "overhead": request_stats},
            "response": {**_stats([item["size"] for item in responses]), "overhead": response_stats},
        },
        "onchain": dict(sorted(onchain.items())),
        "lifecycle": {
            "open": onchain.get("OpenChannel", {}).get("accepted", 0),
            "close": onchain.get("CloseChannel", {}).get("accepted", 0),
            "dispute": onchain.get("SubmitState", {}).get("accepted", 0),
            "confirm": len(settlements),
            "fraud": onchain.get("SubmitFraudProof", {}).get("accepted", 0),
        },
        "settlements": settlements,
        "slashes": slashes,
        "verdicts": dict(sorted(Counter(item["verdict"] for item in by_type.get("verdict", [])).items())),
        "steps": {
            "A_request_generation": len(requests),
            "B_request_verification": len(by_type.get("serve", [])) + len(serve_rejects),
            "C_response_generation": len(responses),
            "D_response_verification": len(by_type.get("verdict", [])),
        },
        "timeouts": len(by_type.get("timeout", [])),
        "final_steps": dict(sorted(final_steps.items())),
        "blocks": end.get("height", 0),
        "conserved": bool(end) and end.get("supply") == scenario.get("supply"),
        "comparison": _comparison(request_stats, response_stats),
        "proof_sizes": {
            str(size): {key: row[key] for key in ("count", "min", "mean", "max")}
            for size, row in proof_size_table().items()
        },
    }


def render_json(report):
    """Render a report as canonical JSON."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def render_text(report):
    """Render a report as a plain text table."""
    lines = [f"Scenario {report['scenario']} (seed {report['seed']}), {report['blocks']} blocks", ""]
    lines.append(f"{'message':<10}{'count':>8}{'min':>8}{'mean':>10}{'max':>8}{'overhead':>10}")
    for kind in ("request", "response"):
        stats = report["messages"][kind]
        count, low, mean, high = (stats[key] for key in ("count", "min", "mean", "max"))
        lines.append(f"{kind:<10}{count:>8}{low:>8}{mean:>10}{high:>8}{stats['overhead']['mean']:>10}")
    lines.extend(["", "comparison"])
    for row in report["comparison"]:
        lines.append(f"  {row['metric']:<36}{row['measured']:>10}{row['reference']:>8}{row['delta_pct']:>+8.1f}%")
    lines.extend(["", "proof sizes (block size: min / mean / max)"])
    for size, row in report["proof_sizes"].items():
        lines.append(f"  {size:>5}: {row['min']} / {row['mean']} / {row['max']}")
    lines.extend(["", "on-chain transactions"])
    for kind, counts in report["onchain"].items():
        lines.append(f"  {kind:<18} accepted {counts['accepted']:>4}  rejected {counts['rejected']:>4}")
    lines.extend(["", "settlements"])
    for item in report["settlements"]:
        lines.append(f"  channel {item['alpha']}: {item['fn']} +{item['fn_amount']}, {item['lc']} +{item['lc_amount']}")
    for item in report["slashes"]:
        lines.append(f"  slashed {item['fn']} ({item['condition']}): {item['deposit']}")
    lines.extend(["", "verdicts"])
    for verdict, count in report["verdicts"].items():
        lines.append(f"  {verdict:<36}{count:>6}")
    lines.extend(["", "operations per step"])
    for step, count in report["steps"].items():
        lines.append(f"  {step:<36}{count:>6}")
    lines.extend(["", f"supply conserved: {'yes' if report['conserved'] else 'no'}"])
    return "\n".join(lines) + "\n"
