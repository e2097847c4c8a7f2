"""Independent reference checks used as test oracles.

These deliberately avoid the package's own helpers: they work on plain
documents and recompute everything from first principles.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from typing import Any, Iterable, Mapping, Sequence


def sha256_canonical(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- validation


def _num(v: Any) -> bool:
    return type(v) in (int, float) and math.isfinite(v)


def field_walker(schema: Sequence[Mapping[str, Any]], args: Any) -> Counter:
    """Multiset of (code, path) violations for ``args`` against schema documents."""
    found: Counter = Counter()
    stack: list[tuple[Sequence[Mapping[str, Any]], Any, str]] = [(schema, args, "")]
    while stack:
        fields, doc, prefix = stack.pop()
        if not isinstance(doc, dict):
            found[("TypeMismatch", prefix)] += 1
            continue
        by_name = {f["name"]: f for f in fields}
        for key in doc:
            if key not in by_name:
                found[("UnknownField", f"{prefix}.{key}" if prefix else key)] += 1
        for name, f in by_name.items():
            path = f"{prefix}.{name}" if prefix else name
            if name not in doc:
                if f.get("required", True):
                    found[("MissingField", path)] += 1
                continue
            pending = [(f, doc[name], path)]
            while pending:
                fs, v, p = pending.pop()
                kind = fs["kind"]
                if kind == "text":
                    if type(v) is not str:
                        found[("TypeMismatch", p)] += 1
                    elif fs.get("max_length") is not None and len(v) > fs["max_length"]:
                        found[("OutOfRange", p)] += 1
                elif kind == "integer" or kind == "decimal":
                    good = type(v) is int if kind == "integer" else _num(v)
                    if not good:
                        found[("TypeMismatch", p)] += 1
                    elif (fs.get("maximum") is not None and v > fs["maximum"]) or (
                        fs.get("minimum") is not None and v < fs["minimum"]
                    ):
                        found[("OutOfRange", p)] += 1
                elif kind == "boolean":
                    if type(v) is not bool:
                        found[("TypeMismatch", p)] += 1
                elif kind == "enumeration":
                    if type(v) is not str:
                        found[("TypeMismatch", p)] += 1
                    elif v not in fs["allowed"]:
                        found[("NotInEnumeration", p)] += 1
                elif kind == "nested-document":
                    stack.append((fs["children"], v, p))
                elif kind == "list":
                    if type(v) is not list:
                        found[("TypeMismatch", p)] += 1
                        continue
                    if fs.get("max_length") is not None and len(v) > fs["max_length"]:
                        found[("OutOfRange", p)] += 1
                    for i, item in enumerate(v):
                        pending.append((fs["children"][0], item, f"{p}[{i}]"))
    return found


# ---------------------------------------------------------------- audit chain


def chain_walk(event_docs: Sequence[Mapping[str, Any]]) -> int | None:
    """Index of the first event whose hashes do not recompute, or None."""
    prev = "0" * 64
    for i, e in enumerate(event_docs):
        body = {"component": e["component"], "kind": e["kind"], "tick": e["tick"], "payload": e["payload"]}
        if e["seq"] != i or e["prev_hash"] != prev or e["payload_hash"] != sha256_canonical(body):
            return i
        if e["chain_hash"] != hashlib.sha256(f"{prev}{e['payload_hash']}{i}".encode()).hexdigest():
            return i
        prev = e["chain_hash"]
    return None


# ---------------------------------------------------------------- scans over traces

ACTUATING = ("ActuateReversible", "ActuateIrreversible")


def unsimulated_actuations(event_docs: Iterable[Mapping[str, Any]]) -> list[int]:
    """Seqs of actuating adapter invocations that cite no earlier passing simulation verdict for their step."""
    passed: dict[str, str] = {}
    bad = []
    for e in event_docs:
        p = e["payload"]
        if e["kind"] == "VerdictIssued" and p.get("kind") == "simulation" and p.get("pass"):
            passed[p["verdict_id"]] = p["subject_ref"]
        elif e["kind"] == "AdapterInvoked" and p.get("scope") in ACTUATING:
            ref = p.get("sim_verdict_ref")
            if ref not in passed or passed[ref] not in (p.get("step_id"), p.get("call_id")):
                bad.append(e["seq"])
    return bad


def actuations_after_halt(event_docs: Iterable[Mapping[str, Any]]) -> list[int]:
    halted = False
    bad = []
    for e in event_docs:
        if e["kind"] == "SafeHalt":
            halted = True
        elif e["kind"] == "OperatorOverride":
            halted = False
        elif halted and e["kind"] == "AdapterInvoked" and e["payload"].get("scope") in ACTUATING:
            bad.append(e["seq"])
    return bad


def _exceeds(led: Mapping[str, Any], bud: Mapping[str, Any]) -> bool:
    for key, cap in (("steps", "max_steps"), ("cost_units", "max_cost_units"), ("wall_ticks", "max_wall_ticks")):
        if bud.get(cap) is not None and led[key] > bud[cap]:
            return True
    return any(led["per_tool"].get(tool, 0) > quota for tool, quota in bud.get("per_tool_quotas", {}).items())


def _plus(led: Mapping[str, Any], inc: Mapping[str, Any]) -> dict:
    tools = dict(led["per_tool"])
    for name, n in inc["per_tool"].items():
        tools[name] = tools.get(name, 0) + n
    return {k: led[k] + inc[k] for k in ("steps", "cost_units", "wall_ticks")} | {"per_tool": tools}


def budget_prefix_violations(event_docs: Iterable[Mapping[str, Any]]) -> list[int]:
    """Seqs of BudgetCheck events whose decision disagrees with the caps.

    A ``continue`` records the post-increment ledger, which must be within
    every cap; a ``halt`` records the untouched ledger, and ledger plus
    increment must exceed at least one cap.
    """
    bad = []
    for e in event_docs:
        if e["kind"] != "BudgetCheck":
            continue
        p = e["payload"]
        if p["decision"] == "continue":
            wrong = _exceeds(p["ledger"], p["budget"])
        else:
            wrong = not _exceeds(_plus(p["ledger"], p["increment"]), p["budget"])
        if wrong:
            bad.append(e["seq"])
    return bad


def retrieval_refilter(result_payload: Mapping[str, Any]) -> list[str]:
    """Ids in a logged Retrieval result that fail ttl, validity, status or citation under its own policy."""
    policy = result_payload["policy"]
    now = result_payload["now"]
    bad = []
    for item in result_payload["items"]:
        ok = item["status"] in policy["statuses"]
        if item["ttl"] is not None and now - item["created_at"] > item["ttl"]:
            ok = False
        for key, value in item["validity"].items():
            if key not in policy["context"] or policy["context"][key] != value:
                ok = False
        if policy["require_citation"] and not item["source_uri"]:
            ok = False
        if not ok:
            bad.append(item["id"])
    return bad


# ---------------------------------------------------------------- search


def exhaustive_best(root: Any, children: Mapping[Any, Sequence[Any]], scores: Mapping[Any, Any], max_depth: int) -> Any:
    """Highest-scoring feasible node reachable within ``max_depth`` (root included)."""
    best, best_score = root, scores.get(root, 0) if scores.get(root) is not None else 0
    level = [root]
    for _ in range(max_depth):
        nxt = []
        for node in level:
            for c in children.get(node, ()):
                if scores.get(c) is None:
                    continue
                nxt.append(c)
                if scores[c] > best_score:
                    best, best_score = c, scores[c]
        level = nxt
    return best


# ---------------------------------------------------------------- memory


def quarantine_violations(event_docs: Iterable[Mapping[str, Any]], records: Iterable[Mapping[str, Any]], uncurated: set) -> list[str]:
    """Records that reached Published without both promotions and two sources, or uncurated non-Untrusted writes."""
    steps: dict[tuple, list[tuple[str, str]]] = {}
    sources: dict[tuple, list] = {}
    bad = []
    for e in event_docs:
        p = e["payload"]
        if e["kind"] == "Promotion":
            steps.setdefault((p["id"], p["version"]), []).append((p["from"], p["to"]))
            sources[(p["id"], p["version"])] = p["sources"]
        elif e["kind"] == "MemoryWrite" and p.get("writer") in uncurated and p["tier"] != "Untrusted":
            bad.append(f"{p['id']}:uncurated_tier")
    for rec in records:
        if rec["status"] != "Published":
            continue
        key = (rec["id"], rec["version"])
        if steps.get(key) != [("Draft", "Verified"), ("Verified", "Published")]:
            bad.append(f"{rec['id']}:transitions")
        if len(set(sources.get(key, ()))) < 2 or len(set(rec["corroborations"])) < 2:
            bad.append(f"{rec['id']}:sources")
    return bad
