"""Seeded random generators for schemas, argument documents and trees."""

from __future__ import annotations

import random
import string

KIND_WEIGHTS = (("text", 3), ("integer", 3), ("decimal", 3), ("boolean", 2), ("enumeration", 3), ("nested-document", 1), ("list", 1))


def _name(rng: random.Random) -> str:
    return rng.choice(string.ascii_lowercase) + "".join(rng.choices(string.ascii_lowercase + "_", k=rng.randint(0, 5)))


def random_field(rng: random.Random, name: str, depth: int) -> dict:
    kinds = [k for k, w in KIND_WEIGHTS for _ in range(w) if depth < 2 or k not in ("nested-document", "list")]
    kind = rng.choice(kinds)
    doc: dict = {"name": name, "kind": kind, "required": rng.random() < 0.7}
    if kind in ("integer", "decimal"):
        lo = rng.randint(-10, 10)
        if rng.random() < 0.6:
            doc["minimum"] = lo
        if rng.random() < 0.6:
            doc["maximum"] = lo + rng.randint(0, 20)
    elif kind == "text" and rng.random() < 0.5:
        doc["max_length"] = rng.randint(0, 6)
    elif kind == "enumeration":
        doc["allowed"] = sorted({_name(rng) for _ in range(rng.randint(1, 4))})
    elif kind == "nested-document":
        doc["children"] = random_schema(rng, depth + 1)
    elif kind == "list":
        if rng.random() < 0.5:
            doc["max_length"] = rng.randint(0, 3)
        doc["children"] = [random_field(rng, "item", depth + 1)]
    return doc


def random_schema(rng: random.Random, depth: int = 0) -> list[dict]:
    names = list(dict.fromkeys(_name(rng) for _ in range(rng.randint(1 if depth else 0, 5))))
    return [random_field(rng, n, depth) for n in names]


def _wild(rng: random.Random):
    return rng.choice([None, True, False, 0, -3, 7, 2.5, float(rng.randint(-20, 20)) / 4, "", "x", _name(rng), [], [1, "a"], {}, {"k": 1}])


def random_value(rng: random.Random, f: dict):
    if rng.random() < 0.25:
        return _wild(rng)
    kind = f["kind"]
    if kind == "text":
        return "".join(rng.choices("abc", k=rng.randint(0, 8)))
    if kind == "integer":
        return rng.randint(-15, 35)
    if kind == "decimal":
        return rng.choice([rng.randint(-15, 35), rng.uniform(-15, 35)])
    if kind == "boolean":
        return rng.random() < 0.5
    if kind == "enumeration":
        return rng.choice(f["allowed"] + [_name(rng)])
    if kind == "nested-document":
        return random_args(rng, f["children"])
    return [random_value(rng, f["children"][0]) for _ in range(rng.randint(0, 4))]


def random_args(rng: random.Random, schema: list[dict]):
    if rng.random() < 0.03:
        return _wild(rng)
    doc = {}
    for f in schema:
        if rng.random() < 0.85:
            doc[f["name"]] = random_value(rng, f)
    for _ in range(rng.choice([0, 0, 0, 1, 2])):
        doc.setdefault(_name(rng) + "_x", _wild(rng))
    return doc


def random_tree(rng: random.Random, max_nodes: int = 100):
    """(root, children, scores) with integer labels, unique maximum, some infeasible leaves."""
    n = rng.randint(1, max_nodes)
    children: dict[int, list[int]] = {}
    for node in range(1, n):
        parent = rng.randrange(node)
        children.setdefault(parent, []).append(node)
    values = rng.sample(range(1, 10 * n + 10), n)
    scores = {i: values[i] for i in range(n)}
    for node in range(1, n):
        if rng.random() < 0.1:
            scores[node] = None
    return 0, children, scores


def tree_depth(children: dict, root=0) -> int:
    best, stack = 0, [(root, 0)]
    while stack:
        node, d = stack.pop()
        best = max(best, d)
        stack.extend((c, d + 1) for c in children.get(node, ()))
    return best


# ---------------------------------------------------------------- dialogues

ACTS = ["Proposal", "Critique", "Evidence", "Info", "Decision"]


def random_dialogue(rng: random.Random):
    """(roles, agents, config) for a random roster of scripted agents."""
    from agentkernel.assurance import Budget
    from agentkernel.protocol import DialogueConfig, RoleDescriptor, ScriptedAgent

    n = rng.randint(1, 4)
    roles = [
        RoleDescriptor(
            f"r{i}",
            may_propose=rng.random() < 0.7,
            may_critique=rng.random() < 0.5,
            per_role_budget=Budget(max_steps=rng.choice([None, 1, 2, 5])),
        )
        for i in range(n)
    ]
    if rng.random() < 0.5:
        roles.append(RoleDescriptor("judge", may_decide=True))
    agents = {}
    for r in roles:
        turns = []
        for _ in range(rng.randint(1, 6)):
            if rng.random() < 0.15:
                turns.append(None)
                continue
            payload = rng.choice([{"plan": rng.choice("ABC")}, {"accept": "$latest_proposal"}, {"note": "t{turn}"}])
            turns.append(
                {
                    "speech_act": rng.choice(ACTS),
                    "payload": payload,
                    "evidence_refs": rng.choice([[], ["e1"], ["e1", "e2"]]),
                }
            )
        agents[r.role_id] = ScriptedAgent(turns, repeat=rng.random() < 0.7)
    config = DialogueConfig(
        max_rounds=rng.randint(1, 8),
        max_total_ticks=rng.randint(1, 60),
        fixed_point_window=rng.randint(1, 3),
        no_new_info_window=rng.randint(1, 4),
        citation_required=rng.random() < 0.5,
        quarantine_after=rng.randint(1, 4),
    )
    return roles, agents, config


# ---------------------------------------------------------------- memory sessions


def random_session(rng: random.Random, ops: int):
    """Random write/corroborate/promote traffic from a curated and an uncurated writer."""
    from agentkernel.assurance import make_verdict
    from agentkernel.audit import AuditLog
    from agentkernel.memory import GOLD, SILVER, UNTRUSTED, MemoryFault, MemoryRecord, MemoryStore, WriterCapability

    log = AuditLog()
    store = MemoryStore(log)
    writers = [WriterCapability("curator", curated=True), WriterCapability("user")]
    ids = [f"m{i}" for i in range(4)]
    for _ in range(ops):
        rid = rng.choice(ids)
        op = rng.random()
        try:
            if op < 0.35:
                content = rng.choice(["pump seal", "fan derate", "temp limit"])
                tier = rng.choice([GOLD, SILVER, UNTRUSTED])
                source = rng.choice(["s1", "s2", ""])
                rec = MemoryRecord(rid, content, source_uri=source, tier=tier, created_at=log.clock.now, ttl=rng.choice([None, 5, 50]))
                store.write(rec, "p", rng.choice(writers))
            elif op < 0.55:
                store.corroborate(rid, rng.choice(["s1", "s2", "s3"]))
            else:
                subject = rng.choice([rid, rid, "other"])
                store.promote(rid, make_verdict("check", "1", subject, rng.random() < 0.8))
        except MemoryFault:
            pass
        log.clock.advance(1)
    return log, store
