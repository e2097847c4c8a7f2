"""Dialogue engine: typed messages, a fixed roster, stop rules and a deterministic arbiter.

Agents see only typed views of earlier messages (role, act, payload,
evidence, hash), never another agent's internals. Consensus is explicit: a
role accepts a proposal by posting ``{"accept": <proposal payload hash>}``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .assurance import BUDGET_EXCEEDED, CONSENSUS_REACHED, DEADLOCK, NON_CONVERGENCE, Budget, WhyStopped
from .canonical import hash_doc
from .contracts import CapabilityToken, ToolScope, scope_leq

PROPOSAL, CRITIQUE, EVIDENCE, DECISION, INFO = "Proposal", "Critique", "Evidence", "Decision", "Info"
SPEECH_ACTS = (PROPOSAL, CRITIQUE, EVIDENCE, DECISION, INFO)
ARBITER_RULE = "max-evidence-then-seq/1"
LATEST_PROPOSAL = "$latest_proposal"


@dataclass(frozen=True)
class RoleDescriptor:
    role_id: str
    display_name: str = ""
    token: CapabilityToken | None = None
    per_role_budget: Budget = Budget()
    may_propose: bool = False
    may_critique: bool = False
    may_decide: bool = False

    def to_doc(self) -> dict:
        return {
            "role_id": self.role_id,
            "display_name": self.display_name,
            "token_ref": None if self.token is None else self.token.token_id,
            "per_role_budget": self.per_role_budget.to_doc(),
            "may_propose": self.may_propose,
            "may_critique": self.may_critique,
            "may_decide": self.may_decide,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any], tokens: Mapping[str, CapabilityToken] | None = None) -> "RoleDescriptor":
        ref = doc.get("token_ref")
        return cls(
            role_id=doc["role_id"],
            display_name=doc.get("display_name", doc["role_id"]),
            token=None if ref is None else (tokens or {})[ref],
            per_role_budget=Budget.from_doc(doc.get("per_role_budget", {})),
            may_propose=doc.get("may_propose", False),
            may_critique=doc.get("may_critique", False),
            may_decide=doc.get("may_decide", False),
        )


@dataclass(frozen=True)
class Message:
    role_id: str
    speech_act: str
    payload: Mapping[str, Any] = field(default_factory=dict)
    evidence_refs: tuple[str, ...] = ()
    tool_calls: tuple[Mapping[str, Any], ...] = ()
    decision_flag: bool = False
    seq: int = -1
    round: int = 0
    payload_hash: str = ""

    def to_doc(self) -> dict:
        return {
            "seq": self.seq,
            "round": self.round,
            "role_id": self.role_id,
            "speech_act": self.speech_act,
            "payload": dict(self.payload),
            "evidence_refs": list(self.evidence_refs),
            "tool_calls": [dict(c) for c in self.tool_calls],
            "decision_flag": self.decision_flag,
            "payload_hash": self.payload_hash,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Message":
        return cls(
            role_id=doc["role_id"],
            speech_act=doc["speech_act"],
            payload=dict(doc.get("payload", {})),
            evidence_refs=tuple(doc.get("evidence_refs", ())),
            tool_calls=tuple(doc.get("tool_calls", ())),
            decision_flag=doc.get("decision_flag", False),
            seq=doc.get("seq", -1),
            round=doc.get("round", 0),
            payload_hash=doc.get("payload_hash", ""),
        )


@dataclass(frozen=True)
class DialogueConfig:
    max_rounds: int = 6
    max_total_ticks: int = 1000
    fixed_point_window: int = 2
    no_new_info_window: int = 3
    citation_required: bool = True
    quarantine_after: int = 3

    def __post_init__(self) -> None:
        for name in ("max_rounds", "max_total_ticks", "fixed_point_window", "no_new_info_window", "quarantine_after"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_doc(self) -> dict:
        return {
            "max_rounds": self.max_rounds,
            "max_total_ticks": self.max_total_ticks,
            "fixed_point_window": self.fixed_point_window,
            "no_new_info_window": self.no_new_info_window,
            "citation_required": self.citation_required,
            "quarantine_after": self.quarantine_after,
        }


@dataclass(frozen=True)
class Accepted:
    message: Message


@dataclass(frozen=True)
class ProtocolViolation:
    code: str
    role_id: str
    detail: str = ""


@dataclass(frozen=True)
class DialogueOutcome:
    adopted: Mapping[str, Any] | None
    why_stopped: WhyStopped
    transcript_ref: str
    rounds_used: int
    messages: int
    muted: tuple[str, ...] = ()
    low_confidence: bool = False

    def to_doc(self) -> dict:
        return {
            "adopted": None if self.adopted is None else dict(self.adopted),
            "why_stopped": self.why_stopped.to_doc(),
            "transcript_ref": self.transcript_ref,
            "rounds_used": self.rounds_used,
            "messages": self.messages,
            "muted": list(self.muted),
            "low_confidence": self.low_confidence,
        }


def transcript_hash(transcript: Sequence[Message]) -> str:
    return hash_doc([m.to_doc() for m in transcript])


class Dialogue:
    """Transcript and enforcement state for one dialogue.

    The roster is fixed at construction; posting under any other role id is
    a violation.
    """

    def __init__(self, roles: Sequence[RoleDescriptor], config: DialogueConfig, *, log=None, dialogue_id: str = "dlg") -> None:
        ids = [r.role_id for r in roles]
        if len(set(ids)) != len(ids):
            raise ValueError("role ids must be unique")
        if sum(r.may_decide for r in roles) > 1:
            raise ValueError("at most one role may hold the decision right")
        self.roles: Mapping[str, RoleDescriptor] = {r.role_id: r for r in roles}
        self.order = tuple(ids)
        self.config = config
        self.log = log
        self.dialogue_id = dialogue_id
        self.transcript: list[Message] = []
        self.violations: Counter = Counter()
        self.muted: set[str] = set()
        self.posted: Counter = Counter()
        self.round = 0

    def _emit(self, kind: str, payload: Mapping[str, Any]) -> None:
        if self.log is not None:
            self.log.append("protocol", kind, {"dialogue_id": self.dialogue_id, **payload})

    def _violation(self, role_id: str, code: str, detail: str = "") -> ProtocolViolation:
        v = ProtocolViolation(code, role_id, detail)
        if role_id in self.roles:
            self.violations[role_id] += 1
        self._emit("ProtocolViolation", {"role_id": role_id, "code": code, "detail": detail, "count": self.violations[role_id]})
        if role_id in self.roles and role_id not in self.muted and self.violations[role_id] >= self.config.quarantine_after:
            self.muted.add(role_id)
            self._emit("RoleQuarantined", {"role_id": role_id, "violations": self.violations[role_id]})
        return v

    def check(self, msg: Message) -> tuple[str, str] | None:
        role = self.roles.get(msg.role_id)
        if role is None:
            return "UnknownRole", msg.role_id
        if msg.role_id in self.muted:
            return "RoleQuarantined", msg.role_id
        if msg.speech_act not in SPEECH_ACTS:
            return "UnauthorizedSpeechAct", msg.speech_act
        needed = {PROPOSAL: role.may_propose, CRITIQUE: role.may_critique, DECISION: role.may_decide}
        if not needed.get(msg.speech_act, True) or (msg.decision_flag and not role.may_decide):
            return "UnauthorizedSpeechAct", msg.speech_act
        if self.config.citation_required and msg.speech_act in (PROPOSAL, CRITIQUE) and not msg.evidence_refs:
            return "MissingEvidence", msg.speech_act
        for call in msg.tool_calls:
            tool = str(call.get("tool", ""))
            scope = ToolScope.parse(call.get("scope", "ReadOnly"))
            if role.token is None or not role.token.allows_tool(tool) or not scope_leq(scope, role.token.scope_ceiling):
                return "AuthorityEscalation", f"{tool}:{scope.wire}"
        cap = role.per_role_budget.max_steps
        if cap is not None and self.posted[msg.role_id] + 1 > cap:
            return "RoleBudgetExceeded", f"{self.posted[msg.role_id]}/{cap}"
        return None

    def post(self, msg: Message) -> Accepted | ProtocolViolation:
        problem = self.check(msg)
        if problem is not None:
            if problem[0] == "RoleQuarantined":
                self._emit("ProtocolViolation", {"role_id": msg.role_id, "code": problem[0], "detail": problem[1], "count": self.violations[msg.role_id]})
                return ProtocolViolation(problem[0], msg.role_id, problem[1])
            return self._violation(msg.role_id, *problem)
        sealed = replace(msg, seq=len(self.transcript), round=self.round, payload_hash=hash_doc(dict(msg.payload)))
        self.transcript.append(sealed)
        self.posted[msg.role_id] += 1
        self._emit(
            "MessagePosted",
            {
                "seq": sealed.seq,
                "round": sealed.round,
                "role_id": sealed.role_id,
                "speech_act": sealed.speech_act,
                "payload": dict(sealed.payload),
                "payload_hash": sealed.payload_hash,
                "evidence_refs": list(sealed.evidence_refs),
                "tool_calls": [dict(c) for c in sealed.tool_calls],
                "decision_flag": sealed.decision_flag,
            },
        )
        return Accepted(sealed)

    def view(self) -> list[dict]:
        """What agents may read: typed fields of accepted messages only."""
        return [
            {
                "seq": m.seq,
                "round": m.round,
                "role_id": m.role_id,
                "speech_act": m.speech_act,
                "payload": dict(m.payload),
                "evidence_refs": list(m.evidence_refs),
                "payload_hash": m.payload_hash,
                "provenance": "typed_payload",
            }
            for m in self.transcript
        ]

    def voters(self) -> list[str]:
        return [r for r in self.order if not self.roles[r].may_decide and r not in self.muted]

    def consensus(self) -> Message | None:
        """The latest proposal, if every active non-deciding role has accepted it."""
        proposals = [m for m in self.transcript if m.speech_act == PROPOSAL]
        if not proposals:
            return None
        latest = proposals[-1]
        h = latest.payload_hash
        first = min(m.seq for m in proposals if m.payload_hash == h)
        backers = {m.role_id for m in proposals if m.payload_hash == h}
        backers |= {m.role_id for m in self.transcript if m.seq >= first and m.payload.get("accept") == h}
        voters = self.voters()
        return latest if voters and all(v in backers for v in voters) else None


def detect_fixed_point(transcript: Sequence[Message], window: int) -> bool:
    """Proposal hashes of the last ``window`` rounds repeat those of the ``window`` rounds before."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not transcript:
        return False
    last = max(m.round for m in transcript)
    first = min(m.round for m in transcript)
    if last - first + 1 < 2 * window:
        return False

    def bag(lo: int, hi: int) -> Counter:
        return Counter(m.payload_hash for m in transcript if m.speech_act == PROPOSAL and lo <= m.round <= hi)

    recent = bag(last - window + 1, last)
    before = bag(last - 2 * window + 1, last - window)
    return bool(recent) and recent == before


class NoProposals(ValueError):
    pass


def evidence_score(msg: Message, verdicts: Mapping[str, bool]) -> Fraction:
    """Share of the message's evidence refs with a passing verdict; unverified counts as failing."""
    if not msg.evidence_refs:
        return Fraction(0)
    return Fraction(sum(1 for r in msg.evidence_refs if verdicts.get(r) is True), len(msg.evidence_refs))


@dataclass(frozen=True)
class Decision:
    selected: Message
    score: Fraction
    low_confidence: bool
    rule_version: str = ARBITER_RULE


def arbitrate(proposals: Sequence[Message], scores: Mapping[int, Fraction], rule_version: str = ARBITER_RULE) -> Decision:
    """Highest evidence score wins; ties go to the lowest seq."""
    if not proposals:
        raise NoProposals("nothing to arbitrate")
    ranked = sorted(proposals, key=lambda m: (-scores.get(m.seq, Fraction(0)), m.seq))
    top = ranked[0]
    low = all(scores.get(m.seq, Fraction(0)) == 0 for m in proposals)
    return Decision(top, scores.get(top.seq, Fraction(0)), low, rule_version)


@dataclass(frozen=True)
class Arbiter:
    role_id: str
    verdicts: Mapping[str, bool] = field(default_factory=dict)
    rule_version: str = ARBITER_RULE

    def decide(self, dialogue: Dialogue) -> Decision | None:
        proposals = []
        seen = set()
        for m in dialogue.transcript:
            if m.speech_act == PROPOSAL and m.payload_hash not in seen:
                seen.add(m.payload_hash)
                proposals.append(m)
        if not proposals:
            return None
        return arbitrate(proposals, {m.seq: evidence_score(m, self.verdicts) for m in proposals}, self.rule_version)


Agent = Callable[[list, str, int], "Message | None"]


def run_dialogue(
    roles: Sequence[RoleDescriptor],
    agents: Mapping[str, Agent],
    config: DialogueConfig,
    arbiter: Arbiter | None = None,
    *,
    log=None,
    dialogue_id: str = "dlg",
) -> tuple[DialogueOutcome, Dialogue]:
    """Round-robin dialogue until a stop rule fires.

    ``agents[role](view, role_id, round)`` returns a message or None to
    pass. Stop rules, checked in this order: consensus (after every
    message), tick cap, deadlock (a round with no accepted message; the
    arbiter may decide), fixed point, no new information, round cap.
    """
    dlg = Dialogue(roles, config, log=log, dialogue_id=dialogue_id)
    ticks = 0
    quiet_rounds = 0
    seen_hashes: set[str] = set()
    adopted = None
    low_conf = False
    why: WhyStopped | None = None

    while why is None:
        if dlg.round >= config.max_rounds:
            why = WhyStopped(BUDGET_EXCEEDED, f"max_rounds={config.max_rounds}")
            break
        dlg.round += 1
        accepted = 0
        novel = False
        for role_id in dlg.order:
            if dlg.roles[role_id].may_decide or role_id in dlg.muted or role_id not in agents:
                continue
            if ticks >= config.max_total_ticks:
                why = WhyStopped(BUDGET_EXCEEDED, f"max_total_ticks={config.max_total_ticks}")
                break
            ticks += 1
            if log is not None:
                log.clock.advance(1)
            draft = agents[role_id](dlg.view(), role_id, dlg.round)
            if draft is None:
                continue
            res = dlg.post(draft)
            if isinstance(res, Accepted):
                accepted += 1
                if res.message.payload_hash not in seen_hashes:
                    novel = True
                    seen_hashes.add(res.message.payload_hash)
                agreed = dlg.consensus()
                if agreed is not None:
                    adopted = dict(agreed.payload)
                    why = WhyStopped(CONSENSUS_REACHED, f"proposal seq {agreed.seq}")
                    break
        if why is not None:
            break
        if accepted == 0:
            detail = "every role passed"
            if arbiter is not None:
                decision = arbiter.decide(dlg)
                if decision is not None:
                    res = dlg.post(
                        Message(
                            arbiter.role_id,
                            DECISION,
                            {"adopt": decision.selected.payload_hash, "rule": decision.rule_version, "score": str(decision.score)},
                            evidence_refs=decision.selected.evidence_refs,
                            decision_flag=True,
                        )
                    )
                    if isinstance(res, Accepted):
                        adopted = dict(decision.selected.payload)
                        low_conf = decision.low_confidence
                        detail = f"arbiter adopted seq {decision.selected.seq}"
            why = WhyStopped(DEADLOCK, detail)
            break
        if detect_fixed_point(dlg.transcript, config.fixed_point_window):
            why = WhyStopped(NON_CONVERGENCE, "fixed_point")
            break
        quiet_rounds = 0 if novel else quiet_rounds + 1
        if quiet_rounds >= config.no_new_info_window:
            why = WhyStopped(NON_CONVERGENCE, "no_new_information")
            break

    outcome = DialogueOutcome(
        adopted=adopted,
        why_stopped=why,
        transcript_ref=transcript_hash(dlg.transcript),
        rounds_used=dlg.round,
        messages=len(dlg.transcript),
        muted=tuple(sorted(dlg.muted)),
        low_confidence=low_conf,
    )
    if log is not None:
        log.append("protocol", "WhyStopped", {"dialogue_id": dialogue_id, **outcome.to_doc()})
    return outcome, dlg


def export_dag(transcript: Sequence[Message]) -> dict:
    """Conversation DAG: message and artifact nodes; reply and evidence edges."""
    nodes, edges = [], []
    by_hash: dict[str, int] = {}
    artifacts: set[str] = set()
    for m in transcript:
        nodes.append({"id": f"m{m.seq}", "type": "message", "role_id": m.role_id, "speech_act": m.speech_act, "payload_hash": m.payload_hash})
        for key in ("accept", "target", "adopt"):
            ref = m.payload.get(key)
            if isinstance(ref, str) and ref in by_hash:
                edges.append({"from": f"m{m.seq}", "to": f"m{by_hash[ref]}", "type": "reply"})
        for ref in m.evidence_refs:
            artifacts.add(ref)
            edges.append({"from": f"m{m.seq}", "to": f"a:{ref}", "type": "evidence"})
        by_hash.setdefault(m.payload_hash, m.seq)
    nodes.extend({"id": f"a:{a}", "type": "artifact"} for a in sorted(artifacts))
    return {"nodes": nodes, "edges": edges}


class ScriptedAgent:
    """Deterministic agent driven by a fixture.

    ``by_prefix`` maps a transcript-prefix hash to a message document and
    wins when it matches; otherwise ``turns`` is consulted by turn number
    (cycling when ``repeat`` is set). In payload strings ``{turn}`` expands
    to the turn number and the value ``$latest_proposal`` to the latest
    proposal's hash.
    """

    def __init__(self, turns: Sequence[Mapping[str, Any] | None] = (), *, by_prefix: Mapping[str, Mapping[str, Any]] | None = None, repeat: bool = False) -> None:
        self.turns = list(turns)
        self.by_prefix = dict(by_prefix or {})
        self.repeat = repeat
        self.turn = 0

    def __call__(self, view: list, role_id: str, round_no: int) -> Message | None:
        self.turn += 1
        doc = self.by_prefix.get(hash_doc(view))
        if doc is None:
            i = self.turn - 1
            if i >= len(self.turns):
                if not self.repeat or not self.turns:
                    return None
                i %= len(self.turns)
            doc = self.turns[i]
        if doc is None:
            return None
        latest = next((v["payload_hash"] for v in reversed(view) if v["speech_act"] == PROPOSAL), None)
        payload = _expand(doc.get("payload", {}), self.turn, latest)
        return Message(
            role_id=role_id,
            speech_act=doc["speech_act"],
            payload=payload,
            evidence_refs=tuple(doc.get("evidence_refs", ())),
            tool_calls=tuple(doc.get("tool_calls", ())),
            decision_flag=doc.get("decision_flag", False),
        )

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ScriptedAgent":
        return cls(doc.get("turns", ()), by_prefix=doc.get("by_prefix"), repeat=doc.get("repeat", False))


def _expand(value: Any, turn: int, latest: str | None) -> Any:
    if value == LATEST_PROPOSAL:
        return latest
    if isinstance(value, str):
        return value.replace("{turn}", str(turn))
    if isinstance(value, Mapping):
        return {k: _expand(v, turn, latest) for k, v in value.items()}
    if isinstance(value, list):
        return [_expand(v, turn, latest) for v in value]
    return value


@dataclass
class DialogueScenario:
    roles: list[RoleDescriptor]
    agents: dict[str, ScriptedAgent]
    config: DialogueConfig
    arbiter: Arbiter | None

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "DialogueScenario":
        tokens = {t["token_id"]: CapabilityToken.from_doc(t) for t in doc.get("tokens", ())}
        roles = [RoleDescriptor.from_doc(r, tokens) for r in doc["roles"]]
        agents = {rid: ScriptedAgent.from_doc(a) for rid, a in doc["agents"].items()}
        arb = doc.get("arbiter")
        arbiter = None if arb is None else Arbiter(arb["role_id"], dict(arb.get("verdicts", {})), arb.get("rule_version", ARBITER_RULE))
        return cls(roles, agents, DialogueConfig(**doc.get("config", {})), arbiter)

    @classmethod
    def load(cls, path: str | Path) -> "DialogueScenario":
        return cls.from_doc(json.loads(Path(path).read_text(encoding="utf-8")))
