"""Verifiers, budgets, the safety supervisor and intention governance.

Risk is an input here, never computed: the supervisor compares a supplied
estimate against its policy and fails closed on anything it cannot vouch
for.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

from .canonical import hash_doc
from . import predicates

# Termination vocabulary. Dialogue codes and search codes stay distinct even
# where they read alike (budget_exceeded vs budget_exhausted).
GOAL_SATISFIED = "goal_satisfied"
CONSENSUS_REACHED = "consensus_reached"
BUDGET_EXCEEDED = "budget_exceeded"
NON_CONVERGENCE = "non_convergence"
BUDGET_EXHAUSTED = "budget_exhausted"
CONVERGENCE = "convergence"
CONTRADICTION = "contradiction"
SAFETY_HALT = "safety_halt"
VERIFIER_REJECTION = "verifier_rejection"
DEADLOCK = "deadlock"
OPERATOR_ABORT = "operator_abort"

STOP_CODES = (
    GOAL_SATISFIED,
    CONSENSUS_REACHED,
    BUDGET_EXCEEDED,
    NON_CONVERGENCE,
    BUDGET_EXHAUSTED,
    CONVERGENCE,
    CONTRADICTION,
    SAFETY_HALT,
    VERIFIER_REJECTION,
    DEADLOCK,
    OPERATOR_ABORT,
)


@dataclass(frozen=True)
class WhyStopped:
    code: str
    detail: str = ""

    def __post_init__(self) -> None:
        if self.code not in STOP_CODES:
            raise ValueError(f"unknown why-stopped code {self.code!r}")

    def to_doc(self) -> dict:
        return {"code": self.code, "detail": self.detail}


# ---------------------------------------------------------------- verdicts


@dataclass(frozen=True)
class Verdict:
    verdict_id: str
    verifier_id: str
    verifier_version: str
    subject_ref: str
    passed: bool
    reason_codes: tuple[str, ...] = ()
    evidence_refs: tuple[str, ...] = ()
    kind: str = "check"
    constituents: tuple[str, ...] = ()

    def to_doc(self) -> dict:
        return {
            "verdict_id": self.verdict_id,
            "verifier": f"{self.verifier_id}@{self.verifier_version}",
            "subject_ref": self.subject_ref,
            "pass": self.passed,
            "reason_codes": list(self.reason_codes),
            "evidence_refs": list(self.evidence_refs),
            "kind": self.kind,
            "constituents": list(self.constituents),
        }


def make_verdict(
    verifier_id: str,
    verifier_version: str,
    subject_ref: str,
    passed: bool,
    reason_codes: Sequence[str] = (),
    evidence_refs: Sequence[str] = (),
    kind: str = "check",
    constituents: Sequence[str] = (),
) -> Verdict:
    reasons = tuple(reason_codes)
    if not passed and not reasons:
        reasons = ("unspecified_failure",)
    body = {
        "verifier": f"{verifier_id}@{verifier_version}",
        "subject_ref": subject_ref,
        "pass": passed,
        "reason_codes": list(reasons),
        "evidence_refs": list(evidence_refs),
        "kind": kind,
        "constituents": list(constituents),
    }
    return Verdict(
        verdict_id="vd-" + hash_doc(body)[:16],
        verifier_id=verifier_id,
        verifier_version=verifier_version,
        subject_ref=subject_ref,
        passed=passed,
        reason_codes=reasons,
        evidence_refs=tuple(evidence_refs),
        kind=kind,
        constituents=tuple(constituents),
    )


@dataclass(frozen=True)
class Verifier:
    """A deterministic, versioned check.

    ``check(subject)`` returns a bool, ``(bool, reasons)`` or
    ``(bool, reasons, evidence_refs)``.
    """

    verifier_id: str
    version: str
    check: Callable[[Any], Any]


def _run_verifier(verifier: Verifier, subject: Any) -> tuple[bool, list[str], list[str]]:
    try:
        out = verifier.check(subject)
    except Exception:  # fail closed
        return False, ["verifier_error"], []
    if isinstance(out, bool):
        return out, [], []
    passed, reasons, *rest = out
    return bool(passed), list(reasons), list(rest[0]) if rest else []


def verify(
    subject: Any,
    verifiers: Sequence[Verifier],
    *,
    subject_ref: str,
    kind: str = "check",
    log=None,
) -> Verdict:
    """Aggregate verdict: passes iff every verifier passes (vacuously with ``no_verifiers``)."""
    parts = []
    for v in verifiers:
        passed, reasons, evidence = _run_verifier(v, subject)
        verdict = make_verdict(v.verifier_id, v.version, subject_ref, passed, reasons, evidence, kind)
        parts.append(verdict)
        if log is not None:
            log.append("assurance", "VerdictIssued", verdict.to_doc())
    if not parts:
        reasons: list[str] = ["no_verifiers"]
    else:
        reasons = [r for p in parts for r in p.reason_codes]
    evidence = [e for p in parts for e in p.evidence_refs]
    agg = make_verdict(
        "aggregate",
        "1",
        subject_ref,
        all(p.passed for p in parts),
        reasons,
        evidence,
        kind,
        [p.verdict_id for p in parts],
    )
    if log is not None:
        log.append("assurance", "VerdictIssued", agg.to_doc())
    return agg


# ---------------------------------------------------------------- budgets


@dataclass(frozen=True)
class Budget:
    max_steps: int | None = None
    max_cost_units: float | None = None
    max_wall_ticks: int | None = None
    per_tool_quotas: Mapping[str, int] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "max_steps": self.max_steps,
            "max_cost_units": self.max_cost_units,
            "max_wall_ticks": self.max_wall_ticks,
            "per_tool_quotas": dict(self.per_tool_quotas),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Budget":
        return cls(
            max_steps=doc.get("max_steps"),
            max_cost_units=doc.get("max_cost_units"),
            max_wall_ticks=doc.get("max_wall_ticks"),
            per_tool_quotas=dict(doc.get("per_tool_quotas", {})),
        )


@dataclass(frozen=True)
class BudgetLedger:
    steps: int = 0
    cost_units: float = 0
    wall_ticks: int = 0
    per_tool: Mapping[str, int] = field(default_factory=dict)

    def __add__(self, other: "BudgetLedger") -> "BudgetLedger":
        tools = dict(self.per_tool)
        for name, n in other.per_tool.items():
            tools[name] = tools.get(name, 0) + n
        return BudgetLedger(
            self.steps + other.steps,
            self.cost_units + other.cost_units,
            self.wall_ticks + other.wall_ticks,
            tools,
        )

    def to_doc(self) -> dict:
        return {
            "steps": self.steps,
            "cost_units": self.cost_units,
            "wall_ticks": self.wall_ticks,
            "per_tool": dict(sorted(self.per_tool.items())),
        }


def first_violation(ledger: BudgetLedger, budget: Budget) -> str | None:
    """Name of the first dimension where ``ledger`` exceeds ``budget``."""
    if budget.max_steps is not None and ledger.steps > budget.max_steps:
        return "steps"
    if budget.max_cost_units is not None and ledger.cost_units > budget.max_cost_units:
        return "cost_units"
    if budget.max_wall_ticks is not None and ledger.wall_ticks > budget.max_wall_ticks:
        return "wall_ticks"
    for tool in sorted(budget.per_tool_quotas):
        if ledger.per_tool.get(tool, 0) > budget.per_tool_quotas[tool]:
            return f"tool:{tool}"
    return None


@dataclass(frozen=True)
class BudgetDecision:
    proceed: bool
    ledger: BudgetLedger
    why: WhyStopped | None = None


def check_budget(ledger: BudgetLedger, budget: Budget, increment: BudgetLedger, *, log=None) -> BudgetDecision:
    if (
        increment.steps < 0
        or increment.cost_units < 0
        or increment.wall_ticks < 0
        or any(n < 0 for n in increment.per_tool.values())
    ):
        raise ValueError("budget increments are non-negative")
    proposed = ledger + increment
    violated = first_violation(proposed, budget)
    decision = (
        BudgetDecision(True, proposed)
        if violated is None
        else BudgetDecision(False, ledger, WhyStopped(BUDGET_EXCEEDED, violated))
    )
    if log is not None:
        log.append(
            "assurance",
            "BudgetCheck",
            {
                "decision": "continue" if decision.proceed else "halt",
                "detail": violated,
                "ledger": decision.ledger.to_doc(),
                "increment": increment.to_doc(),
                "budget": budget.to_doc(),
            },
        )
    return decision


# ---------------------------------------------------------------- supervisor

NORMAL = "normal"
KEEP, SUSPEND, DROP = "Keep", "Suspend", "Drop"


@dataclass(frozen=True)
class SupervisorPolicy:
    """Risk limit, degraded modes (safest first) and reconsideration tables.

    ``degradation`` maps a failure class to the degraded mode it forces;
    ``reconsideration_actions`` maps a trigger kind to Keep/Suspend/Drop.
    """

    risk_threshold: float
    degraded_modes: tuple[str, ...] = ("monitor_only", "read_only", "shadow")
    escalation_target: str = "operator"
    reconsideration_triggers: tuple[Mapping[str, Any], ...] = ()
    reconsideration_actions: Mapping[str, str] = field(default_factory=dict)
    degradation: Mapping[str, str] = field(
        default_factory=lambda: {
            "transient_exhausted": "read_only",
            "timeout": "read_only",
            "tool_error": "monitor_only",
            "schema_mismatch": "monitor_only",
            "missing_data": "monitor_only",
            "conflicting_evidence": "monitor_only",
            "risk": "monitor_only",
            "unauthorized": "monitor_only",
        }
    )

    def __post_init__(self) -> None:
        if not 0.0 <= self.risk_threshold <= 1.0:
            raise ValueError("risk_threshold must lie in [0, 1]")
        object.__setattr__(self, "degraded_modes", tuple(self.degraded_modes))
        object.__setattr__(self, "reconsideration_triggers", tuple(self.reconsideration_triggers))
        for trig in self.reconsideration_triggers:
            predicates.check_descriptor(trig["when"])
        for action in self.reconsideration_actions.values():
            if action not in (KEEP, SUSPEND, DROP):
                raise ValueError(f"unknown reconsideration action {action!r}")
        for mode in self.degradation.values():
            if mode not in self.degraded_modes:
                raise ValueError(f"degradation target {mode!r} is not a degraded mode")

    def to_doc(self) -> dict:
        return {
            "risk_threshold": self.risk_threshold,
            "degraded_modes": list(self.degraded_modes),
            "escalation_target": self.escalation_target,
            "reconsideration_triggers": [dict(t) for t in self.reconsideration_triggers],
            "reconsideration_actions": dict(self.reconsideration_actions),
            "degradation": dict(self.degradation),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "SupervisorPolicy":
        kwargs = dict(doc)
        for key in ("degraded_modes", "reconsideration_triggers"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class Authorize:
    call_id: str


@dataclass(frozen=True)
class SafeHalt:
    explanation: str
    escalation: Mapping[str, Any]


def supervise_action(call, risk: float, verdict: Verdict | None, policy: SupervisorPolicy, *, log=None):
    """Authorize iff ``risk`` is within the policy threshold and ``verdict`` passed."""
    if not 0.0 <= risk <= 1.0:
        raise ValueError("risk must lie in [0, 1]")
    problems = []
    if risk > policy.risk_threshold:
        problems.append(f"predicted risk {risk} exceeds threshold {policy.risk_threshold}")
    if verdict is None:
        problems.append("no verifier verdict available")
    elif not verdict.passed:
        problems.append("verifier rejected: " + ",".join(verdict.reason_codes))
    if not problems:
        decision: Authorize | SafeHalt = Authorize(call.call_id)
        if log is not None:
            log.append("assurance", "SupervisorAuthorize", {"call_id": call.call_id, "risk": risk})
        return decision
    explanation = f"halted {call.tool_name} ({call.call_id}): " + "; ".join(problems)
    escalation = {
        "target": policy.escalation_target,
        "call_id": call.call_id,
        "step_id": call.origin,
        "reason": explanation,
    }
    if log is not None:
        log.append("assurance", "SafeHalt", {"call_id": call.call_id, "explanation": explanation, "risk": risk})
        log.append("assurance", "Escalation", escalation)
    return SafeHalt(explanation, escalation)


class Supervisor:
    """Tracks the degraded mode of an episode; modes only move toward safer ones."""

    def __init__(self, policy: SupervisorPolicy, log=None) -> None:
        self.policy = policy
        self.log = log
        self.mode = NORMAL

    def rank(self, mode: str) -> int:
        if mode == NORMAL:
            return len(self.policy.degraded_modes)
        return self.policy.degraded_modes.index(mode)

    @property
    def permits_actuation(self) -> bool:
        return self.mode == NORMAL

    def degrade(self, mode: str, reason: str) -> bool:
        if self.rank(mode) >= self.rank(self.mode):
            return False
        previous, self.mode = self.mode, mode
        if self.log is not None:
            self.log.append("assurance", "ModeChange", {"from": previous, "to": mode, "reason": reason})
        return True

    def degrade_for(self, failure_class: str) -> str:
        mode = self.policy.degradation.get(failure_class, self.policy.degraded_modes[0])
        self.degrade(mode, failure_class)
        return self.mode

    def operator_override(self, mode: str, operator: str) -> None:
        previous, self.mode = self.mode, mode
        if self.log is not None:
            self.log.append(
                "assurance", "OperatorOverride", {"from": previous, "to": mode, "operator": operator}
            )

    def halt(self, call, explanation: str, *, step_id: str | None = None) -> SafeHalt:
        """Safe-halt outside an action review (failed checks, missing data)."""
        escalation = {
            "target": self.policy.escalation_target,
            "call_id": None if call is None else call.call_id,
            "step_id": step_id if call is None else call.origin,
            "reason": explanation,
        }
        if self.log is not None:
            self.log.append(
                "assurance",
                "SafeHalt",
                {"call_id": escalation["call_id"], "explanation": explanation, "mode": self.mode},
            )
            self.log.append("assurance", "Escalation", escalation)
        return SafeHalt(explanation, escalation)


# ---------------------------------------------------------------- intentions


class MalformedGoal(ValueError):
    pass


def normalize_goal(goal: Mapping[str, Any]) -> dict:
    if not isinstance(goal, Mapping):
        raise MalformedGoal("goal must be a document")
    for key in ("goal_id", "objective", "metric"):
        if not isinstance(goal.get(key), str) or not goal[key].strip():
            raise MalformedGoal(f"goal needs a non-empty {key}")
    constraints = goal.get("constraints", {})
    if not isinstance(constraints, Mapping):
        raise MalformedGoal("constraints must be a document")
    preconditions = goal.get("preconditions", [])
    for p in preconditions:
        predicates.check_descriptor(p)
    return {
        "goal_id": goal["goal_id"],
        "objective": goal["objective"].strip(),
        "metric": goal["metric"].strip(),
        "constraints": dict(constraints),
        "preconditions": [dict(p) for p in preconditions],
    }


@dataclass(frozen=True)
class Intention:
    intention_id: str
    goal: Mapping[str, Any]
    preconditions: tuple[Mapping[str, Any], ...] = ()
    status: str = "active"
    verdict_ref: str = ""


@dataclass(frozen=True)
class Rejection:
    goal_id: str
    verdict: Verdict


def adoption_filter(goal: Mapping[str, Any], checks: Sequence[Verifier], *, log=None) -> Intention | Rejection:
    norm = normalize_goal(goal)
    verdict = verify(norm, checks, subject_ref=norm["goal_id"], kind="feasibility", log=log)
    if not verdict.passed:
        if log is not None:
            log.append("assurance", "GoalRejected", {"goal_id": norm["goal_id"], "verdict_ref": verdict.verdict_id})
        return Rejection(norm["goal_id"], verdict)
    intention = Intention(
        intention_id="int-" + hash_doc(norm)[:12],
        goal=norm,
        preconditions=tuple(norm["preconditions"]),
        verdict_ref=verdict.verdict_id,
    )
    if log is not None:
        log.append(
            "assurance",
            "IntentionAdopted",
            {"intention_id": intention.intention_id, "goal_id": norm["goal_id"], "verdict_ref": verdict.verdict_id},
        )
    return intention


@dataclass(frozen=True)
class Hold:
    pass


@dataclass(frozen=True)
class ReconsiderTrigger:
    kind: str
    detail: str = ""


def execution_monitor(
    intention: Intention, observations: Mapping[str, Any], policy: SupervisorPolicy, *, log=None
) -> Hold | ReconsiderTrigger:
    trigger: Hold | ReconsiderTrigger = Hold()
    for pre in intention.preconditions:
        if not predicates.evaluate(pre, observations):
            trigger = ReconsiderTrigger("precondition_violated", predicates.describe(pre))
            break
    else:
        if observations.get("new_evidence"):
            trigger = ReconsiderTrigger("new_evidence", str(observations["new_evidence"]))
        else:
            for trig in policy.reconsideration_triggers:
                if predicates.evaluate(trig["when"], observations):
                    trigger = ReconsiderTrigger(trig["kind"], predicates.describe(trig["when"]))
                    break
    if log is not None and isinstance(trigger, ReconsiderTrigger):
        log.append(
            "assurance",
            "ReconsiderTrigger",
            {"intention_id": intention.intention_id, "kind": trigger.kind, "detail": trigger.detail},
        )
    return trigger


@dataclass(frozen=True)
class Reconsideration:
    action: str
    intention: Intention
    compensate: bool


def reconsider(intention: Intention, trigger: ReconsiderTrigger, policy: SupervisorPolicy, *, log=None) -> Reconsideration:
    action = policy.reconsideration_actions.get(trigger.kind, KEEP)
    status = {KEEP: intention.status, SUSPEND: "suspended", DROP: "dropped"}[action]
    out = Reconsideration(action, replace(intention, status=status), compensate=action == DROP)
    if log is not None:
        log.append(
            "assurance",
            "Reconsidered",
            {"intention_id": intention.intention_id, "trigger": trigger.kind, "action": action, "status": status},
        )
    return out
