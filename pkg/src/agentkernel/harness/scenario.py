"""Over-temperature diagnosis episode: config, scripted plan, kernel loop, replay.

One episode runs goal adoption, memory seeding, a firmware context call,
governed retrieval with an evidence-consistency check, plan validation,
stepwise execution through the runner, episodic memory writes and
compaction. Everything is logged to one audit chain, and the trace header
carries the fully resolved config so that :func:`replay_trace` can rebuild
the episode with nothing but the trace file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .. import COMPONENT_VERSIONS
from ..assurance import (
    BUDGET_EXCEEDED,
    BUDGET_EXHAUSTED,
    CONSENSUS_REACHED,
    CONTRADICTION,
    CONVERGENCE,
    DEADLOCK,
    GOAL_SATISFIED,
    KEEP,
    NON_CONVERGENCE,
    OPERATOR_ABORT,
    SAFETY_HALT,
    VERIFIER_REJECTION,
    Budget,
    Intention,
    ReconsiderTrigger,
    Rejection,
    SupervisorPolicy,
    Verifier,
    WhyStopped,
    adoption_filter,
    execution_monitor,
    reconsider,
    verify,
)
from ..audit import AuditLog, EpisodeTrace, Playback, ReplayReport, replay
from ..canonical import DEFAULT_HASH, hash_doc
from ..contracts import CapabilityToken, ToolCall, ToolRegistry, ValidationFailed, AuthorizationDenied, check_args
from ..gateway import AdapterResult, Gateway
from ..memory import (
    EPISODIC,
    GOLD,
    SILVER,
    MemoryRecord,
    MemoryStore,
    RetrievalPolicy,
    WorkingSet,
    WriterCapability,
    compact,
    page_in,
    retrieve,
)
from ..planner import CallTemplate, Plan, PlanStep, RepairHint, validate_plan
from .mocks import RESULT_SCHEMAS, MockToolSet
from .runner import PlanRunner

MODES = ("schema_mismatch", "transient_flake", "missing_data", "permanent_failure")
TOOL_VERSION = "1.0.0"

# Exit status per WhyStopped family; 64 is reserved for usage and config errors.
EXIT_CODES = {
    GOAL_SATISFIED: 0,
    CONSENSUS_REACHED: 0,
    CONVERGENCE: 0,
    BUDGET_EXCEEDED: 10,
    BUDGET_EXHAUSTED: 10,
    SAFETY_HALT: 20,
    OPERATOR_ABORT: 20,
    VERIFIER_REJECTION: 30,
    CONTRADICTION: 30,
    NON_CONVERGENCE: 40,
    DEADLOCK: 40,
}
EXIT_USAGE = 64

GATEWAY_CONSTANTS = {"failure_threshold": 3, "cooldown": 5, "working_set_capacity": 2}


class ConfigError(ValueError):
    pass


class FixtureMissing(ConfigError):
    pass


class UnknownTool(ConfigError):
    pass


def data_path(*parts: str) -> Path:
    return Path(__file__).parent.joinpath("data", *parts)


def scenario_path(name: str) -> Path:
    """Path of a packaged scenario, e.g. ``scenario_path("high_risk")``."""
    return data_path("scenarios", name if name.endswith(".json") else name + ".json")


@dataclass(frozen=True)
class FaultInjection:
    """Fault on ``tool`` starting at its ``at_call_index``-th call (1-based).

    ``schema_mismatch`` counts submitted calls and corrupts the arguments
    before validation. The adapter-side modes count adapter invocations:
    ``transient_flake`` fails ``count`` consecutive invocations with a
    transient code, ``missing_data`` strips the result fields once and
    ``permanent_failure`` fails every invocation from the index on.
    """

    tool: str
    mode: str
    at_call_index: int = 1
    count: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown fault mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.at_call_index < 1 or self.count < 1:
            raise ConfigError("at_call_index and count are 1-based")

    def to_doc(self) -> dict:
        return {"tool": self.tool, "mode": self.mode, "at_call_index": self.at_call_index, "count": self.count}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "FaultInjection":
        try:
            return cls(doc["tool"], doc["mode"], int(doc.get("at_call_index", 1)), int(doc.get("count", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed fault injection {doc!r}: {exc}") from None

    @classmethod
    def parse(cls, spec: str) -> "FaultInjection":
        """``tool:mode[:index[:count]]``"""
        parts = spec.split(":")
        if len(parts) < 2 or len(parts) > 4:
            raise ConfigError(f"fault spec {spec!r} is not tool:mode[:index[:count]]")
        try:
            nums = [int(p) for p in parts[2:]]
        except ValueError:
            raise ConfigError(f"fault spec {spec!r} has a non-integer index") from None
        return cls(parts[0], parts[1], *nums)


def _resolve_fixture(value: Any, base: Path | None) -> Any:
    """A fixture is inline, a relative path, or ``{"file": path, "override": {...}}``."""
    if isinstance(value, str):
        value = {"file": value}
    if isinstance(value, Mapping) and "file" in value:
        if base is None:
            raise ConfigError(f"fixture path {value['file']!r} needs a scenario directory")
        path = base / value["file"]
        if not path.is_file():
            raise FixtureMissing(str(path))
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"fixture {path} is not valid JSON: {exc}") from None
        if isinstance(doc, dict):
            doc.update(value.get("override", {}))
        return doc
    return value


@dataclass(frozen=True)
class ScenarioConfig:
    episode_id: str
    seed: int
    asset_id: str
    goal: Mapping[str, Any]
    budget: Budget
    policy: SupervisorPolicy
    tokens: Mapping[str, CapabilityToken]
    retrieval: Mapping[str, Any]
    fixtures: Mapping[str, Any]
    registry: Mapping[str, Any]
    injections: tuple[FaultInjection, ...] = ()
    interactive: bool = False
    retry_max: int = 3

    def __post_init__(self) -> None:
        names = {t["name"] for t in self.registry.get("tools", ())}
        for fault in self.injections:
            if fault.tool not in names:
                raise UnknownTool(fault.tool)
        for key in ("thermal", "firmware", "risk_table"):
            if key not in self.fixtures:
                raise ConfigError(f"missing fixture {key!r}")
        if "agent" not in self.tokens:
            raise ConfigError("config needs an 'agent' token grant")

    def to_doc(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "seed": self.seed,
            "asset_id": self.asset_id,
            "goal": dict(self.goal),
            "budget": self.budget.to_doc(),
            "policy": self.policy.to_doc(),
            "tokens": {k: t.to_doc() for k, t in self.tokens.items()},
            "retrieval": dict(self.retrieval),
            "fixtures": dict(self.fixtures),
            "registry": dict(self.registry),
            "injections": [f.to_doc() for f in self.injections],
            "interactive": self.interactive,
            "retry_max": self.retry_max,
        }

    def config_hash(self) -> str:
        # interactivity only changes where approvals come from, and replays take them from the trace
        doc = self.to_doc()
        del doc["interactive"]
        return hash_doc(doc)

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any], base: str | Path | None = None) -> "ScenarioConfig":
        base_dir = None if base is None else Path(base)
        try:
            fixtures = {k: _resolve_fixture(v, base_dir) for k, v in doc["fixtures"].items()}
            registry = doc.get("registry", {"file": str(data_path("tools.json"))})
            if isinstance(registry, str) and base_dir is not None:
                registry = {"file": registry}
            if isinstance(registry, Mapping) and "file" in registry:
                registry = _resolve_fixture(registry, base_dir or Path("."))
            return cls(
                episode_id=str(doc["episode_id"]),
                seed=int(doc["seed"]),
                asset_id=str(doc["asset_id"]),
                goal=dict(doc["goal"]),
                budget=Budget.from_doc(doc["budget"]),
                policy=SupervisorPolicy.from_doc(doc["policy"]),
                tokens={k: CapabilityToken.from_doc(t) for k, t in doc["tokens"].items()},
                retrieval=dict(doc.get("retrieval", {"policy_id": "retr-lexical-v1"})),
                fixtures=fixtures,
                registry=registry,
                injections=tuple(FaultInjection.from_doc(f) for f in doc.get("injections", ())),
                interactive=bool(doc.get("interactive", False)),
                retry_max=int(doc.get("retry_max", 3)),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed scenario config: {type(exc).__name__}: {exc}") from None

    @classmethod
    def load(cls, path: str | Path, *, seed: int | None = None, interactive: bool | None = None) -> "ScenarioConfig":
        path = Path(path)
        if not path.is_file():
            raise FixtureMissing(str(path))
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        config = cls.from_doc(doc, path.parent)
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if interactive is not None:
            changes["interactive"] = interactive
        return replace(config, **changes) if changes else config


def inject(config: ScenarioConfig, fault: FaultInjection | Mapping[str, Any] | str) -> ScenarioConfig:
    """Return ``config`` with ``fault`` appended."""
    if isinstance(fault, str):
        fault = FaultInjection.parse(fault)
    elif not isinstance(fault, FaultInjection):
        fault = FaultInjection.from_doc(fault)
    return replace(config, injections=config.injections + (fault,))


class ScriptedDiagnosisPlanner:
    """Fixed diagnosis plan; E3 and E4 only run when the twin predicts risk above threshold."""

    def __init__(self, config: ScenarioConfig) -> None:
        self.config = config

    def context_plan(self) -> Plan:
        step = PlanStep(
            "C1",
            "read firmware status for retrieval validity",
            CallTemplate("firmware_status", TOOL_VERSION, {"asset_id": self.config.asset_id}),
            postconditions=({"path": "C1.firmware_version", "op": "exists"},),
            cost_estimate=1,
        )
        return Plan(f"{self.config.episode_id}/context", (step,), self.config.goal["goal_id"])

    def plan(self) -> Plan:
        asset = self.config.asset_id
        above = {"path": "E2.risk", "op": ">", "value": self.config.policy.risk_threshold}
        steps = (
            PlanStep(
                "E1",
                "fine-grained thermal telemetry",
                CallTemplate("telemetry_query", TOOL_VERSION, {"asset_id": asset, "window": 8, "resolution": "fine"}),
                postconditions=({"path": "E1.features", "op": "exists"},),
                cost_estimate=1,
            ),
            PlanStep(
                "E2",
                "digital-twin risk at current load",
                CallTemplate(
                    "twin_simulate",
                    TOOL_VERSION,
                    {"asset_id": asset, "features": {"$placeholder": "#E1.features"}, "derate_fraction": 0},
                ),
                postconditions=({"path": "E2.risk", "op": "exists"},),
                cost_estimate=2,
            ),
            PlanStep(
                "E3",
                "derate to the twin's recommended fraction",
                CallTemplate(
                    "derate_command",
                    TOOL_VERSION,
                    {
                        "asset_id": asset,
                        "fraction": {"$placeholder": "#E2.recommended_derate"},
                        "reason": "predicted thermal risk above threshold",
                    },
                ),
                compensation_template=CallTemplate(
                    "restore_command", TOOL_VERSION, {"asset_id": asset, "fraction": {"$placeholder": "#E3.previous_fraction"}}
                ),
                cost_estimate=5,
                guard=above,
            ),
            PlanStep(
                "E4",
                "raise a priority service ticket",
                CallTemplate(
                    "schedule_service",
                    TOOL_VERSION,
                    {"asset_id": asset, "priority": "high", "summary": "thermal excursion; unit derated pending inspection"},
                ),
                compensation_template=CallTemplate(
                    "cancel_service", TOOL_VERSION, {"ticket_id": {"$placeholder": "#E4.ticket_id"}}
                ),
                cost_estimate=3,
                guard=above,
            ),
        )
        return Plan(f"{self.config.episode_id}/diagnosis", steps, self.config.goal["goal_id"])


# ---------------------------------------------------------------- fault wrappers


def corrupt_args(args: Mapping[str, Any]) -> dict:
    """Schema-mismatch fault: an undeclared field plus a wrongly typed asset id."""
    out = dict(args)
    out["unexpected_field"] = "injected"
    if "asset_id" in out:
        out["asset_id"] = 104
    return out


class FaultyAdapter:
    """Adapter wrapper applying the adapter-side faults for one tool."""

    def __init__(self, tool: str, inner: Callable, faults: Sequence[FaultInjection]) -> None:
        self.tool = tool
        self.inner = inner
        self.faults = [f for f in faults if f.tool == tool and f.mode != "schema_mismatch"]
        self.invocations = 0

    def __call__(self, args, budget, seed) -> AdapterResult:
        self.invocations += 1
        n = self.invocations
        for f in self.faults:
            if f.mode == "permanent_failure" and n >= f.at_call_index:
                return AdapterResult(None, "hardware_fault", 1)
            if f.mode == "transient_flake" and f.at_call_index <= n < f.at_call_index + f.count:
                return AdapterResult(None, "unavailable", 1)
        res = self.inner(args, budget, seed)
        if any(f.mode == "missing_data" and n == f.at_call_index for f in self.faults) and res.result is not None:
            declared = {s.name for s in RESULT_SCHEMAS.get(self.tool, ())}
            res = AdapterResult({k: v for k, v in res.result.items() if k not in declared}, res.error_code, res.ticks)
        return res


def playback_adapter(tool: str, playback: Playback) -> Callable:
    def adapter(args, budget, seed) -> AdapterResult:
        rec = playback.next_invocation(tool)
        if rec is None:
            return AdapterResult(None, "playback_exhausted", 1)
        return AdapterResult(rec.get("result"), rec.get("adapter_error"), rec.get("ticks", 1))

    return adapter


def result_problem(tool: str, result: Mapping[str, Any] | None) -> str | None:
    """Failure class for a malformed adapter result, or None when it is usable."""
    errs = [e for e in check_args(RESULT_SCHEMAS.get(tool, ()), result or {}) if e.code != "UnknownField"]
    if not errs:
        return None
    return "missing_data" if any(e.code == "MissingField" for e in errs) else "schema_mismatch"


# ---------------------------------------------------------------- episode


@dataclass
class Episode:
    trace: EpisodeTrace
    summary: dict
    exit_code: int
    log: AuditLog
    store: MemoryStore = field(repr=False, default=None)  # type: ignore[assignment]


def trace_header(config: ScenarioConfig, registry: ToolRegistry) -> dict:
    return {
        "episode_id": config.episode_id,
        "seed": config.seed,
        "config": config.to_doc(),
        "config_hash": config.config_hash(),
        "registry_hash": registry.registry_hash(),
        "policy_hash": hash_doc(config.policy.to_doc()),
        "component_versions": dict(COMPONENT_VERSIONS),
        "hash": DEFAULT_HASH,
        "constants": {**GATEWAY_CONSTANTS, "retry_max": config.retry_max},
    }


def _console_approver(call: ToolCall) -> str | None:
    answer = input(f"approve irreversible {call.tool_name} ({call.call_id})? [y/N] ").strip().lower()
    return f"console:{call.call_id}" if answer in ("y", "yes") else None


def _conflict_check(items: Sequence[MemoryRecord]):
    claims: dict[str, dict[Any, list[str]]] = {}
    for rec in items:
        claim = rec.content.get("claim") if isinstance(rec.content, Mapping) else None
        if isinstance(claim, Mapping) and "key" in claim:
            claims.setdefault(str(claim["key"]), {}).setdefault(json.dumps(claim.get("value"), sort_keys=True), []).append(rec.id)
    reasons, evidence = [], []
    for key in sorted(claims):
        if len(claims[key]) > 1:
            reasons.append(f"conflicting_claim:{key}")
            evidence.extend(sorted(i for ids in claims[key].values() for i in ids))
    return not reasons, reasons, evidence


def run_episode(
    config: ScenarioConfig,
    *,
    playback: Playback | None = None,
    approver: Callable[[ToolCall], str | None] | None = None,
) -> Episode:
    """Run one diagnosis episode and return its trace, summary and exit code."""
    log = AuditLog()
    registry = ToolRegistry.from_doc(config.registry)
    header = trace_header(config, registry)
    verdicts: dict = {}

    if playback is not None:
        def approve(call: ToolCall) -> str | None:
            rec = playback.next_approval()
            return None if rec is None else rec.get("approval_token")
    elif approver is not None:
        approve = approver
    else:
        approve = _console_approver if config.interactive else (lambda call: None)

    gateway = Gateway(
        registry,
        log,
        retry_max=config.retry_max,
        failure_threshold=GATEWAY_CONSTANTS["failure_threshold"],
        cooldown=GATEWAY_CONSTANTS["cooldown"],
        verdict_lookup=verdicts.get,
        approver=approve,
    )
    live = MockToolSet(config.fixtures).adapters()
    for spec in registry.specs():
        if playback is not None:
            adapter = playback_adapter(spec.name, playback)
        elif spec.name in live:
            adapter = FaultyAdapter(spec.name, live[spec.name], config.injections)
        else:
            continue
        gateway.register_adapter(spec.name, spec.version, adapter)

    submitted: dict[str, int] = {}

    def mutate(call: ToolCall) -> ToolCall:
        n = submitted[call.tool_name] = submitted.get(call.tool_name, 0) + 1
        for f in config.injections:
            if f.mode == "schema_mismatch" and f.tool == call.tool_name and f.at_call_index <= n < f.at_call_index + f.count:
                log.append("harness", "FaultInjected", {"call_id": call.call_id, **f.to_doc()})
                return call.with_(args=corrupt_args(call.args))
        return call

    store = MemoryStore(log=log)
    threshold = config.policy.risk_threshold
    planner = ScriptedDiagnosisPlanner(config)
    plan = planner.plan()
    episode_records: list[str] = []
    intention: Intention | None = None

    def simulate(step: PlanStep, call: ToolCall, outputs: Mapping[str, Any]):
        derate = call.args.get("fraction") if call.tool_name == "derate_command" else outputs.get("E3", {}).get("fraction", 0)
        features = outputs.get("E1", {}).get("features", {})
        sim = ToolCall(
            tool_name="twin_simulate",
            tool_version=TOOL_VERSION,
            args={"asset_id": config.asset_id, "features": features, "derate_fraction": derate},
            **runner._call_fields(step.step_id, "/sim"),
        )
        sim = mutate(sim)
        try:
            outcome = gateway.execute(runner._permit(sim), config.seed)
            problem = None if outcome.ok else "simulation_failed"
            if problem is None:
                problem = result_problem("twin_simulate", outcome.result) and "simulation_result_invalid"
        except (ValidationFailed, AuthorizationDenied):
            outcome, problem = None, "simulation_refused"
        risk = 1.0 if problem else float(outcome.result["risk"])

        def contained(_):
            if problem:
                return False, [problem], [sim.call_id]
            if risk > threshold:
                return False, ["predicted_risk_above_threshold"], [sim.call_id]
            return True, [], [sim.call_id]

        verdict = verify(
            {"call_id": call.call_id, "risk": risk},
            [Verifier("twin-post-action", "1", contained)],
            subject_ref=step.step_id,
            kind="simulation",
            log=log,
        )
        return verdict, risk

    def check_result(step: PlanStep, call: ToolCall, result: Mapping[str, Any]) -> str | None:
        problem = result_problem(call.tool_name, result)
        if problem is not None:
            log.append("harness", "ResultRejected", {"call_id": call.call_id, "failure_class": problem})
        return problem

    kernel = WriterCapability("kernel", curated=True)

    def on_step_done(step: PlanStep, call: ToolCall, outcome) -> None:
        rec = MemoryRecord(
            id=f"{config.episode_id}/{step.step_id}",
            content={
                "task": config.goal["goal_id"],
                "action": {"tool": call.tool_name, "args": dict(call.args)},
                "outcome": dict(outcome.result),
            },
            source_uri=f"trace://{config.episode_id}/{call.call_id}",
            created_at=log.clock.now,
            tier=SILVER,
            kind=EPISODIC,
        )
        store.write(rec, "episode-v1", kernel)
        episode_records.append(rec.id)

    def monitor(outputs: Mapping[str, Any]) -> str | None:
        if intention is None:
            return None
        trigger = execution_monitor(intention, outputs, config.policy, log=log)
        if not isinstance(trigger, ReconsiderTrigger):
            return None
        decision = reconsider(intention, trigger, config.policy, log=log)
        return None if decision.action == KEEP else f"reconsider_{decision.action.lower()}:{trigger.kind}"

    runner = PlanRunner(
        registry=registry,
        gateway=gateway,
        log=log,
        token=config.tokens["agent"],
        policy=config.policy,
        budget=config.budget,
        verdicts=verdicts,
        episode_id=config.episode_id,
        seed=config.seed,
        issuer=config.tokens["agent"].subject,
        simulate=simulate,
        check_result=check_result,
        mutate_call=mutate,
        on_step_done=on_step_done,
        monitor=monitor,
    )

    log.append("harness", "EpisodeStart", {"episode_id": config.episode_id, "config_hash": header["config_hash"]})

    def finish(why: WhyStopped, outcome=None) -> Episode:
        _compact_episode(config, store, episode_records, kernel, log)
        log.append("harness", "WhyStopped", why.to_doc())
        escalations = len(log.of_kind("Escalation"))
        summary = {
            "episode_id": config.episode_id,
            "why_stopped": why.code,
            "detail": why.detail,
            "actions_taken": [] if outcome is None else list(outcome.actions),
            "escalations": escalations,
            "failure_class": None if outcome is None else outcome.failure_class,
            "explanation": "" if outcome is None else outcome.explanation,
            "mode": runner.supervisor.mode,
            "exit_code": EXIT_CODES.get(why.code, 1),
        }
        log.append("harness", "EpisodeEnd", summary)
        return Episode(EpisodeTrace(header, list(log.events)), summary, summary["exit_code"], log, store)

    # goal adoption
    feasibility = [
        Verifier(
            "tools-registered",
            "1",
            lambda g: (
                all(registry.get(s.call_template.tool_name) for s in plan.steps),
                [] if all(registry.get(s.call_template.tool_name) for s in plan.steps) else ["tool_unavailable"],
            ),
        ),
        Verifier(
            "budget-covers-plan",
            "1",
            lambda g: (
                config.budget.max_cost_units is None or plan.total_cost_estimate <= config.budget.max_cost_units,
                ["plan_cost_exceeds_budget"],
            ),
        ),
    ]
    adopted = adoption_filter(config.goal, feasibility, log=log)
    if isinstance(adopted, Rejection):
        return finish(WhyStopped(VERIFIER_REJECTION, f"goal {adopted.goal_id} rejected"))
    intention = adopted

    _seed_memory(config, store, log)

    # plan validation covers both the context step and the diagnosis plan
    errors = []
    for p in (planner.context_plan(), plan):
        errors.extend(validate_plan(p, registry, config.tokens["agent"], config.budget, now=log.clock.now, log=log))
    if errors:
        RepairHint(plan.plan_id, "; ".join(f"{e.code}@{e.step_id}" for e in errors)).emit(log)
        return finish(WhyStopped(VERIFIER_REJECTION, f"plan rejected: {errors[0].code}"))

    outcome = runner.run(planner.context_plan())
    if outcome.why.code != GOAL_SATISFIED:
        return finish(outcome.why, outcome)

    # governed retrieval under the observed firmware context
    policy = RetrievalPolicy.from_doc(
        {**config.retrieval, "context": {"firmware_version": runner.outputs["C1"]["firmware_version"]}}
    )
    query = f"{config.asset_id} thermal limit derate procedure"
    found = retrieve(query, policy, store, log.clock.now, log=log)
    ws = page_in([r.id for r in found.records], WorkingSet(GATEWAY_CONSTANTS["working_set_capacity"]), store, log.clock.now, log=log)
    consistency = verify(
        found.records,
        [Verifier("evidence-consistency", "1", _conflict_check)],
        subject_ref="retrieval:" + hash_doc([query, ws.ids()])[:16],
        kind="check",
        log=log,
    )
    if not consistency.passed:
        outcome = runner.halt(
            "conflicting_evidence",
            "retrieved evidence disagrees: " + ", ".join(consistency.reason_codes),
        )
        return finish(outcome.why, outcome)

    outcome = runner.run(plan)
    if outcome.why.code == GOAL_SATISFIED and outcome.actions:
        log.append(
            "assurance",
            "Escalation",
            {
                "target": config.policy.escalation_target,
                "call_id": None,
                "step_id": None,
                "reason": "reversible derate applied and priority ticket raised; operator review requested",
                "actions": list(outcome.actions),
            },
        )
    return finish(outcome.why, outcome)


def _seed_memory(config: ScenarioConfig, store: MemoryStore, log: AuditLog) -> None:
    """Load curated knowledge: write, corroborate and promote each seed record to Published."""
    seed = config.fixtures.get("memory_seed")
    if not seed:
        return
    curator = WriterCapability("curator", curated=True)
    for doc in seed.get("records", ()):
        sources = doc.get("sources", ())
        rec = MemoryRecord.from_doc({k: v for k, v in doc.items() if k != "sources"})
        store.write(rec, "seed-v1", curator)
        for src in sources:
            store.corroborate(rec.id, src)
        for _ in range(2):
            current = store.get(rec.id)
            verdict = verify(
                current,
                [
                    Verifier(
                        "seed-provenance",
                        "1",
                        lambda r: (bool(r.source_uri) and r.tier in (GOLD, SILVER), ["uncited_or_untrusted"]),
                    )
                ],
                subject_ref=rec.id,
                kind="provenance",
                log=log,
            )
            store.promote(rec.id, verdict)


def _compact_episode(config: ScenarioConfig, store: MemoryStore, ids: Sequence[str], writer, log: AuditLog) -> None:
    if not ids:
        return
    records = [store.get(i) for i in ids]
    summary = compact(records, policy_id="compaction-v1", log=log)
    store.write(summary, "compaction-v1", writer)

    def faithful(rec: MemoryRecord):
        missing = [p for p in rec.back_pointers if p not in store]
        return not missing, [f"dangling_back_pointer:{p}" for p in missing]

    verdict = verify(store.get(summary.id), [Verifier("summary-back-pointers", "1", faithful)], subject_ref=summary.id, log=log)
    store.promote(summary.id, verdict)


# ---------------------------------------------------------------- replay


def kernel_factory(header: Mapping[str, Any], playback: Playback):
    if header.get("kind") == "dialogue":
        from .dialogue import run_dialogue_doc

        return run_dialogue_doc(header["dialogue"]).trace.events
    config = ScenarioConfig.from_doc(header["config"])
    return run_episode(config, playback=playback).trace.events


def replay_trace(path: str | Path | bytes, config_hash: str | None = None) -> ReplayReport:
    """Replay a trace; with ``config_hash`` given, refuse when it differs from the recorded one."""
    return replay(path, kernel_factory, config_hash=config_hash)


def write_trace(episode: Episode, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return episode.trace.write(out / f"{episode.summary['episode_id'].replace('/', '_')}.trace")
