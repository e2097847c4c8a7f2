"""Stepwise plan execution through the assurance gates and the gateway.

For every step: guard, preconditions, budget, binding, (for actuating
scopes) simulation, validation, authorization, supervisor review, saga
intent, execution, result and postcondition checks. Any failure takes the
safe-halt path: degrade, compensate what was done, then halt and escalate.
Compensation runs before the SafeHalt event so that no actuation ever
follows a halt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .. import predicates
from ..assurance import (
    GOAL_SATISFIED,
    SAFETY_HALT,
    Authorize,
    Budget,
    BudgetLedger,
    Supervisor,
    SupervisorPolicy,
    Verdict,
    Verifier,
    WhyStopped,
    check_budget,
    supervise_action,
    verify,
)
from ..canonical import hash_doc
from ..contracts import (
    AuthorizationDenied,
    CapabilityToken,
    Permit,
    ToolCall,
    ToolRegistry,
    ValidationFailed,
    authorize,
    is_actuating,
    validate_call,
)
from ..gateway import DONE, FAILED, TIMED_OUT, CompensationFailed, Gateway, GatewayOutcome, SagaLog
from ..planner import MissingOutput, PathNotFound, Plan, PlanStep, RepairHint, bind_step, bind_template

# simulate(step, call, outputs) -> (verdict or None, predicted risk)
SimulateHook = Callable[[PlanStep, ToolCall, Mapping[str, Any]], "tuple[Verdict | None, float]"]


@dataclass
class RunOutcome:
    why: WhyStopped
    outputs: dict[str, Any]
    actions: list[str] = field(default_factory=list)
    failure_class: str | None = None
    explanation: str = ""
    saga: SagaLog | None = None


class Halted(Exception):
    def __init__(self, failure_class: str, explanation: str, call: ToolCall | None = None, step_id: str | None = None) -> None:
        self.failure_class = failure_class
        self.explanation = explanation
        self.call = call
        self.step_id = step_id
        super().__init__(explanation)


class PlanRunner:
    def __init__(
        self,
        *,
        registry: ToolRegistry,
        gateway: Gateway,
        log,
        token: CapabilityToken,
        policy: SupervisorPolicy,
        budget: Budget,
        verdicts: dict[str, Verdict],
        episode_id: str,
        seed: int = 0,
        issuer: str = "kernel",
        simulate: SimulateHook | None = None,
        simulate_compensation: Callable[[ToolCall, SagaLog], Verdict | None] | None = None,
        check_result: Callable[[PlanStep, ToolCall, Mapping[str, Any]], str | None] | None = None,
        mutate_call: Callable[[ToolCall], ToolCall] | None = None,
        on_step_done: Callable[[PlanStep, ToolCall, GatewayOutcome], None] | None = None,
        monitor: Callable[[Mapping[str, Any]], str | None] | None = None,
    ) -> None:
        self.registry = registry
        self.gateway = gateway
        self.log = log
        self.token = token
        self.policy = policy
        self.budget = budget
        self.verdicts = verdicts
        self.episode_id = episode_id
        self.seed = seed
        self.issuer = issuer
        self.simulate = simulate
        self.simulate_compensation = simulate_compensation or self._default_compensation_verdict
        self.check_result = check_result
        self.mutate_call = mutate_call
        self.on_step_done = on_step_done
        self.monitor = monitor
        self.supervisor = Supervisor(policy, log)
        self.ledger = BudgetLedger()
        self.outputs: dict[str, Any] = {}
        self.saga = SagaLog(f"{episode_id}/saga", log=log)
        self.actions: list[str] = []

    def record_verdict(self, verdict: Verdict | None) -> Verdict | None:
        if verdict is not None:
            self.verdicts[verdict.verdict_id] = verdict
        return verdict

    def _call_fields(self, step_id: str, suffix: str = "") -> dict:
        return {
            "call_id": f"{self.episode_id}/{step_id}{suffix}",
            "idempotency_key": hash_doc([self.episode_id, step_id, suffix])[:24],
            "issuer": self.issuer,
            "origin": step_id,
        }

    def _permit(self, call: ToolCall) -> Permit:
        validated = validate_call(self.registry, call, log=self.log)
        spec = self.registry.get(call.tool_name, call.tool_version or None)
        permit = authorize(validated, spec, self.token, self.log.clock.now, log=self.log)
        self.token = permit.token
        return permit

    def _default_compensation_verdict(self, call: ToolCall, saga: SagaLog) -> Verdict:
        def undoes_done_step(c: ToolCall):
            try:
                entry = saga.entry(c.origin)
            except KeyError:
                return False, ["no_saga_entry"]
            return entry.status == DONE, [] if entry.status == DONE else ["step_not_done"]

        return verify(
            call,
            [Verifier("compensation-inverse", "1", undoes_done_step)],
            subject_ref=call.origin,
            kind="simulation",
            log=self.log,
        )

    def _authorize_compensation(self, call: ToolCall) -> Permit:
        verdict = self.record_verdict(self.simulate_compensation(call, self.saga))
        if verdict is not None:
            call = call.with_(sim_verdict_ref=verdict.verdict_id)
        return self._permit(call)

    def run(self, plan: Plan) -> RunOutcome:
        try:
            for step in plan.steps:
                self._run_step(step)
        except Halted as h:
            return self._safe_halt(h)
        except _BudgetHalt as b:
            return RunOutcome(b.why, self.outputs, list(self.actions), saga=self.saga)
        return RunOutcome(WhyStopped(GOAL_SATISFIED, f"plan {plan.plan_id} complete"), self.outputs, list(self.actions), saga=self.saga)

    def _run_step(self, step: PlanStep) -> None:
        log = self.log
        if step.guard is not None and not predicates.evaluate(step.guard, self.outputs):
            log.append("planner", "StepSkipped", {"step_id": step.step_id, "guard": predicates.describe(step.guard)})
            return
        failed_pre = [p for p in step.preconditions if not predicates.evaluate(p, self.outputs)]
        if failed_pre:
            raise Halted("precondition_violated", "precondition failed: " + predicates.describe(failed_pre[0]), step_id=step.step_id)

        spec = self.registry.get(step.call_template.tool_name, step.call_template.tool_version or None)
        tool = step.call_template.tool_name
        increment = BudgetLedger(
            steps=1,
            cost_units=step.cost_estimate,
            wall_ticks=max(0, log.clock.now - self.ledger.wall_ticks),
            per_tool={tool: 1},
        )
        decision = check_budget(self.ledger, self.budget, increment, log=log)
        if not decision.proceed:
            raise _BudgetHalt(decision.why)
        self.ledger = decision.ledger

        try:
            call = bind_step(step, self.outputs, **self._call_fields(step.step_id))
        except (MissingOutput, PathNotFound) as exc:
            raise Halted("missing_data", f"cannot bind {step.step_id}: {exc}", step_id=step.step_id) from None
        if self.mutate_call is not None:
            call = self.mutate_call(call)

        actuating = spec is not None and is_actuating(spec.scope)
        verdict, risk = None, 1.0
        if actuating:
            if not self.supervisor.permits_actuation:
                raise Halted("degraded", f"mode {self.supervisor.mode} forbids actuation", call)
            if self.simulate is not None:
                verdict, risk = self.simulate(step, call, self.outputs)
                self.record_verdict(verdict)
            if verdict is not None:
                call = call.with_(sim_verdict_ref=verdict.verdict_id)

        try:
            permit = self._permit(call)
        except ValidationFailed as exc:
            raise Halted("schema_mismatch", _errors_text("invalid call", exc.errors), call) from None
        except AuthorizationDenied as exc:
            raise Halted("unauthorized", _errors_text("refused", exc.errors), call) from None

        if actuating:
            review = supervise_action(call, risk, verdict, self.policy)
            if not isinstance(review, Authorize):
                cls = "risk" if risk > self.policy.risk_threshold else "verifier_rejection"
                raise Halted(cls, review.explanation, call)
            log.append("assurance", "SupervisorAuthorize", {"call_id": call.call_id, "risk": risk, "verdict_ref": verdict.verdict_id})
            self.saga.intend(step.step_id, call)

        outcome = self.gateway.execute(permit, self.seed)
        if not outcome.ok:
            if actuating:
                self.saga.mark(step.step_id, FAILED)
            raise Halted(_classify(outcome, spec), f"{tool} {outcome.status}: {outcome.error_code}", call)

        self.outputs[step.step_id] = dict(outcome.result)
        if actuating:
            entry = self.saga.entry(step.step_id)
            if step.compensation_template is not None:
                try:
                    entry.compensation = bind_template(
                        step.compensation_template, self.outputs, **self._call_fields(step.step_id, "/undo")
                    )
                except (MissingOutput, PathNotFound):
                    entry.compensation = None
            self.saga.mark(step.step_id, DONE)
            self.actions.append(call.call_id)

        problem = self.check_result(step, call, outcome.result) if self.check_result else None
        if problem is not None:
            del self.outputs[step.step_id]
            raise Halted(problem, f"{tool} result failed checks ({problem})", call)
        failed_post = [p for p in step.postconditions if not predicates.evaluate(p, self.outputs)]
        if failed_post:
            raise Halted("postcondition_failed", "postcondition failed: " + predicates.describe(failed_post[0]), call)
        if self.on_step_done is not None:
            self.on_step_done(step, call, outcome)
        if self.monitor is not None:
            trigger = self.monitor(self.outputs)
            if trigger is not None:
                raise Halted(trigger, f"reconsideration after {step.step_id}: {trigger}", call)

    def halt(self, failure_class: str, explanation: str, *, step_id: str | None = None) -> RunOutcome:
        """Take the safe-halt path from outside a plan (e.g. failed evidence checks)."""
        return self._safe_halt(Halted(failure_class, explanation, step_id=step_id))

    def _safe_halt(self, h: Halted) -> RunOutcome:
        explanation = h.explanation
        if any(e.status == DONE for e in self.saga.entries):
            try:
                self.saga = self.gateway.compensate(self.saga, self.seed, self._authorize_compensation)
            except CompensationFailed as exc:
                self.saga = exc.saga
                explanation += f"; compensation failed at {exc.step_id}: {exc.reason}"
        self.supervisor.degrade_for(h.failure_class)
        RepairHint(h.call.call_id if h.call else (h.step_id or self.episode_id), explanation).emit(self.log)
        self.supervisor.halt(h.call, explanation, step_id=h.step_id)
        self.gateway.lock_actuation(explanation)
        return RunOutcome(
            WhyStopped(SAFETY_HALT, h.failure_class),
            self.outputs,
            list(self.actions),
            failure_class=h.failure_class,
            explanation=explanation,
            saga=self.saga,
        )


class _BudgetHalt(Exception):
    def __init__(self, why: WhyStopped) -> None:
        self.why = why
        super().__init__(why.detail)


def _errors_text(prefix: str, errors) -> str:
    return prefix + ": " + ", ".join(f"{e.code} at {e.path or '<args>'}" for e in errors)


def _classify(outcome: GatewayOutcome, spec) -> str:
    if outcome.status == TIMED_OUT:
        return "timeout"
    if spec is not None and outcome.error_code in spec.transient_error_codes:
        return "transient_exhausted"
    return "tool_error"
