"""Execution gateway: the only path from a permitted call to a tool adapter.

Order of checks for every call: safe-halt lock and simulation gate (for
actuating scopes), operator approval (irreversible scope), idempotency
cache, rate limit, circuit breaker, then bounded retries against the
adapter. Outcome commitment is serialized through one lock, so callers on
several threads observe a linearizable history.
"""

from __future__ import annotations

import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

from .canonical import hash_doc
from .contracts import (
    Permit,
    Refusal,
    ToolCall,
    ToolRegistry,
    ToolScope,
    ToolSpec,
    is_actuating,
)

OK = "Ok"
TOOL_ERROR = "ToolError"
REFUSED = "Refused"
CONFLICT = "Conflict"
BREAKER_OPEN = "BreakerOpen"
RATE_LIMITED = "RateLimited"
TIMED_OUT = "TimedOut"

CLOSED, OPEN, HALF_OPEN = "Closed", "Open", "HalfOpen"


@dataclass(frozen=True)
class AdapterResult:
    result: Mapping[str, Any] | None = None
    error_code: str | None = None
    ticks: int = 1


# (args, tick budget, seed) -> AdapterResult
Adapter = Callable[[Mapping[str, Any], int, int], AdapterResult]


@dataclass(frozen=True)
class GatewayOutcome:
    call_id: str
    status: str
    result: Mapping[str, Any] | None = None
    error_code: str | None = None
    attempts: int = 0
    ticks_elapsed: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OK

    def to_doc(self) -> dict:
        return {
            "call_id": self.call_id,
            "status": self.status,
            "result": None if self.result is None else dict(self.result),
            "error_code": self.error_code,
            "attempts": self.attempts,
            "ticks_elapsed": self.ticks_elapsed,
        }


@dataclass(frozen=True)
class IdempotencyRecord:
    key: str
    call_fingerprint: str
    outcome: GatewayOutcome
    first_seen: int


@dataclass(frozen=True)
class BreakerState:
    tool_name: str
    state: str = CLOSED
    consecutive_failures: int = 0
    opened_at: int = 0
    failure_threshold: int = 3
    cooldown: int = 5
    probe_in_flight: bool = False


def breaker_admit(state: BreakerState, now: int) -> tuple[bool, BreakerState]:
    if state.state == CLOSED:
        return True, state
    if state.state == OPEN:
        if now - state.opened_at < state.cooldown:
            return False, state
        return True, replace(state, state=HALF_OPEN, probe_in_flight=True)
    if state.probe_in_flight:
        return False, state
    return True, replace(state, probe_in_flight=True)


def breaker_record(state: BreakerState, success: bool, now: int) -> BreakerState:
    if success:
        return replace(state, state=CLOSED, consecutive_failures=0, probe_in_flight=False)
    failures = state.consecutive_failures + 1
    if state.state == HALF_OPEN or failures >= state.failure_threshold:
        return replace(
            state,
            state=OPEN,
            consecutive_failures=max(failures, state.failure_threshold),
            opened_at=now,
            probe_in_flight=False,
        )
    return replace(state, consecutive_failures=failures)


def backoff_ticks(seed: int, call_id: str, attempt: int) -> int:
    """Delay after failed ``attempt`` (1-based): 2**(attempt-1) plus seeded jitter below that."""
    base = 2 ** (attempt - 1)
    jitter = int(hash_doc({"seed": seed, "call_id": call_id, "attempt": attempt})[:16], 16) % base
    return base + jitter


INTENDED, DONE, COMPENSATED, FAILED = "Intended", "Done", "Compensated", "Failed"


@dataclass
class SagaEntry:
    step_id: str
    intent: ToolCall
    compensation: ToolCall | None = None
    status: str = INTENDED

    def to_doc(self) -> dict:
        return {
            "step_id": self.step_id,
            "intent": self.intent.to_doc(),
            "compensation": None if self.compensation is None else self.compensation.to_doc(),
            "status": self.status,
        }


@dataclass
class SagaLog:
    """Write-ahead intent log for a sequence of effectful steps."""

    saga_id: str
    entries: list[SagaEntry] = field(default_factory=list)
    log: Any = field(default=None, repr=False, compare=False)

    def intend(self, step_id: str, intent: ToolCall, compensation: ToolCall | None = None) -> SagaEntry:
        entry = SagaEntry(step_id, intent, compensation)
        self.entries.append(entry)
        self._emit("IntentLogged", entry)
        return entry

    def mark(self, step_id: str, status: str) -> None:
        entry = self.entry(step_id)
        entry.status = status
        self._emit("SagaStatus", entry)

    def entry(self, step_id: str) -> SagaEntry:
        for e in self.entries:
            if e.step_id == step_id:
                return e
        raise KeyError(step_id)

    def copy(self) -> "SagaLog":
        return SagaLog(self.saga_id, [replace(e) for e in self.entries], self.log)

    def statuses(self) -> dict[str, str]:
        return {e.step_id: e.status for e in self.entries}

    def _emit(self, kind: str, entry: SagaEntry) -> None:
        if self.log is not None:
            self.log.append(
                "gateway",
                kind,
                {"saga_id": self.saga_id, "step_id": entry.step_id, "status": entry.status, "call_id": entry.intent.call_id},
            )


class CompensationFailed(Exception):
    def __init__(self, step_id: str, saga: SagaLog, reason: str = "") -> None:
        self.step_id = step_id
        self.saga = saga
        self.reason = reason
        super().__init__(f"compensation for {step_id} failed: {reason}")


class Gateway:
    def __init__(
        self,
        registry: ToolRegistry,
        log,
        *,
        retry_max: int = 3,
        failure_threshold: int = 3,
        cooldown: int = 5,
        verdict_lookup: Callable[[str], Any] | None = None,
        approver: Callable[[ToolCall], str | None] | None = None,
    ) -> None:
        if retry_max < 1:
            raise ValueError("retry_max counts attempts and must be >= 1")
        self.registry = registry
        self.log = log
        self.retry_max = retry_max
        self.failure_threshold = failure_threshold
        self.cooldown = cooldown
        self.verdict_lookup = verdict_lookup or (lambda ref: None)
        self.approver = approver
        self.adapters: dict[tuple[str, str], Adapter] = {}
        self.breakers: dict[str, BreakerState] = {}
        self.records: dict[str, IdempotencyRecord] = {}
        self.admitted: dict[str, deque] = defaultdict(deque)
        self.halt_reason: str | None = None
        self._lock = threading.RLock()

    @property
    def clock(self):
        return self.log.clock

    def register_adapter(self, name: str, version: str, adapter: Adapter) -> None:
        if self.registry.get(name, version) is None:
            raise KeyError(f"no spec for {name}@{version}")
        self.adapters[(name, version)] = adapter

    def lock_actuation(self, reason: str) -> None:
        """Safe-halt: refuse every actuating call until an operator override."""
        with self._lock:
            self.halt_reason = reason

    def operator_override(self, operator: str) -> None:
        with self._lock:
            self.halt_reason = None
            self.log.append("gateway", "OperatorOverride", {"operator": operator})

    def breaker(self, tool: str) -> BreakerState:
        return self.breakers.get(
            tool, BreakerState(tool, failure_threshold=self.failure_threshold, cooldown=self.cooldown)
        )

    def _finish(self, call: ToolCall, spec: ToolSpec, outcome: GatewayOutcome) -> GatewayOutcome:
        self.log.append(
            "gateway",
            "GatewayOutcome",
            {**outcome.to_doc(), "tool": call.tool_name, "scope": spec.scope.wire, "step_id": call.origin},
        )
        return outcome

    def _refuse(self, call: ToolCall, spec: ToolSpec, status: str, code: str) -> GatewayOutcome:
        return self._finish(call, spec, GatewayOutcome(call.call_id, status, error_code=code))

    def _simulation_ok(self, call: ToolCall) -> bool:
        if not call.sim_verdict_ref:
            return False
        verdict = self.verdict_lookup(call.sim_verdict_ref)
        if verdict is None or not verdict.passed or verdict.kind != "simulation":
            return False
        return verdict.subject_ref in (call.origin, call.call_id)

    def execute(self, permit: Permit, seed: int) -> GatewayOutcome:
        call = permit.tool_call
        spec = self.registry.get(call.tool_name, call.tool_version)
        if spec is None:
            raise KeyError(f"unregistered tool {call.tool_name}@{call.tool_version}")
        with self._lock:
            return self._execute(call, spec, permit.call.fingerprint, seed)

    def _execute(self, call: ToolCall, spec: ToolSpec, fingerprint: str, seed: int) -> GatewayOutcome:
        if is_actuating(spec.scope):
            if self.halt_reason is not None:
                return self._refuse(call, spec, REFUSED, "SafeHaltActive")
            if not self._simulation_ok(call):
                return self._refuse(call, spec, REFUSED, "SimulationGateUnsatisfied")
            if spec.scope == ToolScope.ACTUATE_IRREVERSIBLE:
                approval = self.approver(call) if self.approver else None
                self.log.append(
                    "gateway", "Approval", {"call_id": call.call_id, "approved": bool(approval), "approval_token": approval}
                )
                if not approval:
                    return self._refuse(call, spec, REFUSED, "ApprovalDenied")

        key = call.idempotency_key
        if key:
            record = self.records.get(key)
            if record is not None:
                if record.call_fingerprint == fingerprint:
                    self.log.append("gateway", "IdempotentReplay", {"call_id": call.call_id, "key": key})
                    return record.outcome
                self.log.append(
                    "gateway",
                    "Conflict",
                    {"call_id": call.call_id, "key": key, "recorded": record.call_fingerprint, "offered": fingerprint},
                )
                return self._refuse(call, spec, CONFLICT, "IdempotencyConflict")

        now = self.clock.now
        window = self.admitted[call.tool_name]
        if spec.rate_limit is not None:
            count, width = spec.rate_limit
            while window and window[0] <= now - width:
                window.popleft()
            if len(window) >= count:
                return self._refuse(call, spec, RATE_LIMITED, "RateLimited")
        admit, state = breaker_admit(self.breaker(call.tool_name), now)
        if state != self.breaker(call.tool_name):
            self.log.append("gateway", "BreakerTransition", {"tool": call.tool_name, "state": state.state})
        self.breakers[call.tool_name] = state
        if not admit:
            return self._refuse(call, spec, BREAKER_OPEN, "BreakerOpen")
        window.append(now)

        outcome = self._attempts(call, spec, fingerprint, seed)

        before = self.breakers[call.tool_name]
        after = breaker_record(before, outcome.ok, self.clock.now)
        if after.state != before.state:
            self.log.append("gateway", "BreakerTransition", {"tool": call.tool_name, "state": after.state})
        self.breakers[call.tool_name] = after
        if key:
            self.records[key] = IdempotencyRecord(key, fingerprint, outcome, now)
        return self._finish(call, spec, outcome)

    def _attempts(self, call: ToolCall, spec: ToolSpec, fingerprint: str, seed: int) -> GatewayOutcome:
        adapter = self.adapters.get((call.tool_name, call.tool_version))
        if adapter is None:
            raise KeyError(f"no adapter for {call.tool_name}@{call.tool_version}")
        elapsed = 0
        attempt = 0
        while True:
            attempt += 1
            try:
                res = adapter(dict(call.args), spec.timeout, seed)
            except Exception as exc:  # adapter crash is a non-transient tool error
                res = AdapterResult(None, f"adapter_exception:{type(exc).__name__}", 1)
            timed_out = res.ticks > spec.timeout
            consumed = min(res.ticks, spec.timeout)
            self.clock.advance(consumed)
            elapsed += consumed
            error = "timeout" if timed_out else res.error_code
            result = None if error else dict(res.result or {})
            self.log.append(
                "gateway",
                "AdapterInvoked",
                {
                    "call_id": call.call_id,
                    "tool": call.tool_name,
                    "version": call.tool_version,
                    "scope": spec.scope.wire,
                    "step_id": call.origin,
                    "sim_verdict_ref": call.sim_verdict_ref,
                    "attempt": attempt,
                    "fingerprint": fingerprint,
                    "result": None if res.result is None else dict(res.result),
                    "adapter_error": res.error_code,
                    "error_code": error,
                    "ticks": res.ticks,
                },
            )
            if error is None:
                return GatewayOutcome(call.call_id, OK, result, None, attempt, elapsed)
            retryable = bool(call.idempotency_key) and error in spec.transient_error_codes
            if not retryable or attempt >= self.retry_max:
                status = TIMED_OUT if timed_out else TOOL_ERROR
                return GatewayOutcome(call.call_id, status, None, error, attempt, elapsed)
            delay = backoff_ticks(seed, call.call_id, attempt)
            self.clock.advance(delay)
            elapsed += delay
            self.log.append("gateway", "RetryScheduled", {"call_id": call.call_id, "attempt": attempt, "delay": delay})

    def compensate(self, saga: SagaLog, seed: int, authorize: Callable[[ToolCall], Permit]) -> SagaLog:
        """Undo every Done entry in reverse order.

        ``authorize`` turns a compensation call into a Permit. The first
        failure stops the walk and raises :class:`CompensationFailed` with the
        partially compensated log.
        """
        out = saga.copy()
        for entry in reversed([e for e in out.entries if e.status == DONE]):
            if entry.compensation is None:
                self.log.append("gateway", "NonCompensatable", {"saga_id": out.saga_id, "step_id": entry.step_id})
                continue
            try:
                permit = authorize(entry.compensation)
            except Refusal as exc:
                self._compensation_failed(out, entry, str(exc))
            outcome = self.execute(permit, seed)
            if not outcome.ok:
                self._compensation_failed(out, entry, outcome.error_code or outcome.status)
            out.mark(entry.step_id, COMPENSATED)
        return out

    def _compensation_failed(self, saga: SagaLog, entry: SagaEntry, reason: str) -> None:
        self.log.append(
            "gateway", "CompensationFailed", {"saga_id": saga.saga_id, "step_id": entry.step_id, "reason": reason}
        )
        raise CompensationFailed(entry.step_id, saga, reason)
