"""Builders shared by the test modules."""

from __future__ import annotations

from agentkernel.contracts import CapabilityToken, ToolCall, ToolSpec
from agentkernel.gateway import AdapterResult


def make_spec(name="probe", scope="ReadOnly", schema=(), **kw) -> ToolSpec:
    if scope in ("ActuateReversible", "ActuateIrreversible"):
        kw.setdefault("requires_idempotency_key", True)
    return ToolSpec(name, kw.pop("version", "1"), scope, tuple(schema), **kw)


def make_token(allow=("*",), ceiling="ActuateIrreversible", **kw) -> CapabilityToken:
    return CapabilityToken(kw.pop("token_id", "tok"), kw.pop("subject", "agent"), tuple(allow), ceiling, **kw)


def make_call(tool="probe", args=None, key=None, call_id="c1", **kw) -> ToolCall:
    return ToolCall(call_id, tool, kw.pop("version", "1"), dict(args or {}), idempotency_key=key, **kw)


class CountingAdapter:
    """Adapter replaying a scripted list of results and counting invocations."""

    def __init__(self, script=None, default=None):
        self.script = list(script or [])
        self.default = default or AdapterResult({"ok": True}, None, 1)
        self.calls: list[dict] = []

    def __call__(self, args, budget, seed):
        self.calls.append(dict(args))
        if self.script:
            return self.script.pop(0)
        return self.default
