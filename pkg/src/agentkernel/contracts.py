"""Tool contracts: argument schemas, the scope lattice and capability tokens.

``validate_args`` turns a proposed call into a typed call or an exhaustive,
deterministic list of :class:`ValidationError`; ``authorize`` checks it
against a :class:`CapabilityToken`. Both are pure; passing ``log`` records
the decision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .canonical import format_number, hash_doc

KINDS = ("text", "integer", "decimal", "boolean", "enumeration", "nested-document", "list")

ERROR_CODES = (
    "UnknownTool",
    "UnknownField",
    "MissingField",
    "TypeMismatch",
    "OutOfRange",
    "NotInEnumeration",
    "ScopeExceeded",
    "CapExceeded",
    "TokenExpired",
    "TokenExhausted",
    "ToolNotAllowlisted",
    "MissingIdempotencyKey",
)


class SchemaError(ValueError):
    """A schema, spec or token violates its own invariants."""


class Refusal(Exception):
    def __init__(self, errors: Sequence["ValidationError"]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(f"{e.code}@{e.path}" for e in self.errors))


class ValidationFailed(Refusal):
    pass


class AuthorizationDenied(Refusal):
    pass


class ToolScope(IntEnum):
    READ_ONLY = 0
    SIMULATE = 1
    ACTUATE_REVERSIBLE = 2
    ACTUATE_IRREVERSIBLE = 3

    @property
    def wire(self) -> str:
        return _SCOPE_WIRE[self]

    @classmethod
    def parse(cls, value: "str | ToolScope") -> "ToolScope":
        if isinstance(value, ToolScope):
            return value
        try:
            return _SCOPE_BY_WIRE[value]
        except KeyError:
            raise SchemaError(f"unknown scope {value!r}") from None


_SCOPE_WIRE = {
    ToolScope.READ_ONLY: "ReadOnly",
    ToolScope.SIMULATE: "Simulate",
    ToolScope.ACTUATE_REVERSIBLE: "ActuateReversible",
    ToolScope.ACTUATE_IRREVERSIBLE: "ActuateIrreversible",
}
_SCOPE_BY_WIRE = {v: k for k, v in _SCOPE_WIRE.items()}


def scope_leq(a: ToolScope, b: ToolScope) -> bool:
    return ToolScope.parse(a) <= ToolScope.parse(b)


def is_actuating(scope: ToolScope) -> bool:
    return scope >= ToolScope.ACTUATE_REVERSIBLE


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: str
    required: bool = True
    minimum: float | None = None
    maximum: float | None = None
    allowed: tuple = ()
    max_length: int | None = None
    children: tuple["FieldSchema", ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.minimum is not None and self.maximum is not None and self.minimum > self.maximum:
            raise SchemaError(f"{self.name}: minimum exceeds maximum")
        if self.kind == "enumeration" and not self.allowed:
            raise SchemaError(f"{self.name}: enumeration needs allowed values")
        if self.kind in ("nested-document", "list") and not self.children:
            raise SchemaError(f"{self.name}: {self.kind} needs children")
        if self.kind == "list" and len(self.children) != 1:
            raise SchemaError(f"{self.name}: list takes exactly one element schema")
        _check_unique(self.children, self.name)

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"name": self.name, "kind": self.kind, "required": self.required}
        if self.minimum is not None:
            doc["minimum"] = self.minimum
        if self.maximum is not None:
            doc["maximum"] = self.maximum
        if self.allowed:
            doc["allowed"] = list(self.allowed)
        if self.max_length is not None:
            doc["max_length"] = self.max_length
        if self.children:
            doc["children"] = [c.to_doc() for c in self.children]
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "FieldSchema":
        return cls(
            name=doc["name"],
            kind=doc["kind"],
            required=doc.get("required", True),
            minimum=doc.get("minimum"),
            maximum=doc.get("maximum"),
            allowed=tuple(doc.get("allowed", ())),
            max_length=doc.get("max_length"),
            children=tuple(cls.from_doc(c) for c in doc.get("children", ())),
        )


def _check_unique(fields: Iterable[FieldSchema], owner: str) -> None:
    names = [f.name for f in fields]
    if len(names) != len(set(names)):
        raise SchemaError(f"{owner}: duplicate field names")


@dataclass(frozen=True)
class ToolSpec:
    name: str
    version: str
    scope: ToolScope
    arg_schema: tuple[FieldSchema, ...] = ()
    timeout: int = 10
    rate_limit: tuple[int, int] | None = None  # (count, window ticks)
    requires_idempotency_key: bool = False
    transient_error_codes: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "scope", ToolScope.parse(self.scope))
        object.__setattr__(self, "transient_error_codes", frozenset(self.transient_error_codes))
        _check_unique(self.arg_schema, self.name)
        if self.scope > ToolScope.SIMULATE and not self.requires_idempotency_key:
            raise SchemaError(f"{self.name}: scope {self.scope.wire} requires idempotency keys")
        if self.timeout < 1:
            raise SchemaError(f"{self.name}: timeout must be positive")

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "scope": self.scope.wire,
            "arg_schema": [f.to_doc() for f in self.arg_schema],
            "timeout": self.timeout,
            "rate_limit": None if self.rate_limit is None else {"count": self.rate_limit[0], "window": self.rate_limit[1]},
            "requires_idempotency_key": self.requires_idempotency_key,
            "transient_error_codes": sorted(self.transient_error_codes),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ToolSpec":
        rl = doc.get("rate_limit")
        return cls(
            name=doc["name"],
            version=doc["version"],
            scope=ToolScope.parse(doc["scope"]),
            arg_schema=tuple(FieldSchema.from_doc(f) for f in doc.get("arg_schema", ())),
            timeout=doc.get("timeout", 10),
            rate_limit=None if rl is None else (int(rl["count"]), int(rl["window"])),
            requires_idempotency_key=doc.get("requires_idempotency_key", False),
            transient_error_codes=frozenset(doc.get("transient_error_codes", ())),
        )


def _version_key(version: str) -> tuple:
    return tuple(int(p) if p.isdigit() else p for p in version.split("."))


class ToolRegistry:
    def __init__(self, specs: Iterable[ToolSpec] = ()) -> None:
        self._specs: dict[str, dict[str, ToolSpec]] = {}
        for spec in specs:
            self.register(spec)

    def register(self, spec: ToolSpec) -> None:
        versions = self._specs.setdefault(spec.name, {})
        if spec.version in versions:
            raise SchemaError(f"{spec.name}@{spec.version} already registered")
        versions[spec.version] = spec

    def get(self, name: str, version: str | None = None) -> ToolSpec | None:
        versions = self._specs.get(name)
        if not versions:
            return None
        if version is None:
            return versions[max(versions, key=_version_key)]
        return versions.get(version)

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def names(self) -> list[str]:
        return sorted(self._specs)

    def specs(self) -> list[ToolSpec]:
        return [self._specs[n][v] for n in self.names() for v in sorted(self._specs[n], key=_version_key)]

    def to_doc(self) -> dict:
        return {"tools": [s.to_doc() for s in self.specs()]}

    def registry_hash(self) -> str:
        return hash_doc(self.to_doc())

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ToolRegistry":
        return cls(ToolSpec.from_doc(d) for d in doc["tools"])

    @classmethod
    def load(cls, path: str | Path) -> "ToolRegistry":
        return cls.from_doc(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    tool_name: str
    tool_version: str
    args: Mapping[str, Any]
    idempotency_key: str | None = None
    issuer: str = ""
    origin: str | None = None
    sim_verdict_ref: str | None = None

    def to_doc(self) -> dict:
        return {
            "call_id": self.call_id,
            "tool_name": self.tool_name,
            "tool_version": self.tool_version,
            "args": dict(self.args),
            "idempotency_key": self.idempotency_key,
            "issuer": self.issuer,
            "origin": self.origin,
            "sim_verdict_ref": self.sim_verdict_ref,
        }

    def with_(self, **changes: Any) -> "ToolCall":
        return replace(self, **changes)


def call_fingerprint(tool_name: str, version: str, args: Mapping[str, Any]) -> str:
    return hash_doc({"tool": tool_name, "version": version, "args": args})


@dataclass(frozen=True)
class ValidationError:
    code: str
    path: str
    expected: str = ""
    actual: str = ""

    def to_doc(self) -> dict:
        return {"code": self.code, "path": self.path, "expected": self.expected, "actual": self.actual}


@dataclass(frozen=True)
class ValidatedCall:
    call: ToolCall
    fingerprint: str

    @property
    def call_id(self) -> str:
        return self.call.call_id


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _range_error(f: FieldSchema, value: float, path: str) -> ValidationError | None:
    if f.maximum is not None and value > f.maximum:
        return ValidationError("OutOfRange", path, f"≤{format_number(f.maximum)}", format_number(value))
    if f.minimum is not None and value < f.minimum:
        return ValidationError("OutOfRange", path, f"≥{format_number(f.minimum)}", format_number(value))
    return None


def _check_value(
    f: FieldSchema, value: Any, path: str, out: list[ValidationError], deferred: Callable[[Any], bool]
) -> None:
    if deferred(value):
        return
    kind = f.kind
    if kind == "text":
        if not isinstance(value, str):
            out.append(ValidationError("TypeMismatch", path, "text", format_number(value)))
        elif f.max_length is not None and len(value) > f.max_length:
            out.append(ValidationError("OutOfRange", path, f"len≤{f.max_length}", str(len(value))))
    elif kind in ("integer", "decimal"):
        ok = _is_number(value) and (kind == "decimal" or isinstance(value, int))
        if not ok:
            out.append(ValidationError("TypeMismatch", path, kind, format_number(value)))
            return
        err = _range_error(f, value, path)
        if err:
            out.append(err)
    elif kind == "boolean":
        if not isinstance(value, bool):
            out.append(ValidationError("TypeMismatch", path, "boolean", format_number(value)))
    elif kind == "enumeration":
        if not isinstance(value, str):
            out.append(ValidationError("TypeMismatch", path, "enumeration", format_number(value)))
        elif value not in f.allowed:
            out.append(ValidationError("NotInEnumeration", path, "|".join(f.allowed), value))
    elif kind == "nested-document":
        if not isinstance(value, Mapping):
            out.append(ValidationError("TypeMismatch", path, "nested-document", format_number(value)))
        else:
            _walk(f.children, value, path, out, deferred)
    else:  # list
        if not isinstance(value, list):
            out.append(ValidationError("TypeMismatch", path, "list", format_number(value)))
            return
        if f.max_length is not None and len(value) > f.max_length:
            out.append(ValidationError("OutOfRange", path, f"len≤{f.max_length}", str(len(value))))
        for i, item in enumerate(value):
            _check_value(f.children[0], item, f"{path}[{i}]", out, deferred)


def _walk(
    fields: Sequence[FieldSchema],
    doc: Mapping[str, Any],
    prefix: str,
    out: list[ValidationError],
    deferred: Callable[[Any], bool],
) -> None:
    # Declared fields in declaration order, then unknown keys sorted by name.
    declared = set()
    for f in fields:
        declared.add(f.name)
        path = _join(prefix, f.name)
        if f.name not in doc:
            if f.required:
                out.append(ValidationError("MissingField", path, f.kind, ""))
            continue
        _check_value(f, doc[f.name], path, out, deferred)
    for key in sorted(str(k) for k in doc if k not in declared):
        out.append(ValidationError("UnknownField", _join(prefix, key), "", format_number(doc[key])))


def check_args(
    fields: Sequence[FieldSchema],
    args: Mapping[str, Any],
    *,
    deferred: Callable[[Any], bool] = lambda v: False,
) -> list[ValidationError]:
    """All schema violations of ``args``, in schema path order.

    Values for which ``deferred`` returns true (plan placeholders) are
    accepted as-is.
    """
    out: list[ValidationError] = []
    if not isinstance(args, Mapping):
        return [ValidationError("TypeMismatch", "", "nested-document", format_number(args))]
    _walk(fields, args, "", out, deferred)
    return out


def validate_args(spec: ToolSpec, call: ToolCall, *, log=None) -> ValidatedCall:
    """Typed call or :class:`ValidationFailed` carrying every violation."""
    if spec.name != call.tool_name:
        raise ValueError(f"spec {spec.name} does not describe call to {call.tool_name}")
    errors = check_args(spec.arg_schema, call.args)
    if spec.requires_idempotency_key and not call.idempotency_key:
        errors.append(ValidationError("MissingIdempotencyKey", "idempotency_key", "text", ""))
    if log is not None:
        log.append(
            "contracts",
            "CallRejected" if errors else "CallValidated",
            {"call_id": call.call_id, "tool": call.tool_name, "origin": call.origin, "errors": [e.to_doc() for e in errors]},
        )
    if errors:
        raise ValidationFailed(errors)
    return ValidatedCall(call, call_fingerprint(call.tool_name, call.tool_version, call.args))


def validate_call(registry: ToolRegistry, call: ToolCall, *, log=None) -> ValidatedCall:
    spec = registry.get(call.tool_name, call.tool_version or None)
    if spec is None:
        err = ValidationError("UnknownTool", "tool_name", "registered tool", call.tool_name)
        if log is not None:
            log.append("contracts", "CallRejected", {"call_id": call.call_id, "tool": call.tool_name, "origin": call.origin, "errors": [err.to_doc()]})
        raise ValidationFailed([err])
    return validate_args(spec, call, log=log)


def _normalize_cap(cap: Any) -> dict:
    if isinstance(cap, Mapping):
        out = {}
        if "max" in cap:
            out["max"] = cap["max"]
        if "min" in cap:
            out["min"] = cap["min"]
        if "allowed" in cap:
            out["allowed"] = sorted(cap["allowed"])
        if not out:
            raise SchemaError(f"empty parameter cap {cap!r}")
        return out
    if isinstance(cap, (list, tuple, set, frozenset)):
        return {"allowed": sorted(cap)}
    if _is_number(cap):
        return {"max": cap}
    raise SchemaError(f"unsupported parameter cap {cap!r}")


@dataclass(frozen=True)
class CapabilityToken:
    """Time- and count-limited grant; value-immutable.

    ``parameter_caps`` maps a dotted argument path to ``{"max": x}``,
    ``{"min": x}``, ``{"allowed": [...]}`` or a bare number (a max).
    """

    token_id: str
    subject: str
    tool_allowlist: tuple[str, ...]
    scope_ceiling: ToolScope
    parameter_caps: Mapping[str, Any] = field(default_factory=dict)
    expiry: int = 2**62
    max_invocations: int = 2**31
    invocations_used: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "scope_ceiling", ToolScope.parse(self.scope_ceiling))
        object.__setattr__(self, "tool_allowlist", tuple(self.tool_allowlist))
        object.__setattr__(
            self, "parameter_caps", {k: _normalize_cap(v) for k, v in sorted(dict(self.parameter_caps).items())}
        )
        if not 0 <= self.invocations_used <= self.max_invocations:
            raise SchemaError(f"{self.token_id}: invocations_used out of range")
        for pattern in self.tool_allowlist:
            if "*" in pattern[:-1]:
                raise SchemaError(f"{self.token_id}: only a single trailing wildcard is allowed ({pattern})")

    def allows_tool(self, name: str) -> bool:
        for pattern in self.tool_allowlist:
            if pattern.endswith("*"):
                if name.startswith(pattern[:-1]):
                    return True
            elif pattern == name:
                return True
        return False

    def consume(self) -> "CapabilityToken":
        return replace(self, invocations_used=self.invocations_used + 1)

    def to_doc(self) -> dict:
        return {
            "token_id": self.token_id,
            "subject": self.subject,
            "tool_allowlist": list(self.tool_allowlist),
            "scope_ceiling": self.scope_ceiling.wire,
            "parameter_caps": dict(self.parameter_caps),
            "expiry": self.expiry,
            "max_invocations": self.max_invocations,
            "invocations_used": self.invocations_used,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "CapabilityToken":
        return cls(
            token_id=doc["token_id"],
            subject=doc["subject"],
            tool_allowlist=tuple(doc["tool_allowlist"]),
            scope_ceiling=ToolScope.parse(doc["scope_ceiling"]),
            parameter_caps=doc.get("parameter_caps", {}),
            expiry=doc.get("expiry", 2**62),
            max_invocations=doc.get("max_invocations", 2**31),
            invocations_used=doc.get("invocations_used", 0),
        )


_MISSING = object()


def resolve_path(doc: Any, path: str, default: Any = _MISSING) -> Any:
    """Follow a dotted path (``a.b`` or ``a.items[2].c``) into a document."""
    cur = doc
    for part in _split_path(path):
        if isinstance(part, int):
            if isinstance(cur, list) and -len(cur) <= part < len(cur):
                cur = cur[part]
                continue
        elif isinstance(cur, Mapping) and part in cur:
            cur = cur[part]
            continue
        if default is _MISSING:
            raise KeyError(path)
        return default
    return cur


def _split_path(path: str) -> list[str | int]:
    parts: list[str | int] = []
    for chunk in path.split("."):
        while "[" in chunk and chunk.endswith("]"):
            head, _, idx = chunk.partition("[")
            if head:
                parts.append(head)
            parts.append(int(idx[: idx.index("]")]))
            chunk = idx[idx.index("]") + 1 :]
        if chunk:
            parts.append(chunk)
    return parts


def check_caps(
    caps: Mapping[str, Mapping[str, Any]],
    args: Mapping[str, Any],
    *,
    deferred: Callable[[Any], bool] = lambda v: False,
) -> list[ValidationError]:
    errors = []
    for path, cap in caps.items():
        value = resolve_path(args, path, None)
        if value is None or deferred(value):
            continue
        if "allowed" in cap:
            if value not in cap["allowed"]:
                errors.append(ValidationError("CapExceeded", path, "|".join(map(str, cap["allowed"])), format_number(value)))
            continue
        if not _is_number(value):
            errors.append(ValidationError("CapExceeded", path, "numeric", format_number(value)))
        elif "max" in cap and value > cap["max"]:
            errors.append(ValidationError("CapExceeded", path, f"≤{format_number(cap['max'])}", format_number(value)))
        elif "min" in cap and value < cap["min"]:
            errors.append(ValidationError("CapExceeded", path, f"≥{format_number(cap['min'])}", format_number(value)))
    return errors


@dataclass(frozen=True)
class Permit:
    call: ValidatedCall
    token: CapabilityToken  # the token after this permit's invocation was consumed
    issued_at: int

    @property
    def tool_call(self) -> ToolCall:
        return self.call.call


def authorization_errors(
    call: ToolCall,
    spec: ToolSpec,
    token: CapabilityToken,
    now: int,
    *,
    deferred: Callable[[Any], bool] = lambda v: False,
) -> list[ValidationError]:
    errors = []
    if not token.allows_tool(call.tool_name):
        errors.append(ValidationError("ToolNotAllowlisted", "tool_name", ",".join(token.tool_allowlist), call.tool_name))
    if not scope_leq(spec.scope, token.scope_ceiling):
        errors.append(ValidationError("ScopeExceeded", "scope", f"≤{token.scope_ceiling.wire}", spec.scope.wire))
    errors.extend(check_caps(token.parameter_caps, call.args, deferred=deferred))
    if not now < token.expiry:
        errors.append(ValidationError("TokenExpired", "expiry", f"<{token.expiry}", str(now)))
    if token.invocations_used >= token.max_invocations:
        errors.append(
            ValidationError("TokenExhausted", "max_invocations", str(token.max_invocations), str(token.invocations_used))
        )
    return errors


def authorize(call: ValidatedCall, spec: ToolSpec, token: CapabilityToken, now: int, *, log=None) -> Permit:
    """Permit consuming one invocation of ``token``, or :class:`AuthorizationDenied`."""
    errors = authorization_errors(call.call, spec, token, now)
    if log is not None:
        log.append(
            "contracts",
            "Refused" if errors else "Permitted",
            {
                "call_id": call.call_id,
                "tool": call.call.tool_name,
                "origin": call.call.origin,
                "token_id": token.token_id,
                "errors": [e.to_doc() for e in errors],
            },
        )
    if errors:
        raise AuthorizationDenied(errors)
    return Permit(call, token.consume(), now)
