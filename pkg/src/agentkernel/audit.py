"""Hash-chained append-only audit log, trace files and replay comparison.

Each event commits to its predecessor::

    payload_hash = H(canonical({component, kind, tick, payload}))
    chain_hash   = H(prev_hash || payload_hash || seq)

Trace files hold a canonical header line followed by one canonical event per
line, so integrity can be checked while streaming and any byte-level edit is
caught at the line where it happened.
"""

from __future__ import annotations

import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence
import json

from . import COMPONENT_VERSIONS
from .canonical import DEFAULT_HASH, canonical_json, digest, hash_doc, zero_digest

EVENT_FIELDS = ("seq", "tick", "component", "kind", "payload", "payload_hash", "prev_hash", "chain_hash")


class AuditError(Exception):
    pass


class VersionMismatch(AuditError):
    pass


class TruncatedTrace(AuditError):
    pass


class TraceFormatError(AuditError):
    pass


class LogicalClock:
    """Monotonic tick counter; the only notion of time inside the kernel."""

    def __init__(self, start: int = 0) -> None:
        self.now = start

    def advance(self, ticks: int = 1) -> int:
        if ticks < 0:
            raise ValueError("clock cannot move backwards")
        self.now += ticks
        return self.now


def body_hash(component: str, kind: str, tick: int, payload: Any, algo: str = DEFAULT_HASH) -> str:
    return hash_doc({"component": component, "kind": kind, "tick": tick, "payload": payload}, algo)


def link_hash(prev_hash: str, payload_hash: str, seq: int, algo: str = DEFAULT_HASH) -> str:
    return digest(f"{prev_hash}{payload_hash}{seq}", algo)


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    tick: int
    component: str
    kind: str
    payload: Any
    payload_hash: str
    prev_hash: str
    chain_hash: str

    def to_doc(self) -> dict:
        return {name: getattr(self, name) for name in EVENT_FIELDS}

    def line(self) -> str:
        return canonical_json(self.to_doc())

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "AuditEvent":
        missing = [name for name in EVENT_FIELDS if name not in doc]
        if missing:
            raise TraceFormatError(f"event missing fields {missing}")
        return cls(**{name: doc[name] for name in EVENT_FIELDS})


class AuditLog:
    """Single-appender event log for one episode.

    Producers on other threads may call :meth:`append`; appends are
    serialized so the chain stays linear.
    """

    def __init__(self, clock: LogicalClock | None = None, algo: str = DEFAULT_HASH) -> None:
        self.clock = clock or LogicalClock()
        self.algo = algo
        self.events: list[AuditEvent] = []
        self._lock = threading.Lock()

    def append(self, component: str, kind: str, payload: Any = None, *, tick: int | None = None) -> AuditEvent:
        payload = json.loads(canonical_json({} if payload is None else payload))
        with self._lock:
            seq = len(self.events)
            prev = self.events[-1].chain_hash if self.events else zero_digest(self.algo)
            tick = self.clock.now if tick is None else tick
            p_hash = body_hash(component, kind, tick, payload, self.algo)
            event = AuditEvent(
                seq=seq,
                tick=tick,
                component=component,
                kind=kind,
                payload=payload,
                payload_hash=p_hash,
                prev_hash=prev,
                chain_hash=link_hash(prev, p_hash, seq, self.algo),
            )
            self.events.append(event)
            return event

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[AuditEvent]:
        return iter(list(self.events))

    def of_kind(self, *kinds: str) -> list[AuditEvent]:
        return [e for e in self.events if e.kind in kinds]


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    first_bad_seq: int | None = None
    reason: str = ""


def verify_chain(events: Sequence[AuditEvent], algo: str = DEFAULT_HASH) -> ChainReport:
    prev = zero_digest(algo)
    for i, event in enumerate(events):
        problem = _check_event(event, i, prev, algo)
        if problem:
            return ChainReport(False, i, problem)
        prev = event.chain_hash
    return ChainReport(True)


def _check_event(event: AuditEvent, index: int, prev: str, algo: str) -> str:
    if event.seq != index:
        return "seq"
    if event.prev_hash != prev:
        return "prev_hash"
    try:
        recomputed = body_hash(event.component, event.kind, event.tick, event.payload, algo)
    except (TypeError, ValueError):
        return "payload"
    if recomputed != event.payload_hash:
        return "payload_hash"
    if link_hash(prev, event.payload_hash, event.seq, algo) != event.chain_hash:
        return "chain_hash"
    return ""


@dataclass
class EpisodeTrace:
    header: dict
    events: list[AuditEvent] = field(default_factory=list)

    @property
    def algo(self) -> str:
        return self.header.get("hash", DEFAULT_HASH)

    def to_bytes(self) -> bytes:
        lines = [canonical_json({"header": self.header})]
        lines.extend(e.line() for e in self.events)
        return ("\n".join(lines) + "\n").encode("utf-8")

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def split_trace(data: bytes) -> tuple[bytes, list[bytes]]:
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        raise TraceFormatError("empty trace")
    return lines[0], lines[1:]


def _parse_line(raw: bytes) -> dict | None:
    """Parse a trace line, accepting it only if it is already canonical."""
    try:
        text = raw.decode("utf-8")
        doc = json.loads(text)
    except (UnicodeDecodeError, ValueError):
        return None
    if not isinstance(doc, dict):
        return None
    try:
        if canonical_json(doc) != text:
            return None
    except ValueError:
        return None
    return doc


def parse_header(raw: bytes) -> dict:
    doc = _parse_line(raw)
    if doc is None or not isinstance(doc.get("header"), dict):
        raise TraceFormatError("unreadable trace header")
    return doc["header"]


def read_trace(path: str | Path) -> EpisodeTrace:
    header_raw, lines = split_trace(Path(path).read_bytes())
    header = parse_header(header_raw)
    events = []
    for i, raw in enumerate(lines):
        doc = _parse_line(raw)
        if doc is None:
            raise TraceFormatError(f"line for event {i} is not canonical JSON")
        events.append(AuditEvent.from_doc(doc))
    return EpisodeTrace(header, events)


def verify_lines(lines: Sequence[bytes], algo: str = DEFAULT_HASH) -> ChainReport:
    """Byte-level chain check: every line must be canonical and link correctly."""
    prev = zero_digest(algo)
    for i, raw in enumerate(lines):
        doc = _parse_line(raw)
        if doc is None:
            return ChainReport(False, i, "not canonical")
        try:
            event = AuditEvent.from_doc(doc)
        except TraceFormatError:
            return ChainReport(False, i, "fields")
        problem = _check_event(event, i, prev, algo)
        if problem:
            return ChainReport(False, i, problem)
        prev = event.chain_hash
    return ChainReport(True)


def verify_trace_file(path: str | Path) -> ChainReport:
    header_raw, lines = split_trace(Path(path).read_bytes())
    try:
        header = parse_header(header_raw)
    except TraceFormatError:
        return ChainReport(False, -1, "header")
    return verify_lines(lines, header.get("hash", DEFAULT_HASH))


class Playback:
    """Recorded adapter results and operator decisions, served in order."""

    def __init__(self, event_docs: Iterable[Mapping[str, Any]]) -> None:
        self._invocations: dict[str, deque] = defaultdict(deque)
        self._approvals: deque = deque()
        for doc in event_docs:
            kind = doc.get("kind")
            payload = doc.get("payload") or {}
            if kind == "AdapterInvoked":
                self._invocations[str(payload.get("tool"))].append(payload)
            elif kind == "Approval":
                self._approvals.append(payload)

    def next_invocation(self, tool: str) -> dict | None:
        queue = self._invocations.get(tool)
        return queue.popleft() if queue else None

    def next_approval(self) -> dict | None:
        return self._approvals.popleft() if self._approvals else None


@dataclass(frozen=True)
class Divergence:
    seq: int
    field: str
    expected_hash: str
    actual_hash: str
    component: str = ""

    def to_doc(self) -> dict:
        return {
            "seq": self.seq,
            "field": self.field,
            "expected_hash": self.expected_hash,
            "actual_hash": self.actual_hash,
            "component": self.component,
        }


@dataclass(frozen=True)
class ReplayReport:
    identical: bool
    events_compared: int
    first_divergence: Divergence | None = None

    def to_doc(self) -> dict:
        return {
            "identical": self.identical,
            "events_compared": self.events_compared,
            "first_divergence": self.first_divergence.to_doc() if self.first_divergence else None,
        }


KernelFactory = Callable[[dict, Playback], Sequence[AuditEvent]]


def replay(
    source: str | Path | bytes,
    kernel_factory: KernelFactory,
    *,
    config_hash: str | None = None,
    versions: Mapping[str, str] | None = None,
) -> ReplayReport:
    """Re-run a recorded episode and compare every regenerated event.

    ``kernel_factory(header, playback)`` must rebuild the episode from the
    header alone, using ``playback`` in place of live adapters. ``config_hash``
    guards against replaying under a different configuration.
    """
    data = source if isinstance(source, bytes) else Path(source).read_bytes()
    header_raw, lines = split_trace(data)
    header = parse_header(header_raw)
    expected_versions = dict(COMPONENT_VERSIONS if versions is None else versions)
    if header.get("component_versions") != expected_versions:
        raise VersionMismatch(f"trace built with {header.get('component_versions')}, running {expected_versions}")
    if config_hash is not None and config_hash != header.get("config_hash"):
        raise VersionMismatch("config_hash differs from the recorded configuration")
    algo = header.get("hash", DEFAULT_HASH)

    docs = [_parse_line(raw) for raw in lines]
    playback = Playback(d for d in docs if d is not None)
    regenerated = list(kernel_factory(header, playback))

    for i, event in enumerate(regenerated):
        if i >= len(lines):
            raise TruncatedTrace(f"trace ends after {len(lines)} events, replay produced {len(regenerated)}")
        line = event.line()
        if lines[i] == line.encode("utf-8"):
            continue
        recorded = docs[i]
        return ReplayReport(
            identical=False,
            events_compared=i + 1,
            first_divergence=Divergence(
                seq=i,
                field=_first_difference(recorded, event.to_doc()),
                expected_hash=_recorded_hash(recorded, lines[i], algo),
                actual_hash=event.payload_hash,
                component=event.component,
            ),
        )
    if len(lines) > len(regenerated):
        i = len(regenerated)
        return ReplayReport(
            identical=False,
            events_compared=i,
            first_divergence=Divergence(i, "extra_event", digest(lines[i], algo), "", ""),
        )
    return ReplayReport(identical=True, events_compared=len(regenerated))


def _first_difference(recorded: dict | None, regenerated: dict) -> str:
    if recorded is None:
        return "raw"
    for name in ("component", "kind", "tick", "payload", "seq", "payload_hash", "prev_hash", "chain_hash"):
        if recorded.get(name) != regenerated.get(name):
            return name
    return "raw"


def _recorded_hash(recorded: dict | None, raw: bytes, algo: str) -> str:
    if recorded is not None and isinstance(recorded.get("payload_hash"), str):
        return recorded["payload_hash"]
    return digest(raw, algo)
