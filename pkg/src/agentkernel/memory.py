"""Governed memory: provenance records, trust tiers, freshness and two-phase publication.

Scores are exact fractions. Recency decay halves once per full half-life of
age (``2 ** -(age // half_life)``), so ranking never depends on float
rounding. Retrieval sees only published records by default.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .canonical import canonical_json, hash_doc

GOLD, SILVER, UNTRUSTED = "Gold", "Silver", "Untrusted"
TIERS = (UNTRUSTED, SILVER, GOLD)  # ascending trust
TIER_RANK = {t: i for i, t in enumerate(TIERS)}
DEFAULT_TIER_WEIGHTS = {GOLD: 4, SILVER: 2, UNTRUSTED: 1}

DRAFT, VERIFIED, PUBLISHED = "Draft", "Verified", "Published"
EPISODIC, SEMANTIC, SUMMARY = "episodic", "semantic", "summary"


class MemoryFault(Exception):
    pass


class CapabilityDenied(MemoryFault):
    pass


class HashMismatch(MemoryFault):
    pass


class VerdictFailed(MemoryFault):
    pass


class InsufficientCorroboration(MemoryFault):
    pass


class UnknownKey(MemoryFault, KeyError):
    pass


class EmptyInput(MemoryFault):
    pass


class MalformedPolicy(MemoryFault):
    pass


def content_hash(content: Any) -> str:
    return hash_doc(content)


@dataclass(frozen=True)
class MemoryRecord:
    id: str
    content: Any
    source_uri: str
    created_at: int
    tier: str = UNTRUSTED
    validity: Mapping[str, Any] = field(default_factory=dict)
    ttl: int | None = None
    status: str = DRAFT
    policy_id: str = ""
    back_pointers: tuple[str, ...] = ()
    corroborations: frozenset[str] = frozenset()
    version: int = 0
    content_hash: str = ""
    kind: str = SEMANTIC
    flags: tuple[str, ...] = ()
    sanitization_flags: tuple[Mapping[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.tier not in TIER_RANK:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.status not in (DRAFT, VERIFIED, PUBLISHED):
            raise ValueError(f"unknown status {self.status!r}")
        if self.kind == SUMMARY and not self.back_pointers:
            raise ValueError("summaries need at least one back pointer")
        object.__setattr__(self, "corroborations", frozenset(self.corroborations))
        object.__setattr__(self, "back_pointers", tuple(self.back_pointers))
        if not self.content_hash:
            object.__setattr__(self, "content_hash", content_hash(self.content))

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "version": self.version,
            "content": self.content,
            "source_uri": self.source_uri,
            "content_hash": self.content_hash,
            "created_at": self.created_at,
            "tier": self.tier,
            "validity": dict(self.validity),
            "ttl": self.ttl,
            "status": self.status,
            "policy_id": self.policy_id,
            "back_pointers": list(self.back_pointers),
            "corroborations": sorted(self.corroborations),
            "kind": self.kind,
            "flags": list(self.flags),
            "sanitization_flags": [dict(f) for f in self.sanitization_flags],
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "MemoryRecord":
        return cls(
            id=doc["id"],
            version=doc.get("version", 0),
            content=doc["content"],
            source_uri=doc.get("source_uri", ""),
            content_hash=doc.get("content_hash", ""),
            created_at=doc.get("created_at", 0),
            tier=doc.get("tier", UNTRUSTED),
            validity=dict(doc.get("validity", {})),
            ttl=doc.get("ttl"),
            status=doc.get("status", DRAFT),
            policy_id=doc.get("policy_id", ""),
            back_pointers=tuple(doc.get("back_pointers", ())),
            corroborations=frozenset(doc.get("corroborations", ())),
            kind=doc.get("kind", SEMANTIC),
            flags=tuple(doc.get("flags", ())),
            sanitization_flags=tuple(doc.get("sanitization_flags", ())),
        )

    def provenance(self) -> dict:
        return {
            "id": self.id,
            "version": self.version,
            "source_uri": self.source_uri,
            "content_hash": self.content_hash,
            "created_at": self.created_at,
            "tier": self.tier,
        }


# ---------------------------------------------------------------- sanitization

CONTROL_PATTERNS: tuple[tuple[str, str], ...] = (
    ("special_token", r"<\|[^|<>\n]{0,64}\|>"),
    ("inst_tag", r"\[/?INST\]"),
    ("sys_tag", r"<</?SYS>>"),
)
DENY_PHRASES: tuple[tuple[str, str], ...] = (
    ("override_instructions", r"(?i)\b(?:ignore|disregard)\s+(?:all\s+)?(?:previous|prior)\s+instructions\b"),
    ("reveal_prompt", r"(?i)\breveal\s+(?:the\s+)?system\s+prompt\b"),
)


@dataclass(frozen=True)
class SanitizeResult:
    clean: str
    flags: tuple[Mapping[str, Any], ...]


def _compile(patterns: Iterable[tuple[str, str]], family: str) -> list[tuple[str, str, re.Pattern]]:
    return [(family, name, re.compile(rx)) for name, rx in patterns]


_DEFAULT_RULES = _compile(CONTROL_PATTERNS, "ctl") + _compile(DENY_PHRASES, "deny")


def load_rules(doc: Mapping[str, Any]) -> list[tuple[str, str, re.Pattern]]:
    """Rules from a config document ``{"control": [[name, regex]...], "deny": [...]}``."""
    return _compile(doc.get("control", ()), "ctl") + _compile(doc.get("deny", ()), "deny")


def sanitize(content: str, rules: Sequence[tuple[str, str, re.Pattern]] | None = None) -> SanitizeResult:
    """Neutralize control tokens and deny-listed phrases.

    Each match becomes ``[ctl:<name>]`` or ``[deny:<name>]``. Removal can
    expose a new match (nested tokens), so passes repeat until nothing
    changes; flags carry the pass number and UTF-8 byte offsets within the
    text that pass saw.
    """
    rules = _DEFAULT_RULES if rules is None else rules
    text = content
    flags: list[dict] = []
    passes = 0
    while True:
        hits = []
        for family, name, rx in rules:
            for m in rx.finditer(text):
                hits.append((m.start(), m.end(), family, name))
        if not hits:
            return SanitizeResult(text, tuple(flags))
        passes += 1
        hits.sort(key=lambda h: (h[0], -h[1]))
        pieces, cursor = [], 0
        for start, end, family, name in hits:
            if start < cursor:  # overlaps an earlier match in this pass
                continue
            pieces.append(text[cursor:start])
            pieces.append(f"[{family}:{name}]")
            flags.append(
                {
                    "rule": f"{family}:{name}",
                    "pass": passes,
                    "start": len(text[:start].encode("utf-8")),
                    "end": len(text[:end].encode("utf-8")),
                }
            )
            cursor = end
        pieces.append(text[cursor:])
        text = "".join(pieces)


def sanitize_content(content: Any, rules=None) -> tuple[Any, tuple[dict, ...]]:
    """Sanitize every text leaf of a document; flags gain a ``path`` key."""
    flags: list[dict] = []

    def walk(value: Any, path: str) -> Any:
        if isinstance(value, str):
            res = sanitize(value, rules)
            flags.extend({**f, "path": path} for f in res.flags)
            return res.clean
        if isinstance(value, Mapping):
            return {k: walk(v, f"{path}.{k}" if path else str(k)) for k, v in sorted(value.items())}
        if isinstance(value, (list, tuple)):
            return [walk(v, f"{path}[{i}]") for i, v in enumerate(value)]
        return value

    return walk(content, ""), tuple(flags)


# ---------------------------------------------------------------- store


@dataclass(frozen=True)
class WriterCapability:
    writer_id: str
    curated: bool = False
    may_write: bool = True


@dataclass(frozen=True)
class WriteReceipt:
    id: str
    version: int


class MemoryStore:
    """Versioned record store. Writes and promotions are serialized; reads use snapshots.

    With ``path`` set, every stored version is appended to that file as one
    canonical JSON line.
    """

    def __init__(self, log=None, path: str | Path | None = None, rules=None) -> None:
        self.log = log
        self.path = Path(path) if path is not None else None
        self.rules = rules
        self._records: dict[str, MemoryRecord] = {}
        self.history: list[MemoryRecord] = []
        self._lock = threading.Lock()

    @property
    def now(self) -> int:
        return self.log.clock.now if self.log is not None else 0

    def _emit(self, kind: str, payload: Mapping[str, Any]) -> None:
        if self.log is not None:
            self.log.append("memory", kind, payload)

    def _store(self, record: MemoryRecord) -> None:
        self._records[record.id] = record
        self.history.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(canonical_json(record.to_doc()) + "\n")

    def get(self, record_id: str) -> MemoryRecord:
        try:
            return self._records[record_id]
        except KeyError:
            raise UnknownKey(record_id) from None

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def snapshot(self) -> dict[str, MemoryRecord]:
        with self._lock:
            return dict(self._records)

    def records(self) -> list[MemoryRecord]:
        snap = self.snapshot()
        return [snap[k] for k in sorted(snap)]

    def write(self, record: MemoryRecord, policy_id: str, writer: WriterCapability) -> WriteReceipt:
        if not writer.may_write:
            self._emit("WriteDenied", {"id": record.id, "writer": writer.writer_id, "reason": "no_write_capability"})
            raise CapabilityDenied(f"{writer.writer_id} may not write memory")
        if not writer.curated and record.tier != UNTRUSTED:
            self._emit(
                "WriteDenied", {"id": record.id, "writer": writer.writer_id, "reason": "uncurated_tier", "tier": record.tier}
            )
            raise CapabilityDenied(f"uncurated writer {writer.writer_id} cannot write tier {record.tier}")
        if record.content_hash != content_hash(record.content):
            self._emit("WriteDenied", {"id": record.id, "writer": writer.writer_id, "reason": "hash_mismatch"})
            raise HashMismatch(record.id)
        content, sflags = record.content, tuple(record.sanitization_flags)
        if record.tier == UNTRUSTED:
            content, new_flags = sanitize_content(record.content, self.rules)
            sflags = sflags + new_flags
        with self._lock:
            prev = self._records.get(record.id)
            candidate = replace(
                record,
                content=content,
                content_hash=content_hash(content),
                sanitization_flags=sflags,
                status=DRAFT,
                policy_id=policy_id,
                corroborations=frozenset({record.source_uri}) if record.source_uri else frozenset(),
                flags=(),
                version=1 if prev is None else prev.version + 1,
            )
            if prev is not None and _same_write(prev, candidate):
                self._emit(
                    "MemoryWrite",
                    {**prev.provenance(), "policy_id": policy_id, "writer": writer.writer_id, "unchanged": True},
                )
                return WriteReceipt(prev.id, prev.version)
            self._store(candidate)
        self._emit(
            "MemoryWrite",
            {
                **candidate.provenance(),
                "policy_id": policy_id,
                "writer": writer.writer_id,
                "status": DRAFT,
                "kind": candidate.kind,
                "sanitization_flags": [dict(f) for f in sflags],
                "unchanged": False,
            },
        )
        return WriteReceipt(candidate.id, candidate.version)

    def corroborate(self, record_id: str, source_uri: str) -> MemoryRecord:
        with self._lock:
            rec = self.get(record_id)
            updated = replace(rec, corroborations=rec.corroborations | {source_uri})
            if updated != rec:
                self._store(updated)
        self._emit(
            "Corroborated", {"id": record_id, "source_uri": source_uri, "sources": sorted(updated.corroborations)}
        )
        return updated

    def promote(self, record_id: str, verdict) -> MemoryRecord:
        """Draft -> Verified on a passing verdict; Verified -> Published with two distinct sources."""
        with self._lock:
            rec = self.get(record_id)
            base = {"id": record_id, "version": rec.version, "from": rec.status, "verdict_ref": verdict.verdict_id}
            if rec.status == PUBLISHED:
                self._emit("PromotionRejected", {**base, "reason": "already_published"})
                raise MemoryFault(f"{record_id} is already published")
            if not verdict.passed or verdict.subject_ref != record_id:
                reason = "verdict_failed" if verdict.passed is False else "verdict_subject_mismatch"
                flagged = replace(rec, flags=rec.flags + (f"{reason}:{verdict.verdict_id}",))
                self._store(flagged)
                self._emit("PromotionRejected", {**base, "reason": reason, "reason_codes": list(verdict.reason_codes)})
                raise VerdictFailed(f"{record_id}: {reason}")
            if rec.status == VERIFIED and len(rec.corroborations) < 2:
                self._emit(
                    "PromotionRejected",
                    {**base, "reason": "insufficient_corroboration", "sources": sorted(rec.corroborations)},
                )
                raise InsufficientCorroboration(f"{record_id} has {len(rec.corroborations)} source(s)")
            target = VERIFIED if rec.status == DRAFT else PUBLISHED
            updated = replace(rec, status=target)
            self._store(updated)
        self._emit("Promotion", {**base, "to": target, "sources": sorted(updated.corroborations)})
        return updated

    @classmethod
    def load(cls, path: str | Path, log=None) -> "MemoryStore":
        """Rebuild a store from its append-only file (last line per id wins)."""
        store = cls(log=log)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = MemoryRecord.from_doc(json.loads(line))
                store._records[rec.id] = rec
                store.history.append(rec)
        store.path = Path(path)
        return store


def _same_write(a: MemoryRecord, b: MemoryRecord) -> bool:
    keys = ("content_hash", "source_uri", "created_at", "tier", "validity", "ttl", "policy_id", "back_pointers", "kind")
    return all(getattr(a, k) == getattr(b, k) for k in keys)


def corpus_hash(store: MemoryStore) -> str:
    """Change signal for the corpus: any write, rewrite or promotion alters it."""
    return hash_doc([[r.id, r.version, r.content_hash, r.status] for r in store.records()])


# ---------------------------------------------------------------- retrieval

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokens(value: Any) -> set[str]:
    if isinstance(value, str):
        return {t.lower() for t in _TOKEN.findall(value)}
    if isinstance(value, Mapping):
        out: set[str] = set()
        for v in value.values():
            out |= tokens(v)
        return out
    if isinstance(value, (list, tuple)):
        out = set()
        for v in value:
            out |= tokens(v)
        return out
    if value is None or isinstance(value, bool):
        return set()
    return {canonical_json(value)}


def lexical_overlap(query: str, content: Any) -> Fraction:
    """Share of distinct query tokens that also occur in ``content``."""
    q = tokens(query)
    if not q:
        return Fraction(0)
    return Fraction(len(q & tokens(content)), len(q))


def decay(age: int, half_life: int) -> Fraction:
    return Fraction(1, 2 ** (max(age, 0) // half_life))


@dataclass(frozen=True)
class RetrievalPolicy:
    policy_id: str
    top_k: int = 5
    tier_weights: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_TIER_WEIGHTS))
    recency_half_life: int = 100
    require_citation: bool = True
    context: Mapping[str, Any] = field(default_factory=dict)
    statuses: tuple[str, ...] = (PUBLISHED,)

    def check(self) -> None:
        if not isinstance(self.top_k, int) or self.top_k < 1:
            raise MalformedPolicy("top_k must be >= 1")
        if not isinstance(self.recency_half_life, int) or self.recency_half_life < 1:
            raise MalformedPolicy("recency_half_life must be a positive tick count")
        w = self.tier_weights
        if set(w) != set(TIERS):
            raise MalformedPolicy("tier_weights must cover Gold, Silver and Untrusted")
        if any(not isinstance(v, (int, Fraction)) or isinstance(v, bool) or v <= 0 for v in w.values()):
            raise MalformedPolicy("tier weights must be positive integers")
        if not w[GOLD] >= w[SILVER] >= w[UNTRUSTED]:
            raise MalformedPolicy("tier weights must respect Gold >= Silver >= Untrusted")

    def to_doc(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "top_k": self.top_k,
            "tier_weights": {k: int(v) for k, v in self.tier_weights.items()},
            "recency_half_life": self.recency_half_life,
            "require_citation": self.require_citation,
            "context": dict(self.context),
            "statuses": list(self.statuses),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "RetrievalPolicy":
        kwargs = dict(doc)
        if "statuses" in kwargs:
            kwargs["statuses"] = tuple(kwargs["statuses"])
        return cls(**kwargs)


_ABSENT = object()


def admissible(record: MemoryRecord, policy: RetrievalPolicy, now: int) -> bool:
    """Freshness, validity, status and citation filters; no ranking."""
    if record.status not in policy.statuses:
        return False
    if record.ttl is not None and now - record.created_at > record.ttl:
        return False
    if any(policy.context.get(k, _ABSENT) != v for k, v in record.validity.items()):
        return False
    if policy.require_citation and not record.source_uri:
        return False
    return True


def score(query: str, record: MemoryRecord, policy: RetrievalPolicy, now: int) -> Fraction:
    return (
        lexical_overlap(query, record.content)
        * policy.tier_weights[record.tier]
        * decay(now - record.created_at, policy.recency_half_life)
    )


@dataclass(frozen=True)
class RetrievalResult:
    items: tuple[tuple[MemoryRecord, Fraction], ...]
    policy_id: str

    @property
    def records(self) -> list[MemoryRecord]:
        return [r for r, _ in self.items]


def retrieve(query: str, policy: RetrievalPolicy, store: MemoryStore | Mapping[str, MemoryRecord], now: int, *, log=None) -> RetrievalResult:
    policy.check()
    snap = store.snapshot() if isinstance(store, MemoryStore) else dict(store)
    scored = []
    for rec in snap.values():
        if not admissible(rec, policy, now):
            continue
        s = score(query, rec, policy, now)
        if s > 0:
            scored.append((rec, s))
    scored.sort(key=lambda rs: (-rs[1], -TIER_RANK[rs[0].tier], -rs[0].created_at, rs[0].id))
    result = RetrievalResult(tuple(scored[: policy.top_k]), policy.policy_id)
    if log is not None:
        log.append(
            "memory",
            "Retrieval",
            {
                "query": query,
                "policy_id": policy.policy_id,
                "policy": policy.to_doc(),
                "now": now,
                "items": [
                    {**r.provenance(), "score": str(s), "ttl": r.ttl, "validity": dict(r.validity), "status": r.status}
                    for r, s in result.items
                ],
            },
        )
    return result


# ---------------------------------------------------------------- working set


@dataclass(frozen=True)
class WorkingEntry:
    record_id: str
    last_access: int
    access_count: int

    def priority(self, now: int, half_life: int) -> Fraction:
        return self.access_count * decay(now - self.last_access, half_life)


@dataclass(frozen=True)
class WorkingSet:
    capacity: int
    entries: tuple[WorkingEntry, ...] = ()
    half_life: int = 8

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("working set capacity must be >= 1")

    def ids(self) -> list[str]:
        return [e.record_id for e in self.entries]

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.ids()


def _victim(entries: Sequence[WorkingEntry], now: int, half_life: int) -> WorkingEntry:
    return min(entries, key=lambda e: (e.priority(now, half_life), e.last_access, e.record_id))


def page_in(keys: Sequence[str], ws: WorkingSet, store: MemoryStore, now: int, *, log=None) -> WorkingSet:
    for key in keys:
        if key not in store:
            raise UnknownKey(key)
    entries = {e.record_id: e for e in ws.entries}
    for key in keys:
        old = entries.get(key)
        entries[key] = WorkingEntry(key, now, 1 if old is None else old.access_count + 1)
        if log is not None:
            log.append(
                "memory",
                "PageIn",
                {"key": key, "access_count": entries[key].access_count, "priority": str(entries[key].priority(now, ws.half_life))},
            )
        while len(entries) > ws.capacity:
            victim = _victim(list(entries.values()), now, ws.half_life)
            del entries[victim.record_id]
            if log is not None:
                log.append(
                    "memory",
                    "Evicted",
                    {"key": victim.record_id, "reason": "capacity", "priority": str(victim.priority(now, ws.half_life))},
                )
    return replace(ws, entries=tuple(sorted(entries.values(), key=lambda e: e.record_id)))


def evict(keys: Sequence[str], reason: str, ws: WorkingSet, *, log=None) -> WorkingSet:
    present = set(ws.ids())
    for key in keys:
        if key not in present:
            raise UnknownKey(key)
    drop = set(keys)
    for key in keys:
        if log is not None:
            log.append("memory", "Evicted", {"key": key, "reason": reason})
    return replace(ws, entries=tuple(e for e in ws.entries if e.record_id not in drop))


# ---------------------------------------------------------------- compaction

Summarizer = Callable[[Sequence[MemoryRecord]], Any]


def default_summarizer(records: Sequence[MemoryRecord]) -> dict:
    """Fold episode records into a task -> actions -> outcomes document."""
    tasks, actions, outcomes = [], [], []
    for r in records:
        c = r.content if isinstance(r.content, Mapping) else {"note": r.content}
        if "task" in c and c["task"] not in tasks:
            tasks.append(c["task"])
        if "action" in c:
            actions.append({"ref": r.id, "action": c["action"]})
        if "outcome" in c:
            outcomes.append({"ref": r.id, "outcome": c["outcome"]})
        if not {"task", "action", "outcome"} & set(c):
            outcomes.append({"ref": r.id, "outcome": c})
    return {"task": tasks, "actions": actions, "outcomes": outcomes}


def compact(
    records: Sequence[MemoryRecord], summarizer: Summarizer = default_summarizer, *, policy_id: str = "compaction-v1", log=None
) -> MemoryRecord:
    """Deterministic summary of ``records``; same inputs (by hash) give the same record."""
    if not records:
        raise EmptyInput("nothing to compact")
    for r in records:
        if r.status != PUBLISHED and r.kind != EPISODIC:
            raise ValueError(f"{r.id} is neither published nor episodic")
    ordered = sorted(records, key=lambda r: (r.id, r.content_hash))
    key = hash_doc([[r.id, r.content_hash] for r in ordered])
    content = summarizer(ordered)
    summary = MemoryRecord(
        id="sum-" + key[:16],
        content=content,
        source_uri="summary:" + key[:16],
        created_at=max(r.created_at for r in ordered),
        tier=min((r.tier for r in ordered), key=TIER_RANK.__getitem__),
        status=DRAFT,
        policy_id=policy_id,
        back_pointers=tuple(r.id for r in ordered),
        kind=SUMMARY,
    )
    if log is not None:
        log.append(
            "memory",
            "Compacted",
            {"summary_id": summary.id, "content_hash": summary.content_hash, "back_pointers": list(summary.back_pointers)},
        )
    return summary


# ---------------------------------------------------------------- self-tests


def self_test(corpus: Mapping[str, Any], rules=None) -> list[str]:
    """Run poisoning probes and staleness alarms; returns failure descriptions."""
    failures = []
    for probe in corpus.get("poisoning_probes", ()):
        res = sanitize(probe["text"], rules)
        if len(res.flags) < probe.get("min_flags", 1):
            failures.append(f"probe {probe['id']} not neutralized")
        if sanitize(res.clean, rules).flags:
            failures.append(f"probe {probe['id']} not idempotent")
    for alarm in corpus.get("staleness_alarms", ()):
        rec = MemoryRecord.from_doc({**alarm["record"], "status": PUBLISHED})
        policy = RetrievalPolicy.from_doc(alarm["policy"])
        if admissible(rec, policy, alarm["now"]):
            failures.append(f"stale record {rec.id} admitted")
    return failures
