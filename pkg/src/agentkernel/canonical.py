"""Canonical JSON serialization and digests.

Every hash in the kernel is computed over the canonical form produced here:
sorted keys, no insignificant whitespace, UTF-8, integers as shortest
decimal and floats as their shortest round-trip representation.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

DEFAULT_HASH = "sha256"


def _normalize(obj: Any) -> Any:
    if isinstance(obj, (list, tuple)):
        return [_normalize(x) for x in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_normalize(x) for x in obj)
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if hasattr(obj, "to_doc"):
        return _normalize(obj.to_doc())
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(
        _normalize(obj),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def canonical_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def digest(data: bytes | str, algo: str = DEFAULT_HASH) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.new(algo, data).hexdigest()


def hash_doc(obj: Any, algo: str = DEFAULT_HASH) -> str:
    return digest(canonical_bytes(obj), algo)


def zero_digest(algo: str = DEFAULT_HASH) -> str:
    return "0" * (hashlib.new(algo).digest_size * 2)


def format_number(value: Any) -> str:
    """Render a scalar the way it appears in canonical JSON (strings unquoted)."""
    if isinstance(value, str):
        return value
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)  # nan/inf have no JSON form but still need a readable error text
    return canonical_json(value)
