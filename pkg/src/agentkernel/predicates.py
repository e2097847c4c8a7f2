"""Pre/postcondition descriptors: ``{"path": ..., "op": ..., "value": ...}``.

``op`` is one of ``== != < <= > >= exists``; ``≤``/``≥`` are accepted as
aliases. A missing path makes every comparison false.
"""

from __future__ import annotations

import operator
from typing import Any, Callable, Mapping

from .contracts import resolve_path

MISSING = object()

OPS: dict[str, Callable[[Any, Any], bool]] = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "≤": operator.le,
    "≥": operator.ge,
}


class PredicateError(ValueError):
    pass


def check_descriptor(desc: Mapping[str, Any]) -> None:
    if not isinstance(desc, Mapping) or "path" not in desc or "op" not in desc:
        raise PredicateError(f"malformed predicate {desc!r}")
    if desc["op"] != "exists" and desc["op"] not in OPS:
        raise PredicateError(f"unknown operator {desc['op']!r}")
    if desc["op"] != "exists" and "value" not in desc:
        raise PredicateError(f"predicate on {desc['path']} needs a value")


def evaluate(desc: Mapping[str, Any], doc: Any, resolve: Callable[[Any, str], Any] | None = None) -> bool:
    check_descriptor(desc)
    if resolve is None:
        value = resolve_path(doc, desc["path"], MISSING)
    else:
        value = resolve(doc, desc["path"])
    if value is MISSING:
        return False
    if desc["op"] == "exists":
        return value is not None
    try:
        return bool(OPS[desc["op"]](value, desc["value"]))
    except TypeError:
        return False


def describe(desc: Mapping[str, Any]) -> str:
    if desc["op"] == "exists":
        return f"{desc['path']} exists"
    return f"{desc['path']} {desc['op']} {desc['value']!r}"
