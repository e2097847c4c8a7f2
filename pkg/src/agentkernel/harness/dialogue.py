"""Scripted triage debate between a proposer, a critic and a referee."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .. import COMPONENT_VERSIONS
from ..audit import AuditLog, EpisodeTrace
from ..canonical import DEFAULT_HASH, hash_doc
from ..protocol import DialogueOutcome, DialogueScenario, run_dialogue
from .scenario import EXIT_CODES, ConfigError, FixtureMissing, data_path

SCRIPTS = ("agreeing", "looping", "exhausting")


def dialogue_path(script: str) -> Path:
    return data_path("scenarios", f"dialogue_{script}.json")


def load_dialogue_doc(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FixtureMissing(str(path))
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return doc


@dataclass
class DialogueEpisode:
    trace: EpisodeTrace
    outcome: DialogueOutcome
    exit_code: int
    log: AuditLog

    @property
    def summary(self) -> dict:
        return {"episode_id": self.trace.header["episode_id"], **self.outcome.to_doc(), "exit_code": self.exit_code}


def run_dialogue_doc(doc: Mapping[str, Any]) -> DialogueEpisode:
    try:
        scenario = DialogueScenario.from_doc(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed dialogue config: {type(exc).__name__}: {exc}") from None
    dialogue_id = str(doc.get("dialogue_id", "dlg"))
    header = {
        "episode_id": dialogue_id,
        "kind": "dialogue",
        "seed": 0,
        "dialogue": dict(doc),
        "config_hash": hash_doc(dict(doc)),
        "component_versions": dict(COMPONENT_VERSIONS),
        "hash": DEFAULT_HASH,
    }
    log = AuditLog()
    log.append("harness", "DialogueStart", {"dialogue_id": dialogue_id, "config_hash": header["config_hash"]})
    outcome, _ = run_dialogue(
        scenario.roles, scenario.agents, scenario.config, scenario.arbiter, log=log, dialogue_id=dialogue_id
    )
    return DialogueEpisode(EpisodeTrace(header, list(log.events)), outcome, EXIT_CODES.get(outcome.why_stopped.code, 1), log)
