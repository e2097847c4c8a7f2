"""Command-line entry point: ``agentkernel {run,replay,verify,inject,dialogue}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..audit import AuditError, TruncatedTrace, VersionMismatch, parse_header, split_trace, verify_trace_file
from ..canonical import canonical_json, hash_doc
from .dialogue import SCRIPTS, dialogue_path, load_dialogue_doc, run_dialogue_doc
from .scenario import EXIT_USAGE, ConfigError, ScenarioConfig, inject, replay_trace, run_episode, scenario_path, write_trace

EPILOG = """\
exit codes:
  run / inject / dialogue
    0   goal_satisfied, consensus_reached, convergence
    10  budget_exceeded, budget_exhausted
    20  safety_halt, operator_abort
    30  verifier_rejection, contradiction
    40  non_convergence, deadlock
  verify
    0   chain intact
    1   chain broken (first bad seq printed; -1 means the header)
  replay
    0   identical
    1   divergence (seq printed) or truncated trace
    2   component versions or config hash differ
  any
    64  usage error, malformed config or missing fixture
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2
        self.print_help(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="agentkernel",
        description="Run, replay and verify governed agent episodes.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def episode_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", default=".", help="directory for the <episode_id>.trace file (default: .)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--non-interactive", action="store_true", help="auto-deny operator approvals")

    run = sub.add_parser("run", help="run a diagnosis episode", epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("config", help="scenario config file or packaged scenario name (e.g. nominal, high_risk)")
    episode_flags(run)

    rep = sub.add_parser("replay", help="re-run a trace against playback adapters")
    rep.add_argument("trace")
    rep.add_argument("--config", help="refuse unless this config hashes to the recorded config_hash")

    ver = sub.add_parser("verify", help="check the hash chain of a trace")
    ver.add_argument("trace")

    inj = sub.add_parser("inject", help="run a scenario with one extra fault")
    inj.add_argument("config", help="scenario config file or packaged scenario name")
    inj.add_argument("fault", help="tool:mode[:index[:count]]; modes: schema_mismatch, transient_flake, missing_data, permanent_failure")
    inj.add_argument("--save", help="also write the resolved config with the fault appended")
    episode_flags(inj)

    dlg = sub.add_parser("dialogue", help="run a scripted triage debate")
    dlg.add_argument("config", help=f"dialogue config file or one of: {', '.join(SCRIPTS)}")
    dlg.add_argument("--out", help="directory for the dialogue trace")
    return parser


def _episode(config: ScenarioConfig, args) -> int:
    episode = run_episode(config)
    path = write_trace(episode, args.out)
    print(json.dumps({**episode.summary, "trace": str(path)}, indent=2, sort_keys=True))
    return episode.exit_code


def _resolve(config: str) -> Path:
    """A config path, or the name of a packaged scenario such as ``high_risk``."""
    path = Path(config)
    if path.is_file() or path.suffix:
        return path
    return scenario_path(config)


def _load(args) -> ScenarioConfig:
    return ScenarioConfig.load(_resolve(args.config), seed=args.seed, interactive=False if args.non_interactive else None)


def cmd_run(args) -> int:
    return _episode(_load(args), args)


def cmd_inject(args) -> int:
    config = inject(_load(args), args.fault)
    if args.save:
        Path(args.save).write_text(canonical_json(config.to_doc()) + "\n", encoding="utf-8")
    return _episode(config, args)


def cmd_verify(args) -> int:
    try:
        report = verify_trace_file(args.trace)
    except AuditError as exc:
        print(f"broken: {exc}")
        return 1
    if report.ok:
        print("ok")
        return 0
    print(f"broken: first_bad_seq={report.first_bad_seq} ({report.reason})")
    return 1


def cmd_replay(args) -> int:
    config_hash = None
    if args.config:
        header = parse_header(split_trace(Path(args.trace).read_bytes())[0])
        if header.get("kind") == "dialogue":
            config_hash = hash_doc(load_dialogue_doc(args.config))
        else:
            config_hash = ScenarioConfig.load(_resolve(args.config), seed=header.get("seed")).config_hash()
    try:
        report = replay_trace(args.trace, config_hash)
    except VersionMismatch as exc:
        print(f"version mismatch: {exc}")
        return 2
    except TruncatedTrace as exc:
        print(f"truncated: {exc}")
        return 1
    if report.identical:
        print(f"identical=true events={report.events_compared}")
        return 0
    d = report.first_divergence
    print(f"identical=false divergence seq={d.seq} field={d.field} component={d.component or '-'}")
    return 1


def cmd_dialogue(args) -> int:
    path = dialogue_path(args.config) if args.config in SCRIPTS else args.config
    episode = run_dialogue_doc(load_dialogue_doc(path))
    summary = episode.summary
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary["trace"] = str(episode.trace.write(out / f"{summary['episode_id']}.trace"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return episode.exit_code


COMMANDS = {"run": cmd_run, "replay": cmd_replay, "verify": cmd_verify, "inject": cmd_inject, "dialogue": cmd_dialogue}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, AuditError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
