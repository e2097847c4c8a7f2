from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentkernel.assurance import BUDGET_EXCEEDED, CONSENSUS_REACHED, DEADLOCK, NON_CONVERGENCE, Budget
from agentkernel.protocol import (
    CRITIQUE,
    DECISION,
    EVIDENCE,
    INFO,
    PROPOSAL,
    SPEECH_ACTS,
    Accepted,
    Arbiter,
    Dialogue,
    DialogueConfig,
    Message,
    NoProposals,
    ProtocolViolation,
    RoleDescriptor,
    ScriptedAgent,
    arbitrate,
    detect_fixed_point,
    export_dag,
    run_dialogue,
)
from fuzz import random_dialogue
from helpers import make_token

PLANNER = RoleDescriptor("planner", may_propose=True)
CRITIC = RoleDescriptor("critic", may_critique=True)
WORKER = RoleDescriptor("worker", per_role_budget=Budget(max_steps=2))
JUDGE = RoleDescriptor("judge", may_decide=True)


def dialogue(log=None, **cfg):
    return Dialogue([PLANNER, CRITIC, WORKER, JUDGE], DialogueConfig(**cfg), log=log)


def test_speech_acts_literal():
    assert SPEECH_ACTS == ("Proposal", "Critique", "Evidence", "Decision", "Info")


def test_worker_cannot_decide(log):
    res = dialogue(log).post(Message("worker", DECISION, {"adopt": "x"}))
    assert isinstance(res, ProtocolViolation) and res.code == "UnauthorizedSpeechAct"
    assert log.events[-1].payload["code"] == "UnauthorizedSpeechAct"


def test_cited_proposal_is_sequenced():
    dlg = dialogue()
    res = dlg.post(Message("planner", PROPOSAL, {"plan": "A"}, ("e1",)))
    assert isinstance(res, Accepted) and res.message.seq == 0
    assert dlg.post(Message("planner", PROPOSAL, {"plan": "B"}, ("e2",))).message.seq == 1


def test_uncited_proposal_rejected():
    assert dialogue().post(Message("planner", PROPOSAL, {"plan": "A"})).code == "MissingEvidence"
    assert isinstance(dialogue(citation_required=False).post(Message("planner", PROPOSAL, {"plan": "A"})), Accepted)


def test_third_message_over_role_budget():
    dlg = dialogue()
    assert isinstance(dlg.post(Message("worker", INFO, {"n": 1})), Accepted)
    assert isinstance(dlg.post(Message("worker", EVIDENCE, {"n": 2})), Accepted)
    assert dlg.post(Message("worker", INFO, {"n": 3})).code == "RoleBudgetExceeded"


def test_unknown_role_and_authority_escalation():
    dlg = Dialogue([RoleDescriptor("w", token=make_token(allow=("read",), ceiling="ReadOnly"))], DialogueConfig())
    assert dlg.post(Message("ghost", INFO)).code == "UnknownRole"
    bad = Message("w", INFO, tool_calls=({"tool": "pump", "scope": "ActuateReversible"},))
    assert dlg.post(bad).code == "AuthorityEscalation"
    ok = Message("w", INFO, tool_calls=({"tool": "read", "scope": "ReadOnly"},))
    assert isinstance(dlg.post(ok), Accepted)


def test_quarantine_after_repeated_violations(log):
    dlg = dialogue(log, quarantine_after=3)
    for _ in range(3):
        dlg.post(Message("worker", DECISION))
    assert "worker" in dlg.muted
    assert log.of_kind("RoleQuarantined")[0].payload["violations"] == 3
    assert dlg.post(Message("worker", INFO)).code == "RoleQuarantined"


def test_single_decider_enforced():
    with pytest.raises(ValueError):
        Dialogue([JUDGE, RoleDescriptor("j2", may_decide=True)], DialogueConfig())
    with pytest.raises(ValueError):
        Dialogue([PLANNER, PLANNER], DialogueConfig())


# ---------------------------------------------------------------- runs


def agreeing():
    return {
        "planner": ScriptedAgent([{"speech_act": PROPOSAL, "payload": {"plan": "derate"}, "evidence_refs": ["e1"]}]),
        "critic": ScriptedAgent([{"speech_act": INFO, "payload": {"accept": "$latest_proposal"}}]),
    }


def test_agreeing_script_reaches_consensus_in_one_round(log):
    out, dlg = run_dialogue([PLANNER, CRITIC], agreeing(), DialogueConfig(), log=log)
    assert (out.why_stopped.code, out.rounds_used) == (CONSENSUS_REACHED, 1)
    assert out.adopted == {"plan": "derate"}
    assert log.events[-1].kind == "WhyStopped"


def test_alternating_proposals_hit_fixed_point():
    a = {"speech_act": PROPOSAL, "payload": {"plan": "A"}, "evidence_refs": ["e1"]}
    b = {"speech_act": PROPOSAL, "payload": {"plan": "B"}, "evidence_refs": ["e2"]}
    roles = [PLANNER, RoleDescriptor("rival", may_propose=True)]
    agents = {"planner": ScriptedAgent([a], repeat=True), "rival": ScriptedAgent([b], repeat=True)}
    out, _ = run_dialogue(roles, agents, DialogueConfig(max_rounds=10, fixed_point_window=2))
    assert out.why_stopped.code == NON_CONVERGENCE and out.why_stopped.detail == "fixed_point"
    assert out.rounds_used == 4


def test_round_cap_gives_budget_exceeded():
    chatter = {"speech_act": INFO, "payload": {"note": "t{turn}"}}
    out, _ = run_dialogue([RoleDescriptor("w")], {"w": ScriptedAgent([chatter], repeat=True)}, DialogueConfig(max_rounds=4))
    assert (out.why_stopped.code, out.rounds_used) == (BUDGET_EXCEEDED, 4)


def test_silent_round_is_deadlock_and_arbiter_decides():
    proposals = [
        {"speech_act": PROPOSAL, "payload": {"plan": "A"}, "evidence_refs": ["weak"]},
        {"speech_act": PROPOSAL, "payload": {"plan": "B"}, "evidence_refs": ["strong"]},
    ]
    # the critic never accepts, so no proposal gains unanimous backing
    agents = {"planner": ScriptedAgent(proposals), "critic": ScriptedAgent([])}
    out, dlg = run_dialogue([PLANNER, CRITIC, JUDGE], agents, DialogueConfig(), Arbiter("judge", {"strong": True}))
    assert out.why_stopped.code == DEADLOCK and out.adopted == {"plan": "B"}
    assert dlg.transcript[-1].speech_act == DECISION and not out.low_confidence


def test_tick_cap():
    chatter = {"speech_act": INFO, "payload": {"note": "t{turn}"}}
    out, _ = run_dialogue([RoleDescriptor("w")], {"w": ScriptedAgent([chatter], repeat=True)}, DialogueConfig(max_total_ticks=3))
    assert out.why_stopped.detail == "max_total_ticks=3" and out.messages == 3


def test_runs_are_deterministic():
    a, _ = run_dialogue([PLANNER, CRITIC], agreeing(), DialogueConfig())
    b, _ = run_dialogue([PLANNER, CRITIC], agreeing(), DialogueConfig())
    assert a == b


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32))
def test_random_dialogues_respect_message_bound(seed):
    roles, agents, config = random_dialogue(random.Random(seed))
    out, dlg = run_dialogue(roles, agents, config)
    speakers = [r for r in roles if not r.may_decide]
    # one message per speaking role per round, plus a possible arbiter decision
    assert out.messages <= config.max_rounds * len(speakers) + 1
    assert out.rounds_used <= config.max_rounds
    assert [m.seq for m in dlg.transcript] == list(range(len(dlg.transcript)))


# ---------------------------------------------------------------- fixed points and arbitration


def msg(seq, rnd, plan, act=PROPOSAL, refs=("e",)):
    from agentkernel.canonical import hash_doc

    return Message("p", act, {"plan": plan}, tuple(refs), seq=seq, round=rnd, payload_hash=hash_doc({"plan": plan}))


def test_fixed_point_detection():
    assert not detect_fixed_point([], 1)
    assert detect_fixed_point([msg(0, 1, "A"), msg(1, 2, "A")], 1)
    assert not detect_fixed_point([msg(0, 1, "A"), msg(1, 2, "B")], 1)
    assert not detect_fixed_point([msg(0, 1, "A"), msg(1, 2, "A")], 2)
    assert detect_fixed_point([msg(i, i + 1, "AB"[i % 2]) for i in range(4)], 2)
    assert not detect_fixed_point([msg(0, 1, "A", INFO), msg(1, 2, "A", INFO)], 1)
    with pytest.raises(ValueError):
        detect_fixed_point([], 0)


def test_arbitrate_single_and_ties():
    one = msg(0, 1, "A")
    assert arbitrate([one], {0: Fraction(1)}).selected is one
    a, b = msg(3, 1, "A"), msg(1, 1, "B")
    d = arbitrate([a, b], {3: Fraction(1, 2), 1: Fraction(1, 2)})
    assert d.selected is b and not d.low_confidence
    assert d.rule_version == "max-evidence-then-seq/1"


def test_arbitrate_all_unverified_is_low_confidence():
    d = arbitrate([msg(0, 1, "A"), msg(1, 1, "B")], {})
    assert d.low_confidence and d.selected.seq == 0
    with pytest.raises(NoProposals):
        arbitrate([], {})


def test_export_dag_edges():
    dlg = dialogue(citation_required=True)
    p = dlg.post(Message("planner", PROPOSAL, {"plan": "A"}, ("e1",))).message
    dlg.post(Message("critic", CRITIQUE, {"target": p.payload_hash}, ("e2",)))
    dag = export_dag(dlg.transcript)
    assert {"from": "m1", "to": "m0", "type": "reply"} in dag["edges"]
    assert {n["id"] for n in dag["nodes"]} == {"m0", "m1", "a:e1", "a:e2"}
