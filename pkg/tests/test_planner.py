from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentkernel.assurance import BUDGET_EXCEEDED, BUDGET_EXHAUSTED, CONTRADICTION, CONVERGENCE, VERIFIER_REJECTION, Budget
from agentkernel.contracts import FieldSchema, ToolRegistry
from agentkernel.gateway import Gateway
from agentkernel.planner import (
    ACTION,
    OBSERVATION,
    THOUGHT,
    CallTemplate,
    Dispatched,
    Governor,
    MissingOutput,
    PathNotFound,
    Placeholder,
    Plan,
    PlanStep,
    Proposal,
    ReactEntry,
    ReactState,
    Refused,
    ScriptedProposer,
    ScriptedTree,
    SearchBudget,
    bind_step,
    react_step,
    run_react,
    search,
    transcript_grammar_ok,
    validate_plan,
)
from fuzz import random_tree, tree_depth
from helpers import CountingAdapter, make_call, make_spec, make_token
from oracles import exhaustive_best

NUM = FieldSchema("x", "decimal", minimum=0)


def registry():
    return ToolRegistry([make_spec("read", schema=[NUM]), make_spec("act", "ActuateReversible", schema=[NUM]), make_spec("undo", "ActuateReversible")])


def step(sid, tool="read", args=None, **kw):
    return PlanStep(sid, sid, CallTemplate(tool, "1", args if args is not None else {"x": 1}), **kw)


def ph(ref):
    return Placeholder.parse(ref).to_doc()


# ---------------------------------------------------------------- validation and binding


def test_empty_plan_is_valid_with_zero_cost():
    plan = Plan("p")
    assert validate_plan(plan, registry(), make_token(), Budget()) == []
    assert plan.total_cost_estimate == 0


def test_reference_to_later_step_is_dangling():
    plan = Plan("p", (step("E1", args={"x": ph("#E2.v")}), step("E2")))
    codes = [(e.code, e.step_id) for e in validate_plan(plan, registry(), make_token(), Budget())]
    assert ("DanglingPlaceholder", "E1") in codes


def test_cost_over_budget():
    plan = Plan("p", (step("E1", cost_estimate=70), step("E2", cost_estimate=50)))
    errs = validate_plan(plan, registry(), make_token(), Budget(max_cost_units=100))
    assert [e.code for e in errs] == ["CostExceedsBudget"]
    assert errs[0].detail == "120>100"


def test_static_problems_listed():
    plan = Plan(
        "p",
        (
            step("E1", tool="nope"),
            step("E2", tool="act"),
            step("E2", args={"x": -1}),
        ),
    )
    codes = [e.code for e in validate_plan(plan, registry(), make_token(allow=("read",), ceiling="ReadOnly"), Budget())]
    assert codes.count("DuplicateStep") == 1
    assert {"UnknownTool", "StepUnauthorized", "MissingCompensation", "InvalidStepArgs"} <= set(codes)


def test_validation_is_logged_and_token_untouched(log):
    token = make_token(max_invocations=1)
    plan = Plan("p", (step("E1"), step("E2")))
    assert validate_plan(plan, registry(), token, Budget(), log=log) == []
    assert token.invocations_used == 0
    assert log.events[-1].payload["plan_hash"] == plan.plan_hash()


def test_binding_without_placeholders_is_verbatim():
    s = step("E1", args={"x": 3, "tag": ["a", {"b": 1}]})
    assert bind_step(s, {}).args == {"x": 3, "tag": ["a", {"b": 1}]}


def test_binding_resolves_path():
    s = step("E2", args={"x": ph("#E1.risk")})
    assert bind_step(s, {"E1": {"risk": 0.7}}).args == {"x": 0.7}


def test_binding_missing_path_or_output():
    s = step("E2", args={"x": ph("#E1.risk")})
    with pytest.raises(PathNotFound):
        bind_step(s, {"E1": {"other": 1}})
    with pytest.raises(MissingOutput):
        bind_step(s, {})


# ---------------------------------------------------------------- think/act loop


class Loop:
    def __init__(self, log, max_steps=None, simulate=None):
        self.reg = registry()
        self.adapter = CountingAdapter()
        gw = Gateway(self.reg, log)
        for spec in self.reg.specs():
            gw.register_adapter(spec.name, spec.version, self.adapter)
        self.governor = Governor(self.reg, make_token(), gw, log, budget=Budget(max_steps=max_steps), simulate=simulate)


def test_step_cap_halts_exactly(log):
    loop = Loop(log, max_steps=5)
    proposer = ScriptedProposer([Proposal("look", make_call("read", {"x": 1}))], loop=True)
    state, why = run_react(proposer, loop.governor)
    assert (state.steps_taken, why.code, why.detail) == (5, BUDGET_EXCEEDED, "steps")
    assert len(loop.adapter.calls) == 5


def test_ill_typed_action_is_refused_then_reconsulted(log):
    loop = Loop(log)
    proposer = ScriptedProposer([Proposal("bad", make_call("read", {"x": "high"}))], loop=True)
    state, nxt = react_step(ReactState(), proposer, loop.governor)
    assert isinstance(nxt, Refused) and nxt.errors[0].code == "TypeMismatch"
    assert state.transcript[-1].kind == OBSERVATION
    state, why = run_react(proposer, loop.governor, state)
    assert why.code == VERIFIER_REJECTION and state.steps_taken == 3
    assert log.of_kind("RepairHint")
    assert loop.adapter.calls == []


def test_valid_read_action_dispatches(log):
    loop = Loop(log)
    proposer = ScriptedProposer([Proposal("look", make_call("read", {"x": 2}))])
    state, nxt = react_step(ReactState(), proposer, loop.governor)
    assert isinstance(nxt, Dispatched)
    assert [e.kind for e in state.transcript] == [THOUGHT, ACTION, OBSERVATION]
    assert state.transcript[-1].payload["status"] == "Ok"


def test_actuation_needs_passing_simulation(log):
    loop = Loop(log)
    proposer = ScriptedProposer([Proposal("push", make_call("act", {"x": 1}, key="k"))])
    _, nxt = react_step(ReactState(), proposer, loop.governor)
    assert isinstance(nxt, Refused) and nxt.errors[0].code == "SimulationGateUnsatisfied"
    assert loop.adapter.calls == []


def test_finish_proposal_stops_with_goal():
    from agentkernel.audit import AuditLog

    loop = Loop(AuditLog())
    state, why = run_react(ScriptedProposer([Proposal("done", finish={"answer": 1})]), loop.governor)
    assert why.code == "goal_satisfied" and state.steps_taken == 1


kinds = st.sampled_from(["read_ok", "read_bad", "think"])


@settings(max_examples=60, deadline=None)
@given(st.lists(kinds, min_size=1, max_size=8), st.integers(1, 10))
def test_transcript_grammar_holds(script, cap):
    from agentkernel.audit import AuditLog

    loop = Loop(AuditLog(), max_steps=cap)
    proposals = {
        "read_ok": Proposal("t", make_call("read", {"x": 1})),
        "read_bad": Proposal("t", make_call("read", {"x": -1})),
        "think": Proposal("t"),
    }
    state, why = run_react(ScriptedProposer([proposals[k] for k in script], loop=True), loop.governor)
    assert transcript_grammar_ok(state.transcript)
    assert state.steps_taken <= cap


def test_grammar_checker_rejects_bad_shapes():
    t, a, o = ReactEntry(THOUGHT, ""), ReactEntry(ACTION, {}), ReactEntry(OBSERVATION, {})
    assert transcript_grammar_ok([t, a, o, t, o, t])
    assert not transcript_grammar_ok([t, a])
    assert not transcript_grammar_ok([a, o])
    assert not transcript_grammar_ok([t, o, o])


# ---------------------------------------------------------------- search


def table(edges, scores):
    return ScriptedTree.from_edges(edges, scores)


def test_zero_expansions_returns_root():
    tree = table({"r": ["a"]}, {"r": 1, "a": 5})
    res = search("r", tree.propose, tree.score, SearchBudget(0, 3, 2))
    assert res.best.content == "r" and res.why_stopped.code == BUDGET_EXHAUSTED


def test_two_level_tree_with_beam_two():
    edges = {"r": ["a", "b", "c"], "a": ["a1"], "b": ["b1"], "c": ["c1"]}
    scores = {"r": 0, "a": 5, "b": 4, "c": 1, "a1": 2, "b1": 9, "c1": 99}
    tree = table(edges, scores)
    res = search("r", tree.propose, tree.score, SearchBudget(10, 2, 2))
    # c is cut from the beam, so c1 is never generated
    assert res.best.content == "b1"
    assert "c1" not in [n.content for n in res.nodes]
    assert res.why_stopped.code == CONVERGENCE


def test_all_infeasible_is_contradiction():
    tree = table({"r": ["a", "b"]}, {"r": 1})
    res = search("r", tree.propose, tree.score, SearchBudget(10, 3, 2))
    assert res.why_stopped.code == CONTRADICTION and res.best.content == "r"


def test_search_is_logged_and_deterministic(log):
    edges = {"r": ["a", "b"], "a": ["c"]}
    tree = table(edges, {"r": 0, "a": 1, "b": 1, "c": 2})
    a = search("r", tree.propose, tree.score, SearchBudget(5, 3, 1), log=log)
    b = search("r", tree.propose, tree.score, SearchBudget(5, 3, 1))
    assert a == b and a.best.content == "c"
    assert log.events[-1].payload["loop"] == "search"


def test_budget_rejects_negative_fields():
    with pytest.raises(ValueError):
        SearchBudget(-1, 1, 1)
    with pytest.raises(ValueError):
        SearchBudget(1, 1, 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32))
def test_search_matches_exhaustive_when_unconstrained(seed):
    root, children, scores = random_tree(random.Random(seed), 40)
    n = len(scores)
    tree = table(children, scores)
    res = search(root, tree.propose, tree.score, SearchBudget(n, tree_depth(children), n, n))
    assert res.best.content == exhaustive_best(root, children, scores, tree_depth(children))
