"""Plans with placeholder slots, the governed think/act loop and budgeted tree search.

Plans are plain data: they can be hashed, statically validated and costed
before anything runs. Placeholders are written ``{"$placeholder": "#E1.risk"}``
and name an earlier step's result plus a path into it.
"""

from __future__ import annotations

import graphlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import predicates
from .assurance import (
    BUDGET_EXHAUSTED,
    CONTRADICTION,
    CONVERGENCE,
    GOAL_SATISFIED,
    VERIFIER_REJECTION,
    Budget,
    BudgetLedger,
    WhyStopped,
    check_budget,
)
from .canonical import hash_doc
from .contracts import (
    CapabilityToken,
    Refusal,
    ToolCall,
    ToolRegistry,
    ValidationError,
    authorization_errors,
    authorize,
    check_args,
    is_actuating,
    resolve_path,
    validate_call,
)

PLACEHOLDER_KEY = "$placeholder"


class PlanFault(Exception):
    pass


class MissingOutput(PlanFault):
    def __init__(self, step_id: str) -> None:
        self.step_id = step_id
        super().__init__(f"no output recorded for step {step_id}")


class PathNotFound(PlanFault):
    def __init__(self, output_path: str) -> None:
        self.output_path = output_path
        super().__init__(f"output path {output_path} not found")


class ProposerError(PlanFault):
    pass


@dataclass(frozen=True)
class Placeholder:
    source_step: str
    output_path: str = ""

    @classmethod
    def parse(cls, text: str) -> "Placeholder":
        if not text.startswith("#") or len(text) < 2:
            raise ValueError(f"bad placeholder {text!r}")
        step, _, path = text[1:].partition(".")
        return cls(step, path)

    @property
    def ref(self) -> str:
        return f"#{self.source_step}" + (f".{self.output_path}" if self.output_path else "")

    def to_doc(self) -> dict:
        return {PLACEHOLDER_KEY: self.ref}


def as_placeholder(value: Any) -> Placeholder | None:
    if isinstance(value, Placeholder):
        return value
    if isinstance(value, Mapping) and len(value) == 1 and PLACEHOLDER_KEY in value:
        return Placeholder.parse(value[PLACEHOLDER_KEY])
    return None


def is_placeholder(value: Any) -> bool:
    return as_placeholder(value) is not None


def placeholders(template: Any) -> list[Placeholder]:
    found = []
    ph = as_placeholder(template)
    if ph is not None:
        return [ph]
    if isinstance(template, Mapping):
        for key in sorted(template):
            found.extend(placeholders(template[key]))
    elif isinstance(template, (list, tuple)):
        for item in template:
            found.extend(placeholders(item))
    return found


def _predicate_steps(desc: Mapping[str, Any]) -> str:
    return str(desc["path"]).split(".", 1)[0].split("[", 1)[0]


@dataclass(frozen=True)
class CallTemplate:
    tool_name: str
    tool_version: str
    args: Mapping[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {"tool_name": self.tool_name, "tool_version": self.tool_version, "args": dict(self.args)}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "CallTemplate":
        return cls(doc["tool_name"], doc["tool_version"], dict(doc.get("args", {})))


@dataclass(frozen=True)
class PlanStep:
    """One plan step.

    ``guard`` is an optional predicate over earlier outputs (paths start
    with a step id, e.g. ``E2.risk``); a false guard skips the step.
    Preconditions use the same form and must hold for the step to run.
    """

    step_id: str
    description: str
    call_template: CallTemplate
    preconditions: tuple[Mapping[str, Any], ...] = ()
    postconditions: tuple[Mapping[str, Any], ...] = ()
    compensation_template: CallTemplate | None = None
    cost_estimate: float = 0
    guard: Mapping[str, Any] | None = None

    def to_doc(self) -> dict:
        return {
            "step_id": self.step_id,
            "description": self.description,
            "call_template": self.call_template.to_doc(),
            "preconditions": [dict(p) for p in self.preconditions],
            "postconditions": [dict(p) for p in self.postconditions],
            "compensation_template": None if self.compensation_template is None else self.compensation_template.to_doc(),
            "cost_estimate": self.cost_estimate,
            "guard": None if self.guard is None else dict(self.guard),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PlanStep":
        comp = doc.get("compensation_template")
        return cls(
            step_id=doc["step_id"],
            description=doc.get("description", ""),
            call_template=CallTemplate.from_doc(doc["call_template"]),
            preconditions=tuple(doc.get("preconditions", ())),
            postconditions=tuple(doc.get("postconditions", ())),
            compensation_template=None if comp is None else CallTemplate.from_doc(comp),
            cost_estimate=doc.get("cost_estimate", 0),
            guard=doc.get("guard"),
        )

    def references(self) -> list[str]:
        """Step ids this step's call, guard and preconditions read from."""
        refs = [p.source_step for p in placeholders(self.call_template.args)]
        if self.guard is not None:
            refs.append(_predicate_steps(self.guard))
        refs.extend(_predicate_steps(p) for p in self.preconditions)
        return list(dict.fromkeys(refs))


@dataclass(frozen=True)
class Plan:
    plan_id: str
    steps: tuple[PlanStep, ...] = ()
    goal_ref: str = ""

    @property
    def total_cost_estimate(self) -> float:
        return sum(s.cost_estimate for s in self.steps)

    def to_doc(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "goal_ref": self.goal_ref,
            "steps": [s.to_doc() for s in self.steps],
            "total_cost_estimate": self.total_cost_estimate,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Plan":
        return cls(doc["plan_id"], tuple(PlanStep.from_doc(s) for s in doc.get("steps", ())), doc.get("goal_ref", ""))

    def plan_hash(self) -> str:
        return hash_doc(self.to_doc())

    def step(self, step_id: str) -> PlanStep:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        raise KeyError(step_id)


@dataclass(frozen=True)
class PlanError:
    code: str
    step_id: str | None
    detail: str = ""

    def to_doc(self) -> dict:
        return {"code": self.code, "step_id": self.step_id, "detail": self.detail}


def _template_errors(template: CallTemplate, registry: ToolRegistry, label: str) -> tuple[list[PlanError], Any]:
    spec = registry.get(template.tool_name, template.tool_version or None)
    if spec is None:
        return [PlanError("UnknownTool", label, f"{template.tool_name}@{template.tool_version}")], None
    errs = check_args(spec.arg_schema, template.args, deferred=is_placeholder)
    return [PlanError("InvalidStepArgs", label, f"{e.code}@{e.path}") for e in errs], spec


def validate_plan(plan: Plan, registry: ToolRegistry, token: CapabilityToken, budget: Budget, *, now: int = 0, log=None) -> list[PlanError]:
    """Every static problem with ``plan``; an empty list means the plan is accepted.

    Per-step problems come first in step order, then plan-level ones
    (cycles, cost). The authorization dry run never consumes the token.
    """
    errors: list[PlanError] = []
    position: dict[str, int] = {}
    for i, step in enumerate(plan.steps):
        if step.step_id in position:
            errors.append(PlanError("DuplicateStep", step.step_id))
        position.setdefault(step.step_id, i)

    graph: dict[str, set[str]] = {s.step_id: set() for s in plan.steps}
    for i, step in enumerate(plan.steps):
        for ref in step.references():
            if ref in position:
                graph[step.step_id].add(ref)
            if ref not in position or position[ref] >= i:
                errors.append(PlanError("DanglingPlaceholder", step.step_id, f"#{ref}"))
        comp = step.compensation_template
        if comp is not None:
            for ph in placeholders(comp.args):
                if ph.source_step not in position or position[ph.source_step] > i:
                    errors.append(PlanError("DanglingPlaceholder", step.step_id, f"compensation {ph.ref}"))

        tmpl_errors, spec = _template_errors(step.call_template, registry, step.step_id)
        errors.extend(tmpl_errors)
        if spec is None:
            continue
        probe = ToolCall("dry-run", spec.name, spec.version, step.call_template.args)
        for e in authorization_errors(probe, spec, token, now, deferred=is_placeholder):
            errors.append(PlanError("StepUnauthorized", step.step_id, f"{e.code}@{e.path}"))
        if is_actuating(spec.scope):
            if comp is None:
                errors.append(PlanError("MissingCompensation", step.step_id, spec.scope.wire))
            else:
                comp_errors, _ = _template_errors(comp, registry, step.step_id)
                errors.extend(replace(e, detail="compensation " + e.detail) for e in comp_errors)

    try:
        tuple(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        cycle = exc.args[1] if len(exc.args) > 1 else []
        errors.append(PlanError("CyclicPlan", None, "->".join(map(str, cycle))))
    if budget.max_cost_units is not None and plan.total_cost_estimate > budget.max_cost_units:
        errors.append(
            PlanError("CostExceedsBudget", None, f"{plan.total_cost_estimate}>{budget.max_cost_units}")
        )
    if log is not None:
        log.append(
            "planner",
            "PlanValidated",
            {
                "plan_id": plan.plan_id,
                "plan_hash": plan.plan_hash(),
                "cost": plan.total_cost_estimate,
                "ok": not errors,
                "errors": [e.to_doc() for e in errors],
            },
        )
    return errors


def _substitute(template: Any, outputs: Mapping[str, Any]) -> Any:
    ph = as_placeholder(template)
    if ph is not None:
        if ph.source_step not in outputs:
            raise MissingOutput(ph.source_step)
        if not ph.output_path:
            return outputs[ph.source_step]
        try:
            return resolve_path(outputs[ph.source_step], ph.output_path)
        except KeyError:
            raise PathNotFound(ph.ref) from None
    if isinstance(template, Mapping):
        return {k: _substitute(v, outputs) for k, v in template.items()}
    if isinstance(template, (list, tuple)):
        return [_substitute(v, outputs) for v in template]
    return template


def bind_template(template: CallTemplate, outputs: Mapping[str, Any], **call_fields: Any) -> ToolCall:
    return ToolCall(
        tool_name=template.tool_name,
        tool_version=template.tool_version,
        args=_substitute(template.args, outputs),
        **call_fields,
    )


def bind_step(step: PlanStep, resolved_outputs: Mapping[str, Any], **call_fields: Any) -> ToolCall:
    """Fill every placeholder of ``step`` from earlier results (pure substitution)."""
    call_fields.setdefault("call_id", step.step_id)
    call_fields.setdefault("origin", step.step_id)
    return bind_template(step.call_template, resolved_outputs, **call_fields)


def conditions_hold(conds: Iterable[Mapping[str, Any]], outputs: Mapping[str, Any]) -> list[Mapping[str, Any]]:
    """The descriptors in ``conds`` that do not hold over ``outputs``."""
    return [c for c in conds if not predicates.evaluate(c, outputs)]


@dataclass(frozen=True)
class RepairHint:
    failed_artifact_ref: str
    diagnostic: str

    def emit(self, log) -> None:
        if log is not None:
            log.append("planner", "RepairHint", {"failed_artifact_ref": self.failed_artifact_ref, "diagnostic": self.diagnostic})


# ---------------------------------------------------------------- think/act loop

THOUGHT, ACTION, OBSERVATION = "Thought", "Action", "Observation"
REPROPOSAL_LIMIT = 3


@dataclass(frozen=True)
class ReactEntry:
    kind: str
    payload: Any

    def to_doc(self) -> dict:
        return {"kind": self.kind, "payload": self.payload}


@dataclass(frozen=True)
class ReactState:
    transcript: tuple[ReactEntry, ...] = ()
    steps_taken: int = 0
    refusals_in_row: int = 0
    ledger: BudgetLedger = BudgetLedger()

    def state_hash(self) -> str:
        return hash_doc([e.to_doc() for e in self.transcript])


@dataclass(frozen=True)
class Proposal:
    thought: str
    action: ToolCall | None = None
    finish: Any = None


@dataclass(frozen=True)
class Halt:
    why: WhyStopped


@dataclass(frozen=True)
class Dispatched:
    call_id: str
    outcome: Any


@dataclass(frozen=True)
class Refused:
    call_id: str
    errors: tuple[ValidationError, ...]


@dataclass(frozen=True)
class Thought:
    text: str


class Governor:
    """Gate between a proposer and the gateway.

    Every action is validated and authorized; actuating actions must also
    pass ``simulate(call) -> Verdict`` before they reach the gateway.
    """

    def __init__(self, registry: ToolRegistry, token: CapabilityToken, gateway, log, *, budget: Budget, seed: int = 0, simulate=None) -> None:
        self.registry = registry
        self.token = token
        self.gateway = gateway
        self.log = log
        self.budget = budget
        self.seed = seed
        self.simulate = simulate

    def review(self, call: ToolCall):
        spec = self.registry.get(call.tool_name, call.tool_version or None)
        if spec is not None and is_actuating(spec.scope):
            verdict = self.simulate(call) if self.simulate is not None else None
            if verdict is None or not verdict.passed:
                err = ValidationError("SimulationGateUnsatisfied", "sim_verdict_ref", "passing simulation", "none" if verdict is None else verdict.verdict_id)
                self.log.append("planner", "GovernorRefusal", {"call_id": call.call_id, "errors": [err.to_doc()]})
                raise Refusal([err])
            call = call.with_(sim_verdict_ref=verdict.verdict_id)
        validated = validate_call(self.registry, call, log=self.log)
        permit = authorize(validated, self.registry.get(call.tool_name, call.tool_version or None), self.token, self.log.clock.now, log=self.log)
        self.token = permit.token
        return permit

    def dispatch(self, permit):
        return self.gateway.execute(permit, self.seed)


def react_step(state: ReactState, proposer: Callable[[ReactState], Proposal], governor: Governor) -> tuple[ReactState, Any]:
    """Advance the loop by one step: budget check, proposal, governed dispatch."""
    log = governor.log
    decision = check_budget(state.ledger, governor.budget, BudgetLedger(steps=1), log=log)
    if not decision.proceed:
        return state, Halt(decision.why)
    try:
        proposal = proposer(state)
    except Exception as exc:
        raise ProposerError(str(exc)) from exc
    entries = list(state.transcript) + [ReactEntry(THOUGHT, proposal.thought)]
    taken = state.steps_taken + 1
    log.append("planner", "ReactThought", {"step": taken, "thought": proposal.thought})
    if proposal.finish is not None:
        new = replace(state, transcript=tuple(entries), steps_taken=taken, ledger=decision.ledger)
        return new, Halt(WhyStopped(GOAL_SATISFIED, json.dumps(proposal.finish, sort_keys=True)))
    if proposal.action is None:
        return replace(state, transcript=tuple(entries), steps_taken=taken, ledger=decision.ledger), Thought(proposal.thought)
    call = proposal.action
    try:
        permit = governor.review(call)
    except Refusal as exc:
        errs = [e.to_doc() for e in exc.errors]
        entries.append(ReactEntry(OBSERVATION, {"refused": call.call_id, "errors": errs}))
        refusals = state.refusals_in_row + 1
        new = replace(state, transcript=tuple(entries), steps_taken=taken, refusals_in_row=refusals, ledger=decision.ledger)
        if refusals >= REPROPOSAL_LIMIT:
            RepairHint(call.call_id, f"{refusals} consecutive governed refusals").emit(log)
            return new, Halt(WhyStopped(VERIFIER_REJECTION, f"{refusals} consecutive refusals"))
        return new, Refused(call.call_id, tuple(exc.errors))
    bound = permit.tool_call
    entries.append(ReactEntry(ACTION, bound.to_doc()))
    outcome = governor.dispatch(permit)
    entries.append(ReactEntry(OBSERVATION, outcome.to_doc()))
    new = replace(state, transcript=tuple(entries), steps_taken=taken, refusals_in_row=0, ledger=decision.ledger)
    return new, Dispatched(bound.call_id, outcome)


def run_react(proposer, governor: Governor, state: ReactState | None = None) -> tuple[ReactState, WhyStopped]:
    state = state or ReactState()
    while True:
        state, nxt = react_step(state, proposer, governor)
        if isinstance(nxt, Halt):
            governor.log.append(
                "planner", "WhyStopped", {"loop": "react", "steps_taken": state.steps_taken, **nxt.why.to_doc()}
            )
            return state, nxt.why


def transcript_grammar_ok(transcript: Sequence[ReactEntry]) -> bool:
    """Transcript matches ``(Thought (Action Observation | Observation)?)*``."""
    i, n = 0, len(transcript)
    while i < n:
        if transcript[i].kind != THOUGHT:
            return False
        i += 1
        if i < n and transcript[i].kind == ACTION:
            if i + 1 >= n or transcript[i + 1].kind != OBSERVATION:
                return False
            i += 2
        elif i < n and transcript[i].kind == OBSERVATION:
            i += 1
    return True


class ScriptedProposer:
    """Replays proposals in order; ``loop=True`` repeats the script forever."""

    def __init__(self, proposals: Sequence[Proposal], loop: bool = False) -> None:
        if not proposals:
            raise ValueError("a scripted proposer needs at least one proposal")
        self.proposals = list(proposals)
        self.loop = loop

    def __call__(self, state: ReactState) -> Proposal:
        i = state.steps_taken
        if i >= len(self.proposals):
            if not self.loop:
                raise IndexError("script exhausted")
            i %= len(self.proposals)
        p = self.proposals[i]
        if p.action is not None:
            p = replace(p, action=p.action.with_(call_id=f"{p.action.call_id}-{state.steps_taken}"))
        return p


# ---------------------------------------------------------------- tree search


@dataclass(frozen=True)
class SearchNode:
    node_id: str
    content: Any
    score: Any
    parent: str | None
    depth: int

    def to_doc(self) -> dict:
        return {"node_id": self.node_id, "content": self.content, "score": _score_doc(self.score), "parent": self.parent, "depth": self.depth}


def _score_doc(score: Any) -> Any:
    if score is None or isinstance(score, (int, float)):
        return score
    return str(score)


@dataclass(frozen=True)
class SearchBudget:
    max_expansions: int
    max_depth: int
    beam_width: int
    convergence_window: int = 3

    def __post_init__(self) -> None:
        if self.max_expansions < 0 or self.max_depth < 0 or self.beam_width < 1 or self.convergence_window < 1:
            raise ValueError("search budget fields must be non-negative (beam and window >= 1)")

    def to_doc(self) -> dict:
        return {
            "max_expansions": self.max_expansions,
            "max_depth": self.max_depth,
            "beam_width": self.beam_width,
            "convergence_window": self.convergence_window,
        }


@dataclass(frozen=True)
class SearchResult:
    best: SearchNode
    why_stopped: WhyStopped
    nodes: tuple[SearchNode, ...]
    expansions: int


def _rank(node: SearchNode) -> tuple:
    return (-node.score, int(node.node_id[1:]))


def search(
    root: Any,
    proposer: Callable[[Any], Sequence[Any]],
    scorer: Callable[[Any], Any],
    budget: SearchBudget,
    *,
    log=None,
) -> SearchResult:
    """Level-wise beam search.

    Each round expands the current frontier best-first; the top
    ``beam_width`` feasible children form the next frontier. ``scorer``
    returns None for an infeasible candidate. Ties go to the earlier node.
    """
    root_score = scorer(root)
    root_node = SearchNode("n0", root, 0 if root_score is None else root_score, None, 0)
    nodes = [root_node]
    best = root_node
    frontier = [root_node]
    expansions = 0
    unchanged = 0
    why: WhyStopped | None = None

    def emit(kind: str, payload: dict) -> None:
        if log is not None:
            log.append("planner", kind, payload)

    emit("SearchStart", {"root": root_node.to_doc(), "budget": budget.to_doc()})
    while why is None:
        if not frontier:
            why = WhyStopped(CONVERGENCE, "frontier exhausted")
            break
        if expansions >= budget.max_expansions:
            why = WhyStopped(BUDGET_EXHAUSTED, f"{expansions} expansions")
            break
        children: list[SearchNode] = []
        infeasible = 0
        cut_short = False
        for node in sorted(frontier, key=_rank):
            if node.depth >= budget.max_depth:
                continue
            if expansions >= budget.max_expansions:
                cut_short = True
                break
            expansions += 1
            made = []
            for content in proposer(node.content):
                s = scorer(content)
                child = SearchNode(f"n{len(nodes)}", content, s, node.node_id, node.depth + 1)
                nodes.append(child)
                made.append(child)
                if s is None:
                    infeasible += 1
                else:
                    children.append(child)
            emit("SearchExpand", {"node_id": node.node_id, "children": [c.to_doc() for c in made]})
        previous = best
        for child in children:
            if _rank(child) < _rank(best):
                best = child
        unchanged = unchanged + 1 if best is previous else 0
        frontier = sorted(children, key=_rank)[: budget.beam_width]
        emit("SearchRound", {"frontier": [n.node_id for n in frontier], "best": best.node_id, "unchanged": unchanged})
        if cut_short:
            why = WhyStopped(BUDGET_EXHAUSTED, f"{expansions} expansions")
        elif not frontier and infeasible and not children:
            why = WhyStopped(CONTRADICTION, f"{infeasible} infeasible candidates, none feasible")
        elif unchanged >= budget.convergence_window:
            why = WhyStopped(CONVERGENCE, f"best unchanged for {unchanged} rounds")
    emit("WhyStopped", {"loop": "search", "best": best.node_id, "expansions": expansions, **why.to_doc()})
    return SearchResult(best, why, tuple(nodes), expansions)


class ScriptedTree:
    """Proposer and scorer backed by tables keyed by the content hash of a state."""

    def __init__(self, children: Mapping[str, Sequence[Any]], scores: Mapping[str, Any]) -> None:
        self.children = {k: list(v) for k, v in children.items()}
        self.scores = dict(scores)

    def propose(self, content: Any) -> list[Any]:
        return list(self.children.get(hash_doc(content), ()))

    def score(self, content: Any) -> Any:
        return self.scores.get(hash_doc(content))

    @classmethod
    def from_edges(cls, edges: Mapping[Any, Sequence[Any]], scores: Mapping[Any, Any]) -> "ScriptedTree":
        return cls({hash_doc(k): v for k, v in edges.items()}, {hash_doc(k): v for k, v in scores.items()})

    def to_doc(self) -> dict:
        return {"children": self.children, "scores": self.scores}

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedTree":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["children"], doc["scores"])
