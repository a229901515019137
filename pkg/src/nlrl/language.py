"""Language values, value tables, and the TD / MC / Q language estimates.

Estimates are written against an abstract aggregator exposing ``fuse`` (combine
one transition description with the successor's value) and ``join`` (combine
fused items across outcomes). Sweeps are synchronous: every estimate reads a
snapshot of the previous table, never the table being built.
"""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Protocol

from .errors import NlrlError, StateEvaluationFailed, UsageError
from .mdp import Action, State, TabularMdp, TrajectorySample
from .textify import (
    NO_EVALUATION,
    ConceptEvaluation,
    StateLexicon,
    render_state,
    render_transition,
    terminal_description,
)

INITIAL = "initial"
TD_UPDATE = "td_update"
MC_UPDATE = "mc_update"


@dataclass(frozen=True)
class LanguageValue:
    """Either free text or a concept evaluation, stamped with provenance and iteration."""

    text: str | None = None
    concepts: ConceptEvaluation | None = None
    provenance: str = INITIAL
    iteration: int = 0
    conforming: bool = True

    def __post_init__(self) -> None:
        if (self.text is None) == (self.concepts is None):
            raise UsageError("a language value holds exactly one of text or concepts")

    @property
    def variant(self) -> str:
        return "free_text" if self.text is not None else "concepts"

    @property
    def is_initial_marker(self) -> bool:
        return self.text == NO_EVALUATION

    def render(self) -> str:
        return self.text if self.text is not None else self.concepts.to_json()

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"variant": self.variant}
        if self.text is not None:
            doc["text"] = self.text
        else:
            doc["concepts"] = self.concepts.as_dict()
        doc["provenance"] = self.provenance
        doc["iteration"] = self.iteration
        if not self.conforming:
            doc["non_conforming"] = True
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> LanguageValue:
        concepts = None
        if doc["variant"] == "concepts":
            from .textify import parse_concept_document

            concepts = parse_concept_document(json.dumps(doc["concepts"]))
        return cls(
            text=doc.get("text"),
            concepts=concepts,
            provenance=doc["provenance"],
            iteration=doc["iteration"],
            conforming=not doc.get("non_conforming", False),
        )


class TableSnapshot(Mapping):
    """Read-only, never-changing view of a value table."""

    def __init__(self, entries: Mapping[State, LanguageValue], iteration: int):
        self._entries = MappingProxyType(dict(entries))
        self.iteration = iteration

    def __getitem__(self, s: State) -> LanguageValue:
        return self._entries[s]

    def __iter__(self) -> Iterator[State]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (TableSnapshot, LanguageValueTable)):
            return self.iteration == other.iteration and dict(self.items()) == dict(other.items())
        return NotImplemented

    __hash__ = None


@dataclass
class LanguageValueTable:
    entries: dict[State, LanguageValue]
    iteration: int = 0

    def __getitem__(self, s: State) -> LanguageValue:
        return self.entries[s]

    def __setitem__(self, s: State, value: LanguageValue) -> None:
        self.entries[s] = value

    def items(self):
        return self.entries.items()

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (TableSnapshot, LanguageValueTable)):
            return self.iteration == other.iteration and dict(self.items()) == dict(other.items())
        return NotImplemented

    def same_values(self, other: LanguageValueTable | TableSnapshot) -> bool:
        """True when both tables hold identical text/concepts, ignoring iteration stamps."""
        return all(_content(self[s]) == _content(other[s]) for s in self.entries) and len(self.entries) == len(other)

    def to_json(self, mdp: TabularMdp) -> dict[str, Any]:
        return {mdp.label(s): self.entries[s].to_json() for s in mdp.states if s in self.entries}

    @classmethod
    def from_json(cls, mdp: TabularMdp, doc: Mapping[str, Any], iteration: int) -> LanguageValueTable:
        by_label = {mdp.label(s): s for s in mdp.states}
        return cls({by_label[k]: LanguageValue.from_json(v) for k, v in doc.items()}, iteration)


def _content(v: LanguageValue):
    return (v.text, v.concepts)


def snapshot(table: LanguageValueTable | TableSnapshot) -> TableSnapshot:
    if isinstance(table, TableSnapshot):
        return table
    return TableSnapshot(table.entries, table.iteration)


def init_value_table(mdp: TabularMdp, lexicon: StateLexicon | None = None) -> LanguageValueTable:
    entries = {}
    for s in mdp.states:
        if mdp.is_terminal(s):
            entries[s] = LanguageValue(text=terminal_description(mdp, s))
        else:
            entries[s] = LanguageValue(text=NO_EVALUATION)
    return LanguageValueTable(entries, 0)


@dataclass(frozen=True)
class OneStepOutcome:
    state: State
    action: Action
    action_name: str
    reward: float
    next_state: State
    probability: float
    description: str
    next_value: LanguageValue
    next_terminal_kind: str | None = None
    snapshot_iteration: int = 0
    state_name: str = ""
    next_state_name: str = ""


def build_outcome(
    mdp: TabularMdp,
    lexicon: StateLexicon,
    snap: TableSnapshot,
    s: State,
    a: Action,
    next_state: State,
    probability: float,
    reward: float,
) -> OneStepOutcome:
    if not 0 < probability <= 1:
        raise UsageError(f"outcome probability {probability} outside (0, 1]")
    kind = mdp.terminal_kinds.get(next_state)
    name = mdp.action_name(a)
    return OneStepOutcome(
        state=s,
        action=a,
        action_name=name,
        reward=reward,
        next_state=next_state,
        probability=probability,
        description=render_transition(lexicon, s, name, reward, next_state, kind or False),
        next_value=snap[next_state],
        next_terminal_kind=kind,
        snapshot_iteration=snap.iteration,
        state_name=render_state(lexicon, s),
        next_state_name=render_state(lexicon, next_state),
    )


class Aggregator(Protocol):
    kind: str

    def fuse(self, outcome: OneStepOutcome) -> Any: ...

    def join(self, state_name: str, fused: Sequence[tuple[float, Any]]) -> LanguageValue: ...

    def join_actions(self, state_name: str, per_action: Sequence[tuple[float, str, LanguageValue]]) -> LanguageValue: ...

    def join_trajectories(self, state_name: str, trajectories: Sequence[Sequence[OneStepOutcome]]) -> LanguageValue: ...


def _stamp(value: LanguageValue, provenance: str, iteration: int) -> LanguageValue:
    return replace(value, provenance=provenance, iteration=iteration)


def _check_outcomes(s: State, outcomes: Sequence[OneStepOutcome]) -> int:
    if not outcomes:
        raise UsageError(f"no outcomes supplied for state {s!r}")
    iterations = {o.snapshot_iteration for o in outcomes}
    if len(iterations) != 1:
        raise UsageError(f"outcomes for {s!r} mix snapshot iterations {sorted(iterations)}")
    if any(o.state != s for o in outcomes):
        raise UsageError(f"outcomes do not all start at {s!r}")
    return iterations.pop()


def td_language_estimate(s: State, outcomes: Sequence[OneStepOutcome], agg: Aggregator) -> LanguageValue:
    """Fuse every one-step outcome with its successor value, then join across outcomes."""
    k = _check_outcomes(s, outcomes)
    try:
        fused = [(o.probability, agg.fuse(o)) for o in outcomes]
        value = agg.join(outcomes[0].state_name, fused)
    except StateEvaluationFailed:
        raise
    except NlrlError as exc:
        raise StateEvaluationFailed(s, str(exc)) from exc
    return _stamp(value, TD_UPDATE, k + 1)


def language_q_estimate(s: State, a: Action, outcomes: Sequence[OneStepOutcome], agg: Aggregator) -> LanguageValue:
    if any(o.action != a for o in outcomes):
        raise UsageError(f"outcomes for Q({s!r}, {a!r}) mix actions")
    return td_language_estimate(s, outcomes, agg)


def state_value_from_actions(
    s: State, state_name: str, per_action: Sequence[tuple[float, str, LanguageValue]], agg: Aggregator
) -> LanguageValue:
    """Join per-action language Q values (weighted by the policy) into the state value."""
    if not per_action:
        raise UsageError(f"no action evaluations for state {s!r}")
    try:
        value = agg.join_actions(state_name, per_action)
    except StateEvaluationFailed:
        raise
    except NlrlError as exc:
        raise StateEvaluationFailed(s, str(exc)) from exc
    return _stamp(value, TD_UPDATE, per_action[0][2].iteration)


def trajectory_outcomes(
    mdp: TabularMdp, lexicon: StateLexicon, traj: TrajectorySample
) -> list[OneStepOutcome]:
    """Render a sampled trajectory as a chain of one-step outcomes.

    The successor values are placeholders; Monte-Carlo aggregation never reads
    a value table.
    """
    placeholder = LanguageValue(text=NO_EVALUATION)
    states = [s for s, _, _ in traj.steps] + [traj.final_state]
    result = []
    for i, (s, a, r) in enumerate(traj.steps):
        nxt = states[i + 1]
        kind = mdp.terminal_kinds.get(nxt)
        name = mdp.action_name(a)
        result.append(
            OneStepOutcome(
                state=s,
                action=a,
                action_name=name,
                reward=r,
                next_state=nxt,
                probability=1.0,
                description=render_transition(lexicon, s, name, r, nxt, kind or False),
                next_value=placeholder,
                next_terminal_kind=kind,
                state_name=render_state(lexicon, s),
                next_state_name=render_state(lexicon, nxt),
            )
        )
    return result


def mc_language_estimate(
    s: State,
    trajectories: Sequence[Sequence[OneStepOutcome]],
    agg: Aggregator,
    iteration: int = 1,
) -> LanguageValue:
    """Aggregate K rendered full trajectories starting at ``s`` in one join."""
    if not trajectories:
        raise UsageError("at least one trajectory is required")
    for traj in trajectories:
        if not traj or traj[0].state != s:
            raise UsageError(f"every trajectory must start at {s!r}")
    try:
        value = agg.join_trajectories(trajectories[0][0].state_name, trajectories)
    except StateEvaluationFailed:
        raise
    except NlrlError as exc:
        raise StateEvaluationFailed(s, str(exc)) from exc
    return _stamp(value, MC_UPDATE, iteration)


@dataclass(frozen=True)
class TaskInstruction:
    text: str = "Reach the goal while avoiding all holes."

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise UsageError("task instruction must be non-empty")


@dataclass
class QTable:
    """Language Q values keyed by ``(state, action)``."""

    entries: dict[tuple[State, Action], LanguageValue] = field(default_factory=dict)

    def for_state(self, mdp: TabularMdp, s: State) -> dict[Action, LanguageValue]:
        return {a: self.entries[(s, a)] for a in mdp.actions[s] if (s, a) in self.entries}

    def to_json(self, mdp: TabularMdp) -> dict[str, dict[str, Any]]:
        doc: dict[str, dict[str, Any]] = {}
        for s in mdp.states:
            per = {a: self.entries[(s, a)].to_json() for a in mdp.actions[s] if (s, a) in self.entries}
            if per:
                doc[mdp.label(s)] = per
        return doc
