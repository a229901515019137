"""Aggregators (fuse / join) and policy improvers.

``ConceptAggregator`` is a deterministic, symbolic stand-in for the language
model: it manipulates the five concept fields as structured strings so that
runs are exactly reproducible and checkable against the DP oracle.
``LlmAggregator`` and ``LlmImprover`` route the same contracts through a chat
gateway.
"""

from __future__ import annotations

import enum
import logging
import re
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, replace

from .errors import (
    ConfigError,
    ImprovementFailed,
    ModeMismatch,
    ParseError,
    StateEvaluationFailed,
    UsageError,
)
from .language import LanguageValue, OneStepOutcome
from .textify import (
    ACTION_CORRECTION,
    JSON_CORRECTION,
    ConceptEvaluation,
    PromptBundle,
    assemble_frozenlake_q_prompt,
    assemble_frozenlake_v_prompt,
    assemble_gridworld_eval_prompt,
    assemble_improvement_prompt,
    parse_concept_document,
    parse_freeform_evaluation,
)

log = logging.getLogger(__name__)

NONE = "None"
ARROW = " -> "
SEP = "; "
_RISK_RE = re.compile(r"^(?P<path>.+) -> (?P<hole>\([^()]*\)) \(hole\), distance is (?P<dist>\d+)$")
_IMPORTANT_RE = re.compile(r"^(?P<name>\([^()]*\)) \((?P<kind>\w+)\)$")


class Rank(enum.IntEnum):
    IMMEDIATE_RISK = 0
    FUTURE_RISK = 1
    UNKNOWN = 2
    SAFE_PROGRESS = 3
    REACHES_GOAL = 4


@dataclass(frozen=True)
class ConceptScore:
    rank: Rank
    path_length: int | None = None
    warning: bool = False
    immediate_count: int = 0
    nearest_risk: int | None = None  # shortest future-risk distance


# -- field codecs -----------------------------------------------------------


def _entries(field_text: str) -> list[str]:
    if field_text.strip() in ("", NONE):
        return []
    return [e.strip() for e in field_text.split(SEP) if e.strip()]


def _field(entries) -> str:
    return SEP.join(entries) if entries else NONE


def _risk(entry: str):
    m = _RISK_RE.match(entry)
    if not m:
        return None
    return m["path"], m["hole"], int(m["dist"])


def _risk_entry(path: str, hole: str, dist: int) -> str:
    return f"{path} -> {hole} (hole), distance is {dist}"


def _prune_risks(entries: Sequence[str]) -> list[str]:
    """Keep the shortest entry per hole; unparseable entries pass through unchanged."""
    best: dict[str, tuple[int, str]] = {}
    loose = set()
    for e in entries:
        parsed = _risk(e)
        if parsed is None:
            loose.add(e)
            continue
        _, hole, d = parsed
        if hole not in best or (d, e) < best[hole]:
            best[hole] = (d, e)
    kept = sorted(best.values(), key=lambda t: (t[0], t[1]))
    return [e for _, e in kept] + sorted(loose)


def _important(pairs) -> str:
    return _field(sorted({f"{name} ({kind})" for name, kind in pairs}))


def _important_pairs(text: str):
    pairs = set()
    for e in _entries(text):
        m = _IMPORTANT_RE.match(e)
        if m:
            pairs.add((m["name"], m["kind"]))
    return pairs


def parse_path(path: str):
    """Return ``(steps, reaches_goal, well_formed)`` for a safest-path string."""
    if path.strip() in ("", NONE):
        return None, False, True
    tokens = path.split(ARROW)
    arrows = len(tokens) - 1
    if arrows < 2 or arrows % 2 or not tokens[0].startswith("("):
        return None, False, False
    tail = tokens[-1].strip().rstrip(".").lower()
    return arrows // 2, tail.endswith("goal"), True


def _path_steps(path: str):
    tokens = path.split(ARROW)
    return [(tokens[i], tokens[i + 1]) for i in range(0, len(tokens) - 2, 2)]


def score_concepts(c: ConceptEvaluation) -> ConceptScore:
    length, goal, ok = parse_path(c.safest_path)
    immediate = len(_entries(c.immediate_risk))
    dists = [r[2] for r in map(_risk, _entries(c.future_risk)) if r]
    risk = {"immediate_count": immediate, "nearest_risk": min(dists, default=None)}
    if immediate:
        return ConceptScore(Rank.IMMEDIATE_RISK, length, not ok, **risk)
    if not ok:
        log.warning("unparseable safest path %r", c.safest_path)
        return ConceptScore(Rank.UNKNOWN, None, True, **risk)
    if length is not None and goal:
        return ConceptScore(Rank.REACHES_GOAL, length, **risk)
    if _entries(c.future_risk):
        return ConceptScore(Rank.FUTURE_RISK, length, **risk)
    if length is not None:
        return ConceptScore(Rank.SAFE_PROGRESS, length, **risk)
    return ConceptScore(Rank.UNKNOWN, None, **risk)


def _steps(n: int) -> str:
    return f"{n} step" if n == 1 else f"{n} steps"


def render_final_evaluation(c: ConceptEvaluation, tied_first_actions: Sequence[str] = ()) -> str:
    score = score_concepts(c)
    risks = [_risk(e) for e in _entries(c.future_risk)]
    nearest = min((r[2] for r in risks if r), default=None)
    if score.rank is Rank.IMMEDIATE_RISK:
        text = "Immediate risk: a hole can be reached in one step."
        if score.path_length is not None:
            text += f" A safe path still reaches the goal in {_steps(score.path_length)}."
    elif score.rank is Rank.REACHES_GOAL:
        text = f"The goal can be reached safely in {_steps(score.path_length)}."
        if nearest is not None:
            text += f" Holes lie {_steps(nearest)} away on riskier paths."
    elif score.rank is Rank.FUTURE_RISK:
        text = f"No safe path to the goal is known yet; a hole can be reached in {_steps(nearest)}."
    elif score.rank is Rank.SAFE_PROGRESS:
        text = f"A safe path of {_steps(score.path_length)} is known but it has not reached the goal."
    else:
        return "Not enough information to evaluate this state yet."
    if len(tied_first_actions) > 1:
        text += " Equally short safe paths start with: " + ", ".join(tied_first_actions) + "."
    return text


# -- deterministic G2 / G1 --------------------------------------------------


def concept_fuse(outcome: OneStepOutcome) -> ConceptEvaluation:
    """Combine one transition with the successor's evaluation (symbolic ``+``)."""
    s, act, nxt = outcome.state_name, outcome.action_name, outcome.next_state_name
    prefix = f"{s}{ARROW}{act}"
    if outcome.next_terminal_kind == "hole":
        c = ConceptEvaluation(
            important_states=_important([(nxt, "hole")]),
            immediate_risk=_risk_entry(prefix, nxt, 1),
        )
    elif outcome.next_terminal_kind == "goal":
        c = ConceptEvaluation(important_states=_important([(nxt, "goal")]), safest_path=f"{prefix}{ARROW}goal")
    else:
        value = outcome.next_value
        if value.concepts is None:
            if value.is_initial_marker:
                return ConceptEvaluation(final_evaluation=render_final_evaluation(ConceptEvaluation()))
            raise ModeMismatch(f"free-text value at {nxt} cannot feed the concept aggregator")
        nv = value.concepts
        shifted = []
        for e in _entries(nv.immediate_risk) + _entries(nv.future_risk):
            parsed = _risk(e)
            if parsed:
                path, hole, d = parsed
                shifted.append(_risk_entry(f"{prefix}{ARROW}{path}", hole, d + 1))
        c = ConceptEvaluation(
            important_states=nv.important_states,
            future_risk=_field(_prune_risks(shifted)),
            safest_path=NONE if nv.safest_path == NONE else f"{prefix}{ARROW}{nv.safest_path}",
        )
    return replace(c, final_evaluation=render_final_evaluation(c))


def concept_join(state_name: str, fused: Sequence[tuple[float, ConceptEvaluation]]) -> ConceptEvaluation:
    """Aggregate fused items across outcomes or actions (symbolic expectation).

    Risk fields are unions (shortest entry per hole for future risks). The
    safest path is the shortest path none of whose steps is a one-step risk;
    ties go to the earliest item, and the remaining tied first moves are named
    in the final evaluation.
    """
    if not fused:
        raise UsageError(f"nothing to join for state {state_name}")
    items = [c for _, c in fused]
    immediate = sorted({e for c in items for e in _entries(c.immediate_risk)})
    future = _prune_risks([e for c in items for e in _entries(c.future_risk)])
    risky = set()
    for e in immediate:
        parsed = _risk(e)
        if parsed:
            risky.update(_path_steps(parsed[0] + ARROW + parsed[1]))
    candidates = []
    for idx, c in enumerate(items):
        length, _, ok = parse_path(c.safest_path)
        if length is None or not ok:
            continue
        if any(step in risky for step in _path_steps(c.safest_path)):
            continue
        candidates.append((length, idx, c))
    important = set()
    for e in immediate + future:
        parsed = _risk(e)
        if parsed:
            important.add((parsed[1], "hole"))
    safest = NONE
    tied_actions: list[str] = []
    if candidates:
        best = min(length for length, _, _ in candidates)
        tied = [(idx, c) for length, idx, c in candidates if length == best]
        safest = tied[0][1].safest_path
        for _, c in tied:
            important |= _important_pairs(c.important_states)
            first = c.safest_path.split(ARROW)[1]
            if first not in tied_actions:
                tied_actions.append(first)
    joined = ConceptEvaluation(
        important_states=_important(important),
        immediate_risk=_field(immediate),
        future_risk=_field(future),
        safest_path=safest,
    )
    return replace(joined, final_evaluation=render_final_evaluation(joined, tied_actions))


def _truncated_tail(o: OneStepOutcome) -> ConceptEvaluation:
    c = ConceptEvaluation(safest_path=f"{o.state_name}{ARROW}{o.action_name}{ARROW}{o.next_state_name}, episode truncated")
    return replace(c, final_evaluation=render_final_evaluation(c))


class ConceptAggregator:
    """Deterministic concept-based aggregator."""

    kind = "deterministic"

    def fuse(self, outcome: OneStepOutcome) -> ConceptEvaluation:
        return concept_fuse(outcome)

    def join(self, state_name: str, fused: Sequence[tuple[float, ConceptEvaluation]]) -> LanguageValue:
        return LanguageValue(concepts=concept_join(state_name, fused))

    def join_actions(self, state_name: str, per_action: Sequence[tuple[float, str, LanguageValue]]) -> LanguageValue:
        items = []
        for p, action_name, value in per_action:
            if value.concepts is None:
                raise ModeMismatch(f"free-text Q value for {action_name} at {state_name}")
            items.append((p, value.concepts))
        return LanguageValue(concepts=concept_join(state_name, items))

    def join_trajectories(self, state_name: str, trajectories: Sequence[Sequence[OneStepOutcome]]) -> LanguageValue:
        items = []
        for traj in trajectories:
            last = traj[-1]
            item = concept_fuse(last) if last.next_terminal_kind else _truncated_tail(last)
            for o in reversed(traj[:-1]):
                item = concept_fuse(replace(o, next_value=LanguageValue(concepts=item)))
            items.append((1.0 / len(trajectories), item))
        return LanguageValue(concepts=concept_join(state_name, items))


# -- improvement ------------------------------------------------------------

_NO_PATH = 10**9


def _describe(score: ConceptScore) -> str:
    label = {
        Rank.REACHES_GOAL: "reaches the goal",
        Rank.SAFE_PROGRESS: "makes safe progress",
        Rank.UNKNOWN: "unknown",
        Rank.FUTURE_RISK: "future risk",
        Rank.IMMEDIATE_RISK: "immediate risk",
    }[score.rank]
    if score.path_length is not None:
        label += f" (safest path {_steps(score.path_length)})"
    return label


def improve_policy_deterministic(
    state_name: str,
    per_action: Mapping[str, ConceptEvaluation | LanguageValue],
    action_names: Mapping[str, str] | None = None,
    rank_value: Callable[[Rank], float] = int,
) -> tuple[dict[str, float], str]:
    """Pick the best actions and spread mass uniformly over them.

    Actions compare by rank, then shortest safe path, then fewer one-step
    holes, then the farthest nearest hole.

    ``per_action`` iteration order is the action order used for the thought
    text. ``rank_value`` may be any strictly increasing relabeling of ranks.
    """
    if not per_action:
        raise UsageError(f"no action evaluations at {state_name}")
    names = action_names or {}
    scores = {}
    for a, v in per_action.items():
        c = v.concepts if isinstance(v, LanguageValue) else v
        if c is None:
            raise ModeMismatch(f"free-text Q value for {a} at {state_name}")
        scores[a] = score_concepts(c)
    actions = list(per_action)
    if all(sc.rank is Rank.UNKNOWN for sc in scores.values()):
        return {a: 1.0 / len(actions) for a in actions}, f"At {state_name}: insufficient information; keep a uniform choice."

    def key(a):
        sc = scores[a]
        return (
            rank_value(sc.rank),
            -(sc.path_length if sc.path_length is not None else _NO_PATH),
            -sc.immediate_count,
            sc.nearest_risk if sc.nearest_risk is not None else _NO_PATH,
        )

    best = max(key(a) for a in actions)
    chosen = [a for a in actions if key(a) == best]
    dist = {a: (1.0 / len(chosen) if a in chosen else 0.0) for a in actions}
    parts = "; ".join(f"{names.get(a, a)}: {_describe(scores[a])}" for a in actions)
    thought = f"At {state_name}: {parts}. Chosen: {', '.join(names.get(a, a) for a in chosen)}."
    return dist, thought


class DeterministicImprover:
    kind = "deterministic"

    def improve(self, state_name, per_action, action_names, task=None):
        return improve_policy_deterministic(state_name, per_action, action_names)


# -- LLM-backed -------------------------------------------------------------


@dataclass
class LlmSettings:
    model: str = "gpt-4-0125-preview"
    temperature: float = 0.0
    max_attempts: int = 2


class LlmAggregator:
    """Aggregation through chat calls.

    ``family="gridworld"`` issues one free-text call per state with all
    rollouts; ``family="frozenlake"`` issues one json call per (state, action)
    and one json call per state over the action evaluations.
    """

    kind = "llm"

    def __init__(self, gateway, family: str, settings: LlmSettings | None = None, tag: str = ""):
        if family not in ("gridworld", "frozenlake"):
            raise ConfigError(f"unknown prompt family {family!r}")
        self.gateway = gateway
        self.family = family
        self.settings = settings or LlmSettings()
        self.tag = tag

    def fuse(self, outcome: OneStepOutcome) -> tuple[str, str, str]:
        return outcome.action_name, outcome.description, outcome.next_value.render()

    def _call(self, bundle: PromptBundle, tag: str, suffix: str = ""):
        from .gateway import ChatRequest

        messages = (("system", bundle.system_text), ("user", bundle.user_text + bundle.trigger_text + suffix))
        request = ChatRequest(
            model=self.settings.model,
            temperature=self.settings.temperature,
            messages=messages,
            response_format="json_object" if bundle.response_format_hint == "json_object" else "text",
            request_tag=f"{self.tag}{tag}",
        )
        return self.gateway.chat_entry(request)

    def _concepts(self, bundle: PromptBundle, state_name: str, tag: str) -> LanguageValue:
        transcripts = []
        last_error = None
        for attempt in range(self.settings.max_attempts):
            entry = self._call(bundle, tag, JSON_CORRECTION if attempt else "")
            transcripts.append(entry)
            try:
                return LanguageValue(concepts=parse_concept_document(entry.response_text))
            except ParseError as exc:
                last_error = exc
                log.info("unparseable concept document for %s (attempt %d): %s", state_name, attempt + 1, exc)
        raise StateEvaluationFailed(state_name, f"{last_error}", transcripts)

    def join(self, state_name: str, fused: Sequence[tuple[float, tuple[str, str, str]]]) -> LanguageValue:
        if self.family == "gridworld":
            bundle = assemble_gridworld_eval_prompt(state_name, [(t, v) for _, (_, t, v) in fused])
            entry = self._call(bundle, f"V:{state_name}")
            parsed = parse_freeform_evaluation(entry.response_text)
            return LanguageValue(text=parsed.text, conforming=parsed.conforming)
        actions = {a for _, (a, _, _) in fused}
        if len(actions) != 1:
            raise UsageError("frozen-lake prompts evaluate one action at a time")
        action = actions.pop()
        bundle = assemble_frozenlake_q_prompt(state_name, action, [(t, v) for _, (_, t, v) in fused])
        return self._concepts(bundle, state_name, f"Q:{state_name}:{action}")

    def join_actions(self, state_name: str, per_action: Sequence[tuple[float, str, LanguageValue]]) -> LanguageValue:
        if self.family != "frozenlake":
            raise ConfigError("per-action aggregation needs the frozen-lake prompt family")
        bundle = assemble_frozenlake_v_prompt(state_name, [(name, v.render()) for _, name, v in per_action])
        return self._concepts(bundle, state_name, f"V:{state_name}")

    def join_trajectories(self, state_name, trajectories):
        raise ConfigError("Monte-Carlo estimates are only available with the deterministic aggregator")


_ACTION_RE = re.compile(r"Action:\s*(.+?)\s*$", re.IGNORECASE)


def parse_action_choice(text: str, action_names: Mapping[str, str]) -> str | None:
    """Return the action id named on the last ``Action:`` line, if it is on the menu."""
    lookup = {}
    for a, name in action_names.items():
        lookup[name.lower()] = a
        lookup[a.lower()] = a
    for line in reversed(text.strip().splitlines()):
        m = _ACTION_RE.search(line)
        if m:
            choice = m.group(1).strip(" .*`'\"").lower()
            return lookup.get(choice)
    return None


class LlmImprover:
    kind = "llm"

    def __init__(self, gateway, settings: LlmSettings | None = None, tag: str = ""):
        self.gateway = gateway
        self.settings = settings or LlmSettings()
        self.tag = tag

    def improve(self, state_name, per_action: Mapping[str, LanguageValue], action_names, task):
        from .gateway import ChatRequest

        names = {a: action_names.get(a, a) for a in per_action}
        bundle = assemble_improvement_prompt(state_name, task.text, [(names[a], v.render()) for a, v in per_action.items()])
        transcripts = []
        for attempt in range(self.settings.max_attempts):
            request = ChatRequest(
                model=self.settings.model,
                temperature=self.settings.temperature,
                messages=(("system", bundle.system_text), ("user", bundle.user_text + (ACTION_CORRECTION if attempt else ""))),
                response_format="text",
                request_tag=f"{self.tag}I:{state_name}",
            )
            entry = self.gateway.chat_entry(request)
            transcripts.append(entry)
            choice = parse_action_choice(entry.response_text, names)
            if choice is not None:
                return {a: (1.0 if a == choice else 0.0) for a in per_action}, entry.response_text
        raise ImprovementFailed(state_name, "no legal action named in the response", transcripts)
