"""Text rendering of MDP states/transitions, prompt assembly, and response parsing.

The prompt constants below are reproduced verbatim (typos and the curly
apostrophe included); golden-file tests pin them byte for byte.
"""

from __future__ import annotations

import json
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, fields
from typing import NamedTuple

from .errors import ParseError, UsageError
from .mdp import TabularMdp

NO_EVALUATION = "No evaluation information"

TERMINAL_STATE_DESCRIPTION = (
    "The state is the terminal state. Your move ends here so you will not receive any "
    "negative path cost anymore in the future."
)
GOAL_STATE_DESCRIPTION = "The state is the goal. Your move ends here and the task is completed."
HOLE_STATE_DESCRIPTION = "The state is a hole. Your move ends here and the task is failed."

GRID_SYSTEM_PROMPT = (
    "You are a helpful assistant that strictly follows the user’s instructions.\n"
    "We are finding the shortest path towards the terminal state in gridworld. We use (letter) to represent different grids.\n"
    "To help us evaluate a given grid position in the shortest path finding task, we have an agent that can conduct actions to move to other grids. The agent has 4 actions: go up, move left, go down and move right. The agent conducts several one-step rollouts to explore such grid world.\n"
    "For each one-step rollout starting from a given grid, it contains two sources of information, one about the descrption of intermediate change of action, state and reward, while the other one is about our evaluation of the new grid state.\n"
    "I need you to help me aggregate/summarize on these rollout information to concisely evaluate the given grid position."
)

GRID_ROLLOUT_PROMPT = (
    "The current grid state is {current_state}. And here are several one-step rollout results "
    "starting from the current state {current_state}:\n\n"
)

GRID_TRIGGER_PROMPT = (
    "By aggregating the above rollout results, please concisely generate your evaluation of the "
    "current state {current_state}. Start your answer with the sentence "
    "'Final evaluation of the current state:'."
)

FREEFORM_MARKER = "Final evaluation of the current state"

AGG_TD_STATE_INPUT_FORMAT_STR = """State: {state}
Action: {action}
Possible outcomes:
{agg_str}"""

AGG_TD_STATE_SYSTEM_PROMPT_FC = """You are a highly skilled assistant, committed to following user instructions precisely. Our task involves a player navigating a stochastic environment known as 'Frozen Lake,' with the ultimate goal of reaching the goal position while avoiding all holes. Your role is to assist in evaluating the player's action on the given state.
In this environment, the player makes decisions in each state, leading to potentially varied subsequent states due to the stochastic nature of the environment. We will provide you with a set of possible outcomes resulting from one action.
For each outcome, you will receive two key pieces of information:

1. A detailed description of the immediate changes in state and the accompanying reward. This narrative will offer insights into the direct consequences of the player's actions.
2. An assessment of the player's policy at the newly reached state. This evaluation will include a future analysis of potential outcomes stemming from the new state.

### Your task
Your task is to synthesize these elements - the future state evaluations and the intermediate state descriptions - to construct a comprehensive evaluation of the player's action given current state.

### Json keys
You need to generate the analysis in the json format, here are the keys:
    1. Important states: Record the important state positions such as goal position, hole positions or other important states.
    2. Immediate Risk: Identify one-step failure (the action can directly result in failure). Generate None if no paths found. Here is an example if you are evaluating over state (4,1): (4,1) -> Move left -> (4,0) (hole), distance is 1.
    3. Future Risk: Identify potential future failure paths (more than one step) or future bad states. Generate None if no paths found.
    4. Safest: Generate the safest path starting from the given state and action. Output None if there are no safe paths. Here is an example if you are evaluating over state (4,1): (4,1) -> Move right -> (4,2) -> Move down -> (6,2), this is the goal.
    5. Final evaluation: Based on the above infomation, generate your final evaluation of the policy in the given state.

Make your analysis and evaluation concise and short.
One criteria is that a good action should not result in immediate risk.
"""

AGG_ACTION_INPUT_FORMAT_STR = """State: {state}
Possible actions and evaluations:

{agg_str}"""

AGG_ACTION_SYSTEM_PROMPT_FC = """Our task involves a player navigating a stochastic environment known as 'Frozen Lake,' with the ultimate goal of reaching an unknown destination. Your role is to assist in evaluating the player's action.
In this environment, the player makes decisions in each state, leading to potentially varied subsequent states due to the stochastic nature of the environment.
You are tasked with evaluating a player's stochastic policy in 'Frozen Lake'. The player has multiple actions to choose from in each state.
You will be provided with current state infromation and action choices with their corresponding action evaluations (in json format).

### Your task
Your task is to synthesize the effectiveness of different actions and combine these insights to assess the overall effectiveness of the player's policy in the current state.

### Json keys
You need to generate the analysis in the json format, here are the keys:
    1. Important states: Record the important state positions such as goal position, hole positions or other important states.
    2. Immediate Risk: Identify one-step failure (the action can directly result in failure). Here is an example if you are evaluating over state (4,1): (4,1) -> Move left -> (4,0) (hole), distance is 1.
    3. Future Risk: Identify potential future failure paths (more than one step) or future bad states.
    4. Safest path: Generate the safest path starting from the given state. Output None if there are no safe paths. Here is an example: (4,1) -> Move right -> (4,2) -> Move down -> (6,2), this is the goal.
    5. Final evaluation: Based on the above infomation, generate your final evaluation of the policy in the given state.

Make your analysis and evaluation concise and short.
One criteria is that a good action should not result in immediate failure and hole.
"""

IMPROVE_SYSTEM_PROMPT = """You are a highly skilled assistant, committed to following user instructions precisely. A player is navigating a grid environment. For every action available in the current state you are given an evaluation of that action written in json format.
Compare the evaluations against the task instruction, reason step by step about which action best completes the task, and then choose exactly one action from the menu.
One criteria is that a good action should not result in immediate risk.
End your answer with a final line of the form 'Action: <action name>' using a name from the menu.
"""

IMPROVE_INPUT_FORMAT_STR = """Task: {task}
State: {state}
Action evaluations:

{agg_str}
Action menu: {menu}"""

JSON_CORRECTION = (
    "\n\nYour previous answer could not be used. Reply with one json object that contains all five "
    "keys: Important states, Immediate Risk, Future Risk, Safest path, Final evaluation."
)
ACTION_CORRECTION = "\n\nYour previous answer could not be used. End with a line 'Action: <action name>' naming one action from the menu."


# -- lexicon and transitions ------------------------------------------------


@dataclass(frozen=True)
class StateLexicon:
    """Bijection from state ids to display names; rendered names are parenthesized."""

    names: Mapping
    style: str = "letters"  # or "coords"

    def __post_init__(self) -> None:
        if len(set(self.names.values())) != len(self.names):
            raise UsageError("lexicon names must be unique")

    @classmethod
    def from_mdp(cls, mdp: TabularMdp) -> StateLexicon:
        style = "coords" if mdp.kind == "frozenlake" else "letters"
        return cls({s: mdp.label(s) for s in mdp.states}, style)


def render_state(lexicon: StateLexicon, s) -> str:
    try:
        return f"({lexicon.names[s]})"
    except KeyError:
        raise UsageError(f"state {s!r} is not in the lexicon") from None


def _fmt_reward(r: float) -> str:
    return f"{r:g}"


def terminal_suffix(kind: str | None, style: str) -> str:
    if kind is None:
        return ""
    if style == "letters":
        return TERMINAL_STATE_DESCRIPTION
    return GOAL_STATE_DESCRIPTION if kind == "goal" else HOLE_STATE_DESCRIPTION


def terminal_description(mdp: TabularMdp, s) -> str:
    style = "coords" if mdp.kind == "frozenlake" else "letters"
    return terminal_suffix(mdp.terminal_kinds[s], style)


def render_transition(
    lexicon: StateLexicon,
    s,
    action_name: str,
    r: float,
    s_next,
    terminal: bool | str = False,
) -> str:
    """Describe one step. ``terminal`` may be a bool or the terminal kind (``goal``/``hole``)."""
    render_state(lexicon, s)
    name = render_state(lexicon, s_next)
    if lexicon.style == "letters":
        text = (
            f"You choose the {action_name} action. You receive a negative reward {_fmt_reward(r)} "
            f"as the path penalty. Now you are at a new state {name}."
        )
    else:
        text = f"You choose the {action_name} action. You receive a reward of {_fmt_reward(r)}. Now you are at a new state {name}."
    if terminal:
        kind = terminal if isinstance(terminal, str) else "goal"
        text += " " + terminal_suffix(kind, lexicon.style)
    return text


# -- prompt bundles ---------------------------------------------------------


class PromptBundle(NamedTuple):
    system_text: str
    user_text: str
    trigger_text: str
    response_format_hint: str  # "free_text" or "json_object"

    def messages(self) -> list[tuple[str, str]]:
        return [("system", self.system_text), ("user", self.user_text + self.trigger_text)]

    def full_text(self) -> str:
        return self.system_text + self.user_text + self.trigger_text


def assemble_gridworld_eval_prompt(state_name: str, rollouts: Sequence[tuple[str, str]]) -> PromptBundle:
    """Build the one-call gridworld evaluation prompt.

    Args:
        state_name: rendered state, e.g. ``"(g)"``.
        rollouts: ``(transition_text, next_value_text)`` pairs in action order.
    """
    if not rollouts:
        raise UsageError("at least one rollout is required")
    parts = [GRID_ROLLOUT_PROMPT.format(current_state=state_name)]
    for i, (transition, value) in enumerate(rollouts):
        parts.append(
            f"Rollout {i}:\n"
            f"Intermediate change: {transition}\n"
            f"Evaluation of the new state: {value}\n\n"
        )
    trigger = GRID_TRIGGER_PROMPT.format(current_state=state_name)
    return PromptBundle(GRID_SYSTEM_PROMPT, "".join(parts), trigger, "free_text")


def assemble_frozenlake_q_prompt(
    state_name: str, action_name: str, outcomes: Sequence[tuple[str, str]]
) -> PromptBundle:
    if not outcomes:
        raise UsageError("at least one outcome is required")
    agg = "\n".join(
        f"Outcome {i}:\nIntermediate change: {transition}\nEvaluation of the new state: {value}\n"
        for i, (transition, value) in enumerate(outcomes, start=1)
    )
    user = AGG_TD_STATE_INPUT_FORMAT_STR.format(state=state_name, action=action_name, agg_str=agg)
    return PromptBundle(AGG_TD_STATE_SYSTEM_PROMPT_FC, user, "", "json_object")


def assemble_frozenlake_v_prompt(state_name: str, per_action_evals: Sequence[tuple[str, str]]) -> PromptBundle:
    if not per_action_evals:
        raise UsageError("at least one action evaluation is required")
    agg = "\n".join(
        f"Action {i}: {action}\nEvaluation: {doc}\n" for i, (action, doc) in enumerate(per_action_evals, start=1)
    )
    user = AGG_ACTION_INPUT_FORMAT_STR.format(state=state_name, agg_str=agg)
    return PromptBundle(AGG_ACTION_SYSTEM_PROMPT_FC, user, "", "json_object")


def assemble_improvement_prompt(
    state_name: str, task: str, per_action_evals: Sequence[tuple[str, str]]
) -> PromptBundle:
    if not per_action_evals:
        raise UsageError("at least one action evaluation is required")
    agg = "\n".join(
        f"Action {i}: {action}\nEvaluation: {doc}\n" for i, (action, doc) in enumerate(per_action_evals, start=1)
    )
    menu = ", ".join(action for action, _ in per_action_evals)
    user = IMPROVE_INPUT_FORMAT_STR.format(task=task, state=state_name, agg_str=agg, menu=menu)
    return PromptBundle(IMPROVE_SYSTEM_PROMPT, user, "", "free_text")


# -- concept documents ------------------------------------------------------


@dataclass(frozen=True)
class ConceptEvaluation:
    important_states: str = "None"
    immediate_risk: str = "None"
    future_risk: str = "None"
    safest_path: str = "None"
    final_evaluation: str = "None"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), ensure_ascii=False)

    def as_dict(self) -> dict[str, str]:
        return {CONCEPT_KEYS[f.name]: getattr(self, f.name) for f in fields(self)}


# serialized names follow the concept table; parsing also accepts the prompt spellings
CONCEPT_KEYS = {
    "important_states": "Important state",
    "immediate_risk": "Immediate risk",
    "future_risk": "Future risk",
    "safest_path": "Safest path",
    "final_evaluation": "Final evaluation",
}
_ALIASES = {
    "important_states": ("important state", "important states"),
    "immediate_risk": ("immediate risk", "immediate risks"),
    "future_risk": ("future risk", "future risks"),
    "safest_path": ("safest path", "safest", "safest paths"),
    "final_evaluation": ("final evaluation",),
}


def _normalize_key(key: str) -> str:
    key = re.sub(r"^\s*\d+\.\s*", "", key)
    return re.sub(r"[\s_]+", " ", key).strip().lower()


def _as_text(value) -> str:
    if value is None:
        return "None"
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        return "; ".join(_as_text(v) for v in value) if value else "None"
    if isinstance(value, dict):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def extract_first_json_object(text: str) -> dict:
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ParseError("no_object", "no JSON object found in response")


def parse_concept_document(text: str) -> ConceptEvaluation:
    obj = extract_first_json_object(text)
    normalized = {}
    for key, value in obj.items():
        normalized.setdefault(_normalize_key(str(key)), value)
    values = {}
    for name, aliases in _ALIASES.items():
        for alias in aliases:
            if alias in normalized:
                values[name] = _as_text(normalized[alias])
                break
        else:
            raise ParseError("missing_concept", f"concept {CONCEPT_KEYS[name]!r} missing", CONCEPT_KEYS[name])
    return ConceptEvaluation(**values)


class FreeformEvaluation(NamedTuple):
    text: str
    conforming: bool


def parse_freeform_evaluation(text: str) -> FreeformEvaluation:
    """Cut the response at the evaluation marker sentence; keep everything if it is absent."""
    idx = text.find(FREEFORM_MARKER)
    if idx < 0:
        return FreeformEvaluation(text, False)
    return FreeformEvaluation(text[idx:], True)
