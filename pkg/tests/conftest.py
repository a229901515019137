import json
from pathlib import Path

import pytest

from nlrl.gateway import ChatRequest, TranscriptEntry, persist_transcript
from nlrl.language import LanguageValue, LanguageValueTable, init_value_table
from nlrl.mdp import build_gridworld
from nlrl.runner import LLM_DEFAULTS
from nlrl.textify import StateLexicon, assemble_gridworld_eval_prompt, render_state, render_transition

FIXTURES = Path(__file__).parent / "fixtures"

# filled by test_acceptance, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def recorded_grids():
    """The four recorded 4x4 gridworld evaluation matrices, row-major."""
    doc = json.loads((FIXTURES / "gridworld_evaluations.json").read_text(encoding="utf-8"))
    return doc["iterations"]


def grid_table(mdp, grid, iteration):
    entries = {(r, c): LanguageValue(text=grid[r][c]) for r, c in mdp.states}
    return LanguageValueTable(entries, iteration)


def build_recorded_cache(directory: Path) -> int:
    """Write one transcript per (iteration, state): the prompt built from the previous
    recorded table, answered with the recorded evaluation."""
    mdp = build_gridworld()
    lex = StateLexicon.from_mdp(mdp)
    settings = LLM_DEFAULTS["gridworld"]
    grids = recorded_grids()
    previous = init_value_table(mdp)
    count = 0
    for k, grid in enumerate(grids, start=1):
        for s in mdp.non_terminal_states:
            rollouts = []
            for a in mdp.actions[s]:
                (o,) = mdp.outcomes[(s, a)]
                kind = mdp.terminal_kinds.get(o.next_state)
                text = render_transition(lex, s, mdp.action_name(a), o.reward, o.next_state, kind or False)
                rollouts.append((text, previous[o.next_state].render()))
            bundle = assemble_gridworld_eval_prompt(render_state(lex, s), rollouts)
            request = ChatRequest(
                settings.model,
                settings.temperature,
                (("system", bundle.system_text), ("user", bundle.user_text + bundle.trigger_text)),
            )
            entry = TranscriptEntry(request.prompt_hash(), request, grid[s[0]][s[1]], timestamp="recorded")
            persist_transcript(entry, directory)
            count += 1
        previous = grid_table(mdp, grid, k)
    return count


@pytest.fixture
def recorded_cache(tmp_path):
    directory = tmp_path / "recorded"
    build_recorded_cache(directory)
    return directory


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
