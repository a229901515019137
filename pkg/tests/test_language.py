from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlrl.aggregators import ConceptAggregator, score_concepts
from nlrl.errors import StateEvaluationFailed, UsageError
from nlrl.language import (
    INITIAL,
    MC_UPDATE,
    TD_UPDATE,
    LanguageValue,
    LanguageValueTable,
    build_outcome,
    init_value_table,
    language_q_estimate,
    mc_language_estimate,
    snapshot,
    td_language_estimate,
    trajectory_outcomes,
)
from nlrl.mdp import (
    FrozenLakeSpec,
    Outcome,
    PolicyTable,
    TabularMdp,
    build_frozenlake,
    build_gridworld,
    sample_trajectory,
)
from nlrl.runner import EstimateMode, evaluation_sweep
from nlrl.textify import NO_EVALUATION, ConceptEvaluation, StateLexicon

AGG = ConceptAggregator()


def bfs(mdp):
    dist = {s: 0 for s in mdp.terminals}
    queue = deque(mdp.terminals)
    while queue:
        s = queue.popleft()
        for (p, a), outs in mdp.outcomes.items():
            if p not in dist and any(o.next_state == s for o in outs):
                dist[p] = dist[s] + 1
                queue.append(p)
    return dist


def sweeps(mdp, n, policy=None, order=None):
    policy = policy or PolicyTable.uniform(mdp)
    table = init_value_table(mdp)
    out = [table]
    for _ in range(n):
        table, _ = evaluation_sweep(mdp, policy, table, AGG, order=order)
        out.append(table)
    return out


def test_init_table():
    mdp = build_gridworld()
    table = init_value_table(mdp)
    assert table[(0, 1)].text == NO_EVALUATION
    assert table[(0, 0)].text.startswith("The state is the terminal state.")
    assert table[(0, 1)].provenance == INITIAL and table.iteration == 0


def test_snapshot_is_frozen():
    mdp = build_gridworld()
    table = init_value_table(mdp)
    snap = snapshot(table)
    table[(0, 1)] = LanguageValue(text="changed")
    assert snap[(0, 1)].text == NO_EVALUATION
    assert snapshot(snap) is snap
    assert snap.iteration == 0
    with pytest.raises(TypeError):
        snap._entries[(0, 1)] = None


def test_language_value_holds_one_variant():
    with pytest.raises(UsageError):
        LanguageValue()
    with pytest.raises(UsageError):
        LanguageValue(text="a", concepts=ConceptEvaluation())


def test_value_json_round_trip():
    mdp = build_gridworld()
    table = sweeps(mdp, 2)[-1]
    back = LanguageValueTable.from_json(mdp, table.to_json(mdp), table.iteration)
    assert back == table


def test_td_estimate_stamps_provenance():
    mdp = build_gridworld()
    lex = StateLexicon.from_mdp(mdp)
    snap = snapshot(init_value_table(mdp))
    outs = [build_outcome(mdp, lex, snap, (0, 1), a, mdp.outcomes[((0, 1), a)][0].next_state, 0.25, -1.0) for a in mdp.actions[(0, 1)]]
    v = td_language_estimate((0, 1), outs, AGG)
    assert v.provenance == TD_UPDATE and v.iteration == 1
    assert v.concepts.safest_path == "(b) -> Move Left -> goal"


def test_td_estimate_rejects_mixed_snapshots():
    mdp = build_gridworld()
    lex = StateLexicon.from_mdp(mdp)
    t0 = init_value_table(mdp)
    s0 = snapshot(t0)
    s1 = snapshot(LanguageValueTable(dict(t0.entries), 1))
    a = build_outcome(mdp, lex, s0, (0, 1), "up", (0, 1), 0.5, -1.0)
    b = build_outcome(mdp, lex, s1, (0, 1), "left", (0, 0), 0.5, -1.0)
    with pytest.raises(UsageError):
        td_language_estimate((0, 1), [a, b], AGG)
    with pytest.raises(UsageError):
        td_language_estimate((0, 1), [], AGG)


def test_free_text_successor_fails_state():
    mdp = build_gridworld()
    lex = StateLexicon.from_mdp(mdp)
    table = init_value_table(mdp)
    table[(0, 2)] = LanguageValue(text="some prose")
    out = build_outcome(mdp, lex, snapshot(table), (0, 1), "right", (0, 2), 1.0, -1.0)
    with pytest.raises(StateEvaluationFailed) as e:
        td_language_estimate((0, 1), [out], AGG)
    assert e.value.state == (0, 1)


def test_terminals_never_overwritten():
    mdp = build_frozenlake()
    tables = sweeps(mdp, 3)
    for t in tables[1:]:
        for s in mdp.terminals:
            assert t[s] == tables[0][s]


def test_gridworld_converges_after_diameter():
    mdp = build_gridworld()
    tables = sweeps(mdp, 6)
    for k in range(3, 6):
        assert tables[k].same_values(tables[k + 1])
    assert not tables[2].same_values(tables[3])


@pytest.mark.parametrize("k", [1, 2, 3])
def test_information_flow_bound(k):
    mdp = build_gridworld()
    dist = bfs(mdp)
    table = sweeps(mdp, k)[-1]
    for s in mdp.non_terminal_states:
        known = table[s].concepts.safest_path != "None"
        assert known == (dist[s] <= k), s


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(14))), st.integers(1, 4))
def test_visit_order_does_not_matter(perm, n):
    mdp = build_gridworld()
    order = [mdp.non_terminal_states[i] for i in perm]
    assert sweeps(mdp, n)[-1] == sweeps(mdp, n, order=order)[-1]


def test_q_estimate_into_hole():
    mdp = build_frozenlake()
    lex = StateLexicon.from_mdp(mdp)
    snap = snapshot(init_value_table(mdp))
    outs = [build_outcome(mdp, lex, snap, (3, 1), "left", o.next_state, o.probability, o.reward) for o in mdp.outcomes[((3, 1), "left")]]
    q = language_q_estimate((3, 1), "left", outs, AGG)
    assert "(3,1) -> Move left -> (3,0) (hole), distance is 1" in q.concepts.immediate_risk


def test_q_estimate_into_goal():
    mdp = build_frozenlake_deterministic()
    lex = StateLexicon.from_mdp(mdp)
    snap = snapshot(init_value_table(mdp))
    (o,) = mdp.outcomes[((3, 2), "right")]
    q = language_q_estimate((3, 2), "right", [build_outcome(mdp, lex, snap, (3, 2), "right", o.next_state, 1.0, o.reward)], AGG)
    assert q.concepts.safest_path == "(3,2) -> Move right -> goal"


def build_frozenlake_deterministic():
    from nlrl.mdp import build_frozenlake as build

    return build(FrozenLakeSpec(p_forward=1.0, p_slip_left=0.0, p_slip_right=0.0))


def test_q_rejects_mixed_actions():
    mdp = build_gridworld()
    lex = StateLexicon.from_mdp(mdp)
    snap = snapshot(init_value_table(mdp))
    a = build_outcome(mdp, lex, snap, (0, 1), "up", (0, 1), 0.5, -1.0)
    b = build_outcome(mdp, lex, snap, (0, 1), "left", (0, 0), 0.5, -1.0)
    with pytest.raises(UsageError):
        language_q_estimate((0, 1), "up", [a, b], AGG)


def chain_mdp():
    """0 -> 1 -> 2 (goal) with a single action everywhere."""
    outcomes = {
        (0, "go"): (Outcome(1, 1.0, -1.0, False),),
        (1, "go"): (Outcome(2, 1.0, -1.0, True),),
        (2, "go"): (Outcome(2, 1.0, 0.0, True),),
    }
    return TabularMdp(states=(0, 1, 2), actions={s: ("go",) for s in range(3)}, outcomes=outcomes, terminal_kinds={2: "goal"})


def test_single_action_q_equals_v():
    mdp = chain_mdp()
    policy = PolicyTable.uniform(mdp)
    table = init_value_table(mdp)
    for _ in range(2):
        v_only, _ = evaluation_sweep(mdp, policy, table, AGG)
        v_q, q = evaluation_sweep(mdp, policy, table, AGG, use_q=True)
        for s in mdp.non_terminal_states:
            assert v_q[s].concepts == q.entries[(s, "go")].concepts == v_only[s].concepts
        table = v_only


def test_mc_never_reads_table():
    mdp = build_frozenlake()
    policy = PolicyTable.uniform(mdp)
    est = EstimateMode("mc", k=3, seed=11)
    blank = init_value_table(mdp)
    filled = sweeps(mdp, 3)[-1]
    a, _ = evaluation_sweep(mdp, policy, blank, AGG, est)
    b, _ = evaluation_sweep(mdp, policy, LanguageValueTable(filled.entries, 0), AGG, est)
    assert a == b
    assert all(a[s].provenance == MC_UPDATE for s in mdp.non_terminal_states)


@pytest.mark.parametrize("k", [2, 3, 5])
def test_mc_identical_trajectories_idempotent(k):
    mdp = build_frozenlake()
    lex = StateLexicon.from_mdp(mdp)
    traj = trajectory_outcomes(mdp, lex, sample_trajectory(mdp, PolicyTable.uniform(mdp), (2, 2), 3))
    one = mc_language_estimate((2, 2), [traj], AGG)
    many = mc_language_estimate((2, 2), [traj] * k, AGG)
    assert one == many


def test_mc_truncated_episode_is_marked():
    mdp = build_gridworld()
    stuck = PolicyTable.uniform_over(mdp, {s: ["up"] for s in mdp.non_terminal_states})
    lex = StateLexicon.from_mdp(mdp)
    traj = trajectory_outcomes(mdp, lex, sample_trajectory(mdp, stuck, (1, 1), 0, max_len=3))
    v = mc_language_estimate((1, 1), [traj], AGG)
    assert v.concepts.safest_path.endswith("episode truncated")


def test_sampled_td_is_seeded_and_order_free():
    mdp = build_frozenlake()
    policy = PolicyTable.uniform(mdp)
    est = EstimateMode("td_sampled", k=4, seed=5)
    table = sweeps(mdp, 2)[-1]
    a, _ = evaluation_sweep(mdp, policy, table, AGG, est)
    rev = list(reversed(mdp.non_terminal_states))
    b, _ = evaluation_sweep(mdp, policy, table, AGG, est, order=rev)
    assert a == b


def test_sampled_modes_need_seed():
    from nlrl.errors import ConfigError

    with pytest.raises(ConfigError):
        EstimateMode("td_sampled", k=3)
    with pytest.raises(ConfigError):
        EstimateMode("mc", k=0, seed=1)


def test_path_lengths_match_bfs_at_convergence():
    mdp = build_gridworld()
    dist = bfs(mdp)
    table = sweeps(mdp, 4)[-1]
    for s in mdp.non_terminal_states:
        assert score_concepts(table[s].concepts).path_length == dist[s]


def test_parallel_sweep_matches_serial():
    mdp = build_frozenlake()
    policy = PolicyTable.uniform(mdp)
    table = sweeps(mdp, 2)[-1]
    a, qa = evaluation_sweep(mdp, policy, table, AGG, use_q=True)
    b, qb = evaluation_sweep(mdp, policy, table, AGG, use_q=True, parallelism=4)
    assert a == b and qa == qb


def test_random_policy_sweep_is_deterministic():
    mdp = build_frozenlake()
    rng = np.random.default_rng(0)
    dist = {s: dict(zip(mdp.actions[s], map(float, rng.dirichlet(np.ones(4))))) for s in mdp.non_terminal_states}
    policy = PolicyTable(dist)
    table = init_value_table(mdp)
    a, _ = evaluation_sweep(mdp, policy, table, AGG)
    b, _ = evaluation_sweep(mdp, policy, table, AGG)
    assert a == b
