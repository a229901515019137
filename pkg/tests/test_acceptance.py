"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line and the lines are
repeated in the terminal summary."""

import json
import os
import time
from contextlib import contextmanager

import pytest

from conftest import ACCEPTANCE_LINES, recorded_grids, build_recorded_cache
from nlrl.aggregators import ConceptAggregator, LlmAggregator, Rank, score_concepts
from nlrl.cli import main
from nlrl.errors import SweepFailed
from nlrl.gateway import CachePolicy, ChatGateway
from nlrl.language import init_value_table
from nlrl.mdp import FrozenLakeSpec, PolicyTable, build_frozenlake, build_gridworld, exact_policy_evaluation, value_iteration
from nlrl.runner import (
    LLM_DEFAULTS,
    ExperimentConfig,
    evaluation_sweep,
    greedy_action_sets,
    optimal_average,
    run_language_gpi,
    run_policy_evaluation_experiment,
)
from test_language import bfs, sweeps
from test_mdp import brute_force_best, linear_solve, random_mdp
from test_textify import golden, grid_bundle

AGG = ConceptAggregator()
TRIGGER = "Start your answer with the sentence 'Final evaluation of the current state:'"


@contextmanager
def criterion(n, title, budget):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < budget, f"took {elapsed:.2f}s, budget {budget}s"
    except BaseException as exc:
        line = f"criterion {n} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        if isinstance(exc, pytest.skip.Exception):
            line = f"criterion {n} SKIP  {title}: {exc}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    line = f"criterion {n} PASS  {title} ({time.perf_counter() - start:.2f}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)


def test_c1_oracle_fixed_point():
    with criterion(1, "uniform-policy values match a linear solve", 1.0):
        mdp = build_gridworld()
        uniform = PolicyTable.uniform(mdp)
        v = exact_policy_evaluation(mdp, uniform)
        ref = linear_solve(mdp, uniform)
        assert all(abs(v[s] - ref[s]) < 1e-8 for s in mdp.states)
        assert abs(v[(0, 1)] + 14) < 1e-8
        assert abs(v[(0, 3)] + 22) < 1e-8


def test_c2_oracle_optimality():
    with criterion(2, "optimal values are -BFS distance, greedy matches brute force", 5.0):
        mdp = build_gridworld()
        v, greedy = value_iteration(mdp)
        dist = bfs(mdp)
        assert all(abs(v[s] + dist[s]) < 1e-9 for s in mdp.states)
        assert set(greedy.support((0, 3))) == {"left", "down"}
        for seed in range(100):
            m = random_mdp(seed)
            _, g = value_iteration(m)
            best = brute_force_best(m)
            gv = linear_solve(m, g)
            assert all(abs(gv[s] - best[s]) < 1e-9 for s in m.states), seed


def test_c3_language_evaluation_converges():
    with criterion(3, "greedy sets match the oracle within 4 sweeps and stay fixed", 1.0):
        mdp = build_gridworld()
        _, greedy = value_iteration(mdp)
        tables = sweeps(mdp, 6)
        sets = greedy_action_sets(mdp, tables[4])
        assert all(sets[s] == set(greedy.support(s)) for s in mdp.non_terminal_states)
        assert tables[4].same_values(tables[5]) and tables[5].same_values(tables[6])


@pytest.mark.parametrize("k", [1, 2, 3])
def test_c4_information_flow(k):
    with criterion(4, f"safest path known exactly within distance {k}", 1.0):
        mdp = build_gridworld()
        dist = bfs(mdp)
        table = sweeps(mdp, k)[-1]
        for s in mdp.non_terminal_states:
            assert (table[s].concepts.safest_path != "None") == (dist[s] <= k), s


def test_c5_prompt_fidelity():
    with criterion(5, "prompts match golden files byte for byte", 1.0):
        from nlrl.language import build_outcome, snapshot
        from nlrl.textify import StateLexicon, assemble_frozenlake_q_prompt, assemble_frozenlake_v_prompt

        g = grid_bundle((0, 3))
        assert g.system_text == golden("gridworld_g_iter0.system.txt")
        assert g.user_text + g.trigger_text == golden("gridworld_g_iter0.user.txt")
        assert TRIGGER in g.trigger_text
        b = grid_bundle((0, 1))
        assert b.user_text + b.trigger_text == golden("gridworld_b_iter0.user.txt")
        mdp = build_frozenlake()
        lex = StateLexicon.from_mdp(mdp)
        snap = snapshot(init_value_table(mdp))
        outs = [
            build_outcome(mdp, lex, snap, (1, 0), "left", o.next_state, o.probability, o.reward)
            for o in mdp.outcomes[((1, 0), "left")]
        ]
        q = assemble_frozenlake_q_prompt("(1,0)", "Move left", [(o.description, o.next_value.render()) for o in outs])
        assert q.system_text == golden("frozenlake_q.system.txt")
        assert q.user_text == golden("frozenlake_q_1_0_left.user.txt")
        v = assemble_frozenlake_v_prompt("(1,0)", [("Move left", "{}")])
        assert v.system_text == golden("frozenlake_v.system.txt")


def test_c6_gpi_improves(tmp_path):
    with criterion(6, "frozen-lake GPI is monotone, reaches 0.59 x optimal, avoids immediate risk", 10.0):
        cfg = ExperimentConfig(env=FrozenLakeSpec(), improvement_enabled=True, output_dir=str(tmp_path))
        art = run_language_gpi(cfg)
        mdp = build_frozenlake()
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        averages = [m["average_value"] for m in metrics["iterations"]]
        assert len(averages) == 5
        assert all(b >= a - 1e-12 for a, b in zip(averages, averages[1:]))
        assert averages[-1] >= 0.59 * optimal_average(mdp)
        for rec in art.records:
            for s in mdp.non_terminal_states:
                ranks = {a: score_concepts(q.concepts).rank for a, q in rec.qvalues.for_state(mdp, s).items()}
                if any(r is not Rank.IMMEDIATE_RISK for r in ranks.values()):
                    assert all(ranks[a] is not Rank.IMMEDIATE_RISK for a in rec.policy_after.support(s)), s


def _artifact_bytes(run_dir):
    names = sorted(p.name for p in run_dir.glob("values_iter_*.json")) + ["metrics.json", "report.md"]
    return {n: (run_dir / n).read_bytes() for n in names}


def test_c7_reproducibility(tmp_path):
    with criterion(7, "replay reruns and visit-order permutations give identical artifacts", 5.0):
        cache = tmp_path / "recorded"
        build_recorded_cache(cache)
        for name, cfg in {
            "grid": ExperimentConfig(aggregator="llm", cache_mode="replay_only", cache_dir=str(cache)),
            "lake": ExperimentConfig(env=FrozenLakeSpec(), improvement_enabled=True),
        }.items():
            assert main([_cmd(cfg), "--config", _save(tmp_path, name, cfg), "--out", str(tmp_path / name)]) == 0
            assert main(["replay", str(tmp_path / name), "--out", str(tmp_path / f"{name}-r1")]) == 0
            assert main(["replay", str(tmp_path / name), "--out", str(tmp_path / f"{name}-r2")]) == 0
            first = _artifact_bytes(tmp_path / f"{name}-r1")
            assert first == _artifact_bytes(tmp_path / f"{name}-r2")
            assert first == _artifact_bytes(tmp_path / name)
        grid = ExperimentConfig(aggregator="llm", cache_mode="replay_only", cache_dir=str(cache))
        lake = ExperimentConfig(env=FrozenLakeSpec(), improvement_enabled=True)
        for seed in (1, 2):
            a = run_policy_evaluation_experiment(grid, order_seed=seed)
            assert [r.values for r in a.records] == [r.values for r in run_policy_evaluation_experiment(grid).records]
            b = run_language_gpi(lake, order_seed=seed)
            base = run_language_gpi(lake)
            assert [(r.values, r.policy_after) for r in b.records] == [(r.values, r.policy_after) for r in base.records]


def _cmd(cfg):
    return "gpi-lake" if cfg.improvement_enabled else "eval-grid"


def _save(tmp_path, name, cfg):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg.to_json()))
    return str(path)


def test_c8_recorded_llm_pipeline(tmp_path):
    with criterion(8, "recorded transcripts reproduce the iteration-4 evaluation of g", 2.0):
        cache = tmp_path / "recorded"
        build_recorded_cache(cache)
        cfg = ExperimentConfig(aggregator="llm", cache_mode="replay_only", cache_dir=str(cache), output_dir=str(tmp_path / "run"))
        art = run_policy_evaluation_experiment(cfg)
        assert art.network_calls == 0
        g = art.records[-1].values[(0, 3)].text
        assert g.startswith("From state (g), the agent has two equally efficient paths")
        assert "Move Left" in g and "Go Down" in g
        grids = recorded_grids()
        for rec in art.records:
            for (r, c), v in rec.values.items():
                assert v.text == grids[rec.iteration - 1][r][c]
        stored = json.loads((tmp_path / "run" / "evaluations_iter_4.json").read_text())
        assert stored == grids[3]


def test_c9_live_llm_smoke(tmp_path):
    with criterion(9, "live gridworld sweep parses at least 90% of states", 600.0):
        if not os.environ.get("OPENAI_API_KEY"):
            pytest.skip("OPENAI_API_KEY not set")
        mdp = build_gridworld()
        gw = ChatGateway(CachePolicy("cache_first", tmp_path / "live"))
        agg = LlmAggregator(gw, "gridworld", LLM_DEFAULTS["gridworld"])
        try:
            table, _ = evaluation_sweep(mdp, PolicyTable.uniform(mdp), init_value_table(mdp), agg, parallelism=4)
            values = {s: table[s] for s in mdp.non_terminal_states}
        except SweepFailed as exc:
            values = exc.partial
        parsed = sum(1 for v in values.values() if v.conforming)
        record = {
            "parsed": parsed,
            "states": len(mdp.non_terminal_states),
            "network_calls": gw.network_calls,
            "evaluations": {mdp.label(s): v.render() for s, v in values.items()},
        }
        (tmp_path / "live_smoke.json").write_text(json.dumps(record, indent=2))
        print(json.dumps({k: record[k] for k in ("parsed", "states", "network_calls")}))
        assert parsed >= 0.9 * len(mdp.non_terminal_states)
