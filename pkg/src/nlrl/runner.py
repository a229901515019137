"""Evaluation / improvement sweeps and the two experiment protocols.

A run directory holds everything needed to re-report it::

    config.json  values_iter_{k}.json  qvalues_iter_{k}.json  policy_iter_{k}.json
    thoughts_iter_{k}.json  metrics.json  transcripts.jsonl
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .aggregators import (
    ConceptAggregator,
    DeterministicImprover,
    LlmAggregator,
    LlmImprover,
    LlmSettings,
    improve_policy_deterministic,
)
from .errors import ConfigError, NlrlError, SweepFailed
from .gateway import TRANSCRIPTS_FILE, CachePolicy, ChatGateway
from .language import (
    LanguageValueTable,
    QTable,
    TableSnapshot,
    TaskInstruction,
    build_outcome,
    init_value_table,
    language_q_estimate,
    mc_language_estimate,
    snapshot,
    state_value_from_actions,
    td_language_estimate,
    trajectory_outcomes,
)
from .mdp import (
    FrozenLakeSpec,
    GridWorldSpec,
    MetricsReport,
    PolicyTable,
    State,
    TabularMdp,
    build_env,
    env_spec_to_json,
    parse_env_spec,
    policy_value_metrics,
    sample_trajectory,
    value_iteration,
)
from .textify import StateLexicon, render_state

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ESTIMATE_MODES = ("td_exhaustive", "td_sampled", "mc")

# per-experiment LLM defaults: gridworld ran at temperature 1.0, frozen-lake at 0
LLM_DEFAULTS = {
    "gridworld": LlmSettings(model="gpt-4-1106-preview", temperature=1.0),
    "frozenlake": LlmSettings(model="gpt-4-0125-preview", temperature=0.0),
}


@dataclass(frozen=True)
class EstimateMode:
    mode: str = "td_exhaustive"
    k: int | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ESTIMATE_MODES:
            raise ConfigError(f"unknown estimate mode {self.mode!r}")
        if self.mode != "td_exhaustive":
            if self.k is None or self.k < 1 or self.seed is None:
                raise ConfigError(f"estimate mode {self.mode!r} needs k >= 1 and a seed")

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"mode": self.mode}
        if self.mode != "td_exhaustive":
            doc.update(k=self.k, seed=self.seed)
        return doc


@dataclass
class ExperimentConfig:
    env: GridWorldSpec | FrozenLakeSpec = field(default_factory=GridWorldSpec)
    iterations: int = 4
    aggregator: str = "deterministic"
    estimate: EstimateMode = field(default_factory=EstimateMode)
    improvement_enabled: bool = False
    task: TaskInstruction = field(default_factory=TaskInstruction)
    cache_mode: str = "cache_first"
    cache_dir: str | None = None
    parallelism: int = 1
    output_dir: str | None = None
    eval_sweeps: int = 1
    fresh_table: bool = False
    per_action_q: bool | None = None
    llm_model: str | None = None
    llm_temperature: float | None = None
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.eval_sweeps < 1:
            raise ConfigError("eval_sweeps must be at least 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if self.aggregator not in ("deterministic", "llm"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")

    @property
    def env_kind(self) -> str:
        return "gridworld" if isinstance(self.env, GridWorldSpec) else "frozenlake"

    @property
    def uses_q(self) -> bool:
        if self.per_action_q is not None:
            return self.per_action_q
        return self.improvement_enabled

    def llm_settings(self) -> LlmSettings:
        base = LLM_DEFAULTS[self.env_kind]
        return LlmSettings(
            model=self.llm_model or base.model,
            temperature=base.temperature if self.llm_temperature is None else self.llm_temperature,
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "env": env_spec_to_json(self.env),
            "iterations": self.iterations,
            "aggregator": self.aggregator,
            "estimate": self.estimate.to_json(),
            "improvement_enabled": self.improvement_enabled,
            "task": self.task.text,
            "cache": {"mode": self.cache_mode, "dir": self.cache_dir},
            "parallelism": self.parallelism,
            "output_dir": self.output_dir,
            "eval_sweeps": self.eval_sweeps,
            "fresh_table": self.fresh_table,
            "per_action_q": self.per_action_q,
            "llm": {"model": self.llm_model, "temperature": self.llm_temperature, "max_tokens": self.max_tokens},
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> ExperimentConfig:
        doc = dict(doc)
        version = doc.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
        known = {
            "env", "iterations", "aggregator", "estimate", "improvement_enabled", "task", "cache",
            "parallelism", "output_dir", "eval_sweeps", "fresh_table", "per_action_q", "llm",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "env" not in doc:
            raise ConfigError("config needs an 'env' section")
        kwargs: dict[str, Any] = {"env": parse_env_spec(doc["env"])}
        for key in ("iterations", "aggregator", "improvement_enabled", "parallelism", "output_dir",
                    "eval_sweeps", "fresh_table", "per_action_q"):
            if key in doc:
                kwargs[key] = doc[key]
        if "estimate" in doc:
            est = doc["estimate"]
            est = {"mode": est} if isinstance(est, str) else dict(est)
            kwargs["estimate"] = EstimateMode(**est)
        if "task" in doc:
            kwargs["task"] = TaskInstruction(doc["task"])
        cache = doc.get("cache") or {}
        kwargs["cache_mode"] = cache.get("mode", "cache_first")
        kwargs["cache_dir"] = cache.get("dir")
        llm = doc.get("llm") or {}
        kwargs["llm_model"] = llm.get("model")
        kwargs["llm_temperature"] = llm.get("temperature")
        kwargs["max_tokens"] = llm.get("max_tokens")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class IterationRecord:
    iteration: int
    values: LanguageValueTable
    qvalues: QTable | None
    policy_before: PolicyTable
    policy_after: PolicyTable
    metrics: MetricsReport
    thoughts: dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0
    changed_states: int = 0


@dataclass
class RunArtifacts:
    run_dir: Path | None
    config: dict[str, Any]
    records: list[IterationRecord]
    optimal_average: float
    transcript_count: int = 0
    network_calls: int = 0
    report_paths: list[Path] = field(default_factory=list)


# -- sweeps -----------------------------------------------------------------


def _rng(seed: int, iteration: int, index: int, salt: int = 0) -> np.random.Generator:
    # keyed per (sweep, state) so visit order cannot change the draws
    return np.random.default_rng([seed, iteration, index, salt])


def _td_outcomes(mdp, lexicon, snap, policy, s, estimate, action=None):
    """One-step outcomes for ``s``: every (action, next state) pair, or a single action's."""
    out = []
    if estimate.mode == "td_exhaustive":
        actions = [action] if action is not None else list(mdp.actions[s])
        for a in actions:
            pa = 1.0 if action is not None else policy.prob(s, a)
            if pa == 0:
                continue
            for o in mdp.outcomes[(s, a)]:
                out.append(build_outcome(mdp, lexicon, snap, s, a, o.next_state, pa * o.probability, o.reward))
        return out
    rng = _rng(estimate.seed, snap.iteration, mdp.index(s), 0 if action is None else 1 + mdp.actions[s].index(action))
    acts = mdp.actions[s]
    for _ in range(estimate.k):
        if action is None:
            a = acts[rng.choice(len(acts), p=[policy.prob(s, x) for x in acts])]
        else:
            a = action
        outs = mdp.outcomes[(s, a)]
        o = outs[rng.choice(len(outs), p=[x.probability for x in outs])]
        out.append(build_outcome(mdp, lexicon, snap, s, a, o.next_state, 1.0 / estimate.k, o.reward))
    return out


def _mc_trajectories(mdp, lexicon, policy, s, estimate, iteration, action=None):
    salt = 0 if action is None else 1 + mdp.actions[s].index(action)
    seeds = _rng(estimate.seed, iteration, mdp.index(s), salt).integers(0, 2**32, size=estimate.k)
    trajs = []
    for seed in seeds:
        traj = sample_trajectory(mdp, policy, s, int(seed), mdp.step_limit, first_action=action)
        trajs.append(trajectory_outcomes(mdp, lexicon, traj))
    return trajs


def _evaluate_state(mdp, lexicon, snap, policy, s, agg, estimate, use_q):
    """Return ``(V, {action: Q})`` for one state, reading only ``snap``."""
    k = snap.iteration
    if not use_q:
        if estimate.mode == "mc":
            return mc_language_estimate(s, _mc_trajectories(mdp, lexicon, policy, s, estimate, k), agg, k + 1), {}
        return td_language_estimate(s, _td_outcomes(mdp, lexicon, snap, policy, s, estimate), agg), {}
    q = {}
    for a in mdp.actions[s]:
        if estimate.mode == "mc":
            trajs = _mc_trajectories(mdp, lexicon, policy, s, estimate, k, action=a)
            q[a] = mc_language_estimate(s, trajs, agg, k + 1)
        else:
            q[a] = language_q_estimate(s, a, _td_outcomes(mdp, lexicon, snap, policy, s, estimate, action=a), agg)
    per_action = [(policy.prob(s, a), mdp.action_name(a), q[a]) for a in mdp.actions[s] if policy.prob(s, a) > 0]
    v = state_value_from_actions(s, render_state(lexicon, s), per_action, agg)
    return v, q


def evaluation_sweep(
    mdp: TabularMdp,
    policy: PolicyTable,
    table: LanguageValueTable | TableSnapshot,
    agg,
    estimate: EstimateMode = EstimateMode(),
    lexicon: StateLexicon | None = None,
    use_q: bool = False,
    order: Sequence[State] | None = None,
    parallelism: int = 1,
) -> tuple[LanguageValueTable, QTable | None]:
    """One synchronous sweep: every non-terminal state is re-estimated from the iteration-k snapshot.

    Terminal entries are copied through. ``order`` only changes the visit
    order; results are committed together at the end of the sweep.
    """
    lexicon = lexicon or StateLexicon.from_mdp(mdp)
    snap = snapshot(table)
    policy.validate(mdp)
    states = list(order) if order is not None else list(mdp.non_terminal_states)
    if sorted(map(mdp.index, states)) != sorted(map(mdp.index, mdp.non_terminal_states)):
        raise ConfigError("visit order must be a permutation of the non-terminal states")

    def work(s):
        return s, _evaluate_state(mdp, lexicon, snap, policy, s, agg, estimate, use_q)

    results: dict[State, tuple] = {}
    try:
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                futures = [pool.submit(work, s) for s in states]
                for fut in futures:
                    s, res = fut.result()
                    results[s] = res
        else:
            for s in states:
                _, res = work(s)
                results[s] = res
    except NlrlError as exc:
        failed = getattr(exc, "state", None)
        partial = {st: v for st, (v, _) in results.items()}
        raise SweepFailed(failed, exc, partial) from exc
    entries = {}
    for s in mdp.states:
        entries[s] = snap[s] if mdp.is_terminal(s) else results[s][0]
    qtable = None
    if use_q:
        qtable = QTable({(s, a): q for s in mdp.non_terminal_states for a, q in results[s][1].items()})
    return LanguageValueTable(entries, snap.iteration + 1), qtable


def improvement_sweep(
    mdp: TabularMdp,
    qtable: QTable,
    improver,
    lexicon: StateLexicon | None = None,
    task: TaskInstruction = TaskInstruction(),
    parallelism: int = 1,
) -> tuple[PolicyTable, dict[State, str]]:
    lexicon = lexicon or StateLexicon.from_mdp(mdp)
    names = dict(mdp.action_names)

    def work(s):
        q = qtable.for_state(mdp, s)
        if set(q) != set(mdp.actions[s]):
            raise ConfigError(f"language Q values missing at {s!r}")
        return improver.improve(render_state(lexicon, s), q, names, task)

    states = list(mdp.non_terminal_states)
    dist, thoughts = {}, {}
    try:
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                outs = list(pool.map(work, states))
        else:
            outs = [work(s) for s in states]
    except NlrlError as exc:
        raise SweepFailed(getattr(exc, "state", None), exc) from exc
    for s, (d, thought) in zip(states, outs):
        dist[s] = {a: d.get(a, 0.0) for a in mdp.actions[s]}
        thoughts[s] = thought
    policy = PolicyTable(dist)
    policy.validate(mdp)
    return policy, thoughts


def greedy_action_sets(
    mdp: TabularMdp, table: LanguageValueTable | TableSnapshot, lexicon: StateLexicon | None = None
) -> dict[State, frozenset]:
    """Best actions per state according to deterministic language Q values read from ``table``."""
    lexicon = lexicon or StateLexicon.from_mdp(mdp)
    agg = ConceptAggregator()
    snap = snapshot(table)
    uniform = PolicyTable.uniform(mdp)
    result = {}
    for s in mdp.non_terminal_states:
        _, q = _evaluate_state(mdp, lexicon, snap, uniform, s, agg, EstimateMode(), True)
        dist, _ = improve_policy_deterministic(render_state(lexicon, s), q, mdp.action_names)
        result[s] = frozenset(a for a, p in dist.items() if p > 0)
    return result


def compute_iteration_metrics(mdp: TabularMdp, policy: PolicyTable, iteration: int = 0) -> MetricsReport:
    return policy_value_metrics(mdp, policy, iteration)


def optimal_average(mdp: TabularMdp) -> float:
    _, greedy = value_iteration(mdp)
    return policy_value_metrics(mdp, greedy).average_value


# -- artifacts --------------------------------------------------------------


def _dump(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def metrics_to_json(mdp: TabularMdp, metrics: MetricsReport) -> dict[str, Any]:
    return {
        "iteration": metrics.iteration_index,
        "average_value": metrics.average_value,
        "per_state_value": {mdp.label(s): metrics.per_state_value[s] for s in mdp.states},
    }


def _grid_texts(mdp: TabularMdp, table: LanguageValueTable) -> list:
    if mdp.grid_shape is None:
        return [table[s].render() for s in mdp.states]
    h, w = mdp.grid_shape
    return [[table[(r, c)].render() for c in range(w)] for r in range(h)]


class _RunWriter:
    def __init__(self, run_dir: Path | None, mdp: TabularMdp):
        self.run_dir = run_dir
        self.mdp = mdp
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, doc: Any) -> None:
        if self.run_dir is not None:
            _dump(self.run_dir / name, doc)

    def table(self, k: int, table: LanguageValueTable, suffix: str = "") -> None:
        self.write(f"values_iter_{k}{suffix}.json", table.to_json(self.mdp))
        self.write(f"evaluations_iter_{k}{suffix}.json", _grid_texts(self.mdp, table))

    def metrics(self, records: list[MetricsReport], optimal: float) -> None:
        self.write(
            "metrics.json",
            {"optimal_average": optimal, "iterations": [metrics_to_json(self.mdp, m) for m in records]},
        )

    def transcripts(self, gateway: ChatGateway | None) -> int:
        if self.run_dir is None or gateway is None:
            return 0
        path = self.run_dir / TRANSCRIPTS_FILE
        with path.open("w", encoding="utf-8") as fh:
            for entry in gateway.used:
                fh.write(json.dumps(entry.to_json(), ensure_ascii=False) + "\n")
        return len(gateway.used)


def build_components(config: ExperimentConfig, mdp: TabularMdp, gateway: ChatGateway | None = None):
    if config.aggregator == "deterministic":
        return ConceptAggregator(), DeterministicImprover(), None
    if gateway is None:
        policy = CachePolicy(config.cache_mode, config.cache_dir)
        gateway = ChatGateway(policy, max_tokens=config.max_tokens)
    settings = config.llm_settings()
    family = "frozenlake" if (config.uses_q or config.env_kind == "frozenlake") else "gridworld"
    agg = LlmAggregator(gateway, family, settings)
    return agg, LlmImprover(gateway, settings), gateway


def _run(config: ExperimentConfig, gateway: ChatGateway | None, order_seed: int | None) -> RunArtifacts:
    mdp = build_env(config.env)
    lexicon = StateLexicon.from_mdp(mdp)
    agg, improver, gateway = build_components(config, mdp, gateway)
    run_dir = Path(config.output_dir) if config.output_dir else None
    writer = _RunWriter(run_dir, mdp)
    writer.write("config.json", config.to_json())

    policy = PolicyTable.uniform(mdp)
    table = init_value_table(mdp, lexicon)
    writer.table(0, table)
    writer.write("policy_iter_0.json", policy.to_json(mdp))
    opt = optimal_average(mdp)
    metrics = [compute_iteration_metrics(mdp, policy, 0)]
    records: list[IterationRecord] = []
    order_rng = np.random.default_rng(order_seed) if order_seed is not None else None

    def finish() -> RunArtifacts:
        writer.metrics(metrics, opt)
        count = writer.transcripts(gateway)
        return RunArtifacts(
            run_dir=run_dir,
            config=config.to_json(),
            records=records,
            optimal_average=opt,
            transcript_count=count,
            network_calls=gateway.network_calls if gateway else 0,
        )

    try:
        for k in range(1, config.iterations + 1):
            start = time.perf_counter()
            if config.fresh_table and config.improvement_enabled:
                table = init_value_table(mdp, lexicon)
            previous = table
            qtable = None
            for _ in range(config.eval_sweeps):
                order = None
                if order_rng is not None:
                    order = [mdp.non_terminal_states[i] for i in order_rng.permutation(len(mdp.non_terminal_states))]
                try:
                    table, qtable = evaluation_sweep(
                        mdp, policy, table, agg, config.estimate, lexicon,
                        use_q=config.uses_q, order=order, parallelism=config.parallelism,
                    )
                except SweepFailed as exc:
                    partial = LanguageValueTable(
                        {s: exc.partial.get(s, table[s]) for s in mdp.states}, table.iteration + 1
                    )
                    writer.table(table.iteration + 1, partial, suffix=".partial")
                    raise
            table = LanguageValueTable(table.entries, k)
            changed = sum(1 for s in mdp.non_terminal_states if _changed(previous[s], table[s]))
            before = policy
            thoughts: dict[State, str] = {}
            if config.improvement_enabled:
                policy, thoughts = improvement_sweep(mdp, qtable, improver, lexicon, config.task, config.parallelism)
            m = compute_iteration_metrics(mdp, policy, k)
            metrics.append(m)
            writer.table(k, table)
            if qtable is not None:
                writer.write(f"qvalues_iter_{k}.json", qtable.to_json(mdp))
            writer.write(f"policy_iter_{k}.json", policy.to_json(mdp))
            if thoughts:
                writer.write(f"thoughts_iter_{k}.json", {mdp.label(s): t for s, t in thoughts.items()})
            records.append(
                IterationRecord(
                    iteration=k,
                    values=table,
                    qvalues=qtable,
                    policy_before=before,
                    policy_after=policy,
                    metrics=m,
                    thoughts={mdp.label(s): t for s, t in thoughts.items()},
                    seconds=time.perf_counter() - start,
                    changed_states=changed,
                )
            )
    except NlrlError:
        finish()
        raise
    return finish()


def _changed(old, new) -> bool:
    return (old.text, old.concepts) != (new.text, new.concepts)


def run_policy_evaluation_experiment(
    config: ExperimentConfig, gateway: ChatGateway | None = None, order_seed: int | None = None
) -> RunArtifacts:
    """Evaluate the fixed uniform policy for ``config.iterations`` sweeps."""
    if config.improvement_enabled:
        raise ConfigError("policy evaluation experiments run with improvement disabled")
    return _run(config, gateway, order_seed)


def run_language_gpi(
    config: ExperimentConfig, gateway: ChatGateway | None = None, order_seed: int | None = None
) -> RunArtifacts:
    """Alternate evaluation and improvement, measuring each new policy exactly."""
    if not config.improvement_enabled:
        raise ConfigError("language GPI needs improvement_enabled = true")
    return _run(config, gateway, order_seed)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_json(doc)
