"""Finite MDPs, the gridworld and frozen-lake environments, and exact DP solvers.

States are arbitrary hashable ids (the two bundled environments use ``(row, col)``
tuples). Actions are short string ids; each environment also carries display
names for text rendering.
"""

from __future__ import annotations

import json
import warnings
from collections.abc import Hashable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, NamedTuple

import numpy as np

from .errors import ConfigError, DivergenceError, UsageError

State = Hashable
Action = str

MAX_SWEEPS = 100_000
PROB_ATOL = 1e-12

GRID_ACTIONS: tuple[Action, ...] = ("up", "left", "down", "right")
GRID_ACTION_NAMES = {"up": "Go Up", "left": "Move Left", "down": "Go Down", "right": "Move Right"}
# gym FrozenLake action-id order
LAKE_ACTIONS: tuple[Action, ...] = ("left", "down", "right", "up")
LAKE_ACTION_NAMES = {"left": "Move left", "down": "Move down", "right": "Move right", "up": "Move up"}

_MOVES = {"up": (-1, 0), "left": (0, -1), "down": (1, 0), "right": (0, 1)}
# clockwise order, used to find the two perpendicular slip directions
_CLOCKWISE = ("up", "right", "down", "left")

DEFAULT_LEXICON = ("fbkg", "ztmw", "ryqn", "jdex")
DEFAULT_LAKE_MAP = ("SFFF", "FHFH", "FFFH", "HFFG")


class Outcome(NamedTuple):
    next_state: State
    probability: float
    reward: float
    terminal: bool


@dataclass(frozen=True)
class TabularMdp:
    """A finite MDP with exhaustively enumerated transitions.

    ``terminal_kinds`` maps every terminal state to ``"goal"`` or ``"hole"``.
    Terminal states are absorbing: every action returns to the same state with
    zero reward.
    """

    states: tuple[State, ...]
    actions: Mapping[State, tuple[Action, ...]]
    outcomes: Mapping[tuple[State, Action], tuple[Outcome, ...]]
    gamma: float = 1.0
    start_states: frozenset = frozenset()
    terminal_kinds: Mapping[State, str] = field(default_factory=dict)
    action_names: Mapping[Action, str] = field(default_factory=dict)
    labels: Mapping[State, str] = field(default_factory=dict)
    grid_shape: tuple[int, int] | None = None
    step_limit: int = 200
    kind: str = "generic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", MappingProxyType(dict(self.actions)))
        object.__setattr__(self, "outcomes", MappingProxyType(dict(self.outcomes)))
        object.__setattr__(self, "terminal_kinds", MappingProxyType(dict(self.terminal_kinds)))
        object.__setattr__(self, "action_names", MappingProxyType(dict(self.action_names)))
        object.__setattr__(self, "labels", MappingProxyType(dict(self.labels)))
        object.__setattr__(self, "start_states", frozenset(self.start_states))
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.states)})
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if len(self._index) != len(self.states):
            raise ConfigError("duplicate state ids")
        for s in self.terminal_kinds:
            if s not in self._index:
                raise ConfigError(f"terminal state {s!r} is not a member of the state set")
        for s in self.states:
            acts = self.actions.get(s)
            if not acts:
                raise ConfigError(f"state {s!r} has no actions")
            for a in acts:
                outs = self.outcomes.get((s, a))
                if not outs:
                    raise ConfigError(f"no outcomes for ({s!r}, {a!r})")
                total = 0.0
                for o in outs:
                    if o.next_state not in self._index:
                        raise ConfigError(f"({s!r}, {a!r}) leads to unknown state {o.next_state!r}")
                    if o.probability < 0:
                        raise ConfigError(f"negative probability in ({s!r}, {a!r})")
                    if o.terminal != (o.next_state in self.terminal_kinds):
                        raise ConfigError(f"terminal flag mismatch in ({s!r}, {a!r})")
                    total += o.probability
                if abs(total - 1.0) > PROB_ATOL:
                    raise ConfigError(f"outcome probabilities of ({s!r}, {a!r}) sum to {total!r}")
                if s in self.terminal_kinds and outs != (Outcome(s, 1.0, 0.0, True),):
                    raise ConfigError(f"terminal state {s!r} is not absorbing with zero reward")

    @property
    def terminals(self) -> frozenset:
        return frozenset(self.terminal_kinds)

    @property
    def non_terminal_states(self) -> tuple[State, ...]:
        return tuple(s for s in self.states if s not in self.terminal_kinds)

    def is_terminal(self, s: State) -> bool:
        return s in self.terminal_kinds

    def index(self, s: State) -> int:
        try:
            return self._index[s]
        except KeyError:
            raise UsageError(f"unknown state {s!r}") from None

    def label(self, s: State) -> str:
        return self.labels.get(s, str(s))

    def action_name(self, a: Action) -> str:
        return self.action_names.get(a, a)

    def relabel(self, mapping: Mapping[State, State]) -> TabularMdp:
        """Return an isomorphic MDP with every state id replaced via ``mapping``."""
        m = dict(mapping)
        return TabularMdp(
            states=tuple(m[s] for s in self.states),
            actions={m[s]: a for s, a in self.actions.items()},
            outcomes={
                (m[s], a): tuple(o._replace(next_state=m[o.next_state]) for o in outs)
                for (s, a), outs in self.outcomes.items()
            },
            gamma=self.gamma,
            start_states=frozenset(m[s] for s in self.start_states),
            terminal_kinds={m[s]: k for s, k in self.terminal_kinds.items()},
            action_names=self.action_names,
            labels={m[s]: v for s, v in self.labels.items()},
            step_limit=self.step_limit,
        )


@dataclass(frozen=True)
class GridWorldSpec:
    width: int = 4
    height: int = 4
    terminal_cells: frozenset = frozenset({(0, 0), (3, 3)})
    step_penalty: float = -1.0
    lexicon: tuple[str, ...] = DEFAULT_LEXICON

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError("grid dimensions must be positive")
        if not self.step_penalty < 0:
            raise ConfigError(f"step_penalty must be negative, got {self.step_penalty}")
        if len(self.lexicon) != self.height or any(len(row) != self.width for row in self.lexicon):
            raise ConfigError("lexicon must name every cell exactly once (one string per row)")
        letters = "".join(self.lexicon)
        if len(set(letters)) != len(letters):
            raise ConfigError("lexicon names must be unique")
        for cell in self.terminal_cells:
            r, c = cell
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise ConfigError(f"terminal cell {cell} lies outside the grid")


@dataclass(frozen=True)
class FrozenLakeSpec:
    tiles: tuple[str, ...] = DEFAULT_LAKE_MAP
    p_forward: float = 1 / 3
    p_slip_left: float = 1 / 3
    p_slip_right: float = 1 / 3
    goal_reward: float = 1.0
    step_limit: int = 200
    gamma: float = 1.0

    def validate(self) -> None:
        if not self.tiles:
            raise ConfigError("frozen-lake map is empty")
        width = len(self.tiles[0])
        for i, row in enumerate(self.tiles):
            bad = set(row) - set("SFHG")
            if bad:
                raise ConfigError(f"map row {i} {row!r} contains invalid tiles {''.join(sorted(bad))!r}")
            if len(row) != width or not row:
                raise ConfigError(f"map row {i} {row!r} has length {len(row)}, expected {width}")
        text = "".join(self.tiles)
        if text.count("S") != 1:
            raise ConfigError(f"map needs exactly one Start tile, found {text.count('S')}")
        if "G" not in text:
            raise ConfigError("map needs at least one Goal tile")
        probs = (self.p_forward, self.p_slip_left, self.p_slip_right)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > PROB_ATOL:
            raise ConfigError(f"slip probabilities {probs} must be non-negative and sum to 1")
        if self.step_limit < 1:
            raise ConfigError("step_limit must be at least 1")


def _merge(raw: Iterable[Outcome]) -> tuple[Outcome, ...]:
    merged: dict[State, Outcome] = {}
    for o in raw:
        if o.probability == 0:
            continue
        if o.next_state in merged:
            prev = merged[o.next_state]
            merged[o.next_state] = prev._replace(probability=prev.probability + o.probability)
        else:
            merged[o.next_state] = o
    return tuple(merged.values())


def _step(cell, move, height, width):
    r, c = cell
    dr, dc = _MOVES[move]
    nr, nc = r + dr, c + dc
    if 0 <= nr < height and 0 <= nc < width:
        return (nr, nc)
    return cell


def build_gridworld(spec: GridWorldSpec = GridWorldSpec()) -> TabularMdp:
    spec.validate()
    cells = [(r, c) for r in range(spec.height) for c in range(spec.width)]
    terminals = {cell: "goal" for cell in cells if cell in spec.terminal_cells}
    actions = {cell: GRID_ACTIONS for cell in cells}
    outcomes = {}
    for cell in cells:
        for a in GRID_ACTIONS:
            if cell in terminals:
                outcomes[(cell, a)] = (Outcome(cell, 1.0, 0.0, True),)
                continue
            nxt = _step(cell, a, spec.height, spec.width)
            outcomes[(cell, a)] = (Outcome(nxt, 1.0, float(spec.step_penalty), nxt in terminals),)
    return TabularMdp(
        states=tuple(cells),
        actions=actions,
        outcomes=outcomes,
        gamma=1.0,
        start_states=frozenset(c for c in cells if c not in terminals),
        terminal_kinds=terminals,
        action_names=GRID_ACTION_NAMES,
        labels={(r, c): spec.lexicon[r][c] for r, c in cells},
        grid_shape=(spec.height, spec.width),
        kind="gridworld",
    )


def build_frozenlake(spec: FrozenLakeSpec = FrozenLakeSpec()) -> TabularMdp:
    spec.validate()
    height, width = len(spec.tiles), len(spec.tiles[0])
    cells = [(r, c) for r in range(height) for c in range(width)]
    tile = {(r, c): spec.tiles[r][c] for r, c in cells}
    terminals = {cell: ("goal" if t == "G" else "hole") for cell, t in tile.items() if t in "HG"}
    actions = {cell: LAKE_ACTIONS for cell in cells}
    outcomes = {}
    for cell in cells:
        for a in LAKE_ACTIONS:
            if cell in terminals:
                outcomes[(cell, a)] = (Outcome(cell, 1.0, 0.0, True),)
                continue
            i = _CLOCKWISE.index(a)
            slips = (
                (_CLOCKWISE[(i - 1) % 4], spec.p_slip_left),
                (a, spec.p_forward),
                (_CLOCKWISE[(i + 1) % 4], spec.p_slip_right),
            )
            raw = []
            for move, p in slips:
                nxt = _step(cell, move, height, width)
                reward = float(spec.goal_reward) if tile[nxt] == "G" else 0.0
                raw.append(Outcome(nxt, p, reward, nxt in terminals))
            outcomes[(cell, a)] = _merge(raw)
    return TabularMdp(
        states=tuple(cells),
        actions=actions,
        outcomes=outcomes,
        gamma=spec.gamma,
        start_states=frozenset(c for c, t in tile.items() if t == "S"),
        terminal_kinds=terminals,
        action_names=LAKE_ACTION_NAMES,
        labels={(r, c): f"{r},{c}" for r, c in cells},
        grid_shape=(height, width),
        step_limit=spec.step_limit,
        kind="frozenlake",
    )


def parse_env_spec(doc: Mapping[str, Any]) -> GridWorldSpec | FrozenLakeSpec:
    """Build an environment spec from a JSON-style mapping with a ``kind`` key."""
    doc = dict(doc)
    kind = doc.pop("kind", None)
    try:
        if kind == "gridworld":
            if "terminal_cells" in doc:
                doc["terminal_cells"] = frozenset(tuple(c) for c in doc["terminal_cells"])
            if "lexicon" in doc:
                lex = doc["lexicon"]
                doc["lexicon"] = tuple(lex.split()) if isinstance(lex, str) else tuple(lex)
            spec = GridWorldSpec(**doc)
        elif kind == "frozenlake":
            if "map" in doc:
                doc["tiles"] = doc.pop("map")
            if isinstance(doc.get("tiles"), str):
                rows = doc["tiles"].replace("/", "\n").strip().splitlines()
                doc["tiles"] = tuple(line.strip() for line in rows)
            elif "tiles" in doc:
                doc["tiles"] = tuple(doc["tiles"])
            spec = FrozenLakeSpec(**doc)
        else:
            raise ConfigError(f"unknown environment kind {kind!r}")
    except TypeError as exc:
        raise ConfigError(f"bad {kind} spec: {exc}") from None
    spec.validate()
    return spec


def env_spec_to_json(spec: GridWorldSpec | FrozenLakeSpec) -> dict[str, Any]:
    if isinstance(spec, GridWorldSpec):
        return {
            "kind": "gridworld",
            "width": spec.width,
            "height": spec.height,
            "terminal_cells": sorted([list(c) for c in spec.terminal_cells]),
            "step_penalty": spec.step_penalty,
            "lexicon": list(spec.lexicon),
        }
    return {
        "kind": "frozenlake",
        "map": "\n".join(spec.tiles),
        "p_forward": spec.p_forward,
        "p_slip_left": spec.p_slip_left,
        "p_slip_right": spec.p_slip_right,
        "goal_reward": spec.goal_reward,
        "step_limit": spec.step_limit,
        "gamma": spec.gamma,
    }


def build_env(spec: GridWorldSpec | FrozenLakeSpec) -> TabularMdp:
    if isinstance(spec, GridWorldSpec):
        return build_gridworld(spec)
    return build_frozenlake(spec)


def load_env(path: str | Path) -> TabularMdp:
    return build_env(parse_env_spec(json.loads(Path(path).read_text())))


def enumerate_outcomes(mdp: TabularMdp, s: State, a: Action) -> list[Outcome]:
    """Exhaustive one-step outcome list for a non-terminal state and legal action."""
    mdp.index(s)
    if mdp.is_terminal(s):
        raise UsageError(f"state {s!r} is terminal")
    if a not in mdp.actions[s]:
        raise UsageError(f"action {a!r} is not available in state {s!r}")
    return list(mdp.outcomes[(s, a)])


# -- policies ---------------------------------------------------------------


@dataclass(frozen=True)
class PolicyTable:
    """Per-state action distributions over non-terminal states."""

    dist: Mapping[State, Mapping[Action, float]]

    def __post_init__(self) -> None:
        frozen = {s: MappingProxyType(dict(d)) for s, d in self.dist.items()}
        object.__setattr__(self, "dist", MappingProxyType(frozen))

    def __getitem__(self, s: State) -> Mapping[Action, float]:
        return self.dist[s]

    def __contains__(self, s: State) -> bool:
        return s in self.dist

    def prob(self, s: State, a: Action) -> float:
        return self.dist[s].get(a, 0.0)

    def support(self, s: State) -> tuple[Action, ...]:
        return tuple(a for a, p in self.dist[s].items() if p > 0)

    def validate(self, mdp: TabularMdp) -> None:
        for s in mdp.non_terminal_states:
            if s not in self.dist:
                raise UsageError(f"policy is undefined at state {s!r}")
        for s, d in self.dist.items():
            legal = set(mdp.actions[s])
            if set(d) - legal:
                raise UsageError(f"policy uses illegal actions {sorted(set(d) - legal)} at {s!r}")
            if min(d.values(), default=0.0) < 0 or abs(sum(d.values()) - 1.0) > PROB_ATOL:
                raise UsageError(f"policy at {s!r} is not a probability distribution")

    @classmethod
    def uniform(cls, mdp: TabularMdp) -> PolicyTable:
        return cls({s: {a: 1.0 / len(mdp.actions[s]) for a in mdp.actions[s]} for s in mdp.non_terminal_states})

    @classmethod
    def uniform_over(cls, mdp: TabularMdp, choices: Mapping[State, Iterable[Action]]) -> PolicyTable:
        dist = {}
        for s, acts in choices.items():
            acts = [a for a in mdp.actions[s] if a in set(acts)]
            dist[s] = {a: (1.0 / len(acts) if a in acts else 0.0) for a in mdp.actions[s]}
        return cls(dist)

    def to_json(self, mdp: TabularMdp) -> dict[str, dict[str, float]]:
        return {mdp.label(s): dict(self.dist[s]) for s in mdp.states if s in self.dist}


@dataclass(frozen=True)
class NumericValueTable:
    values: Mapping[State, float]

    def __getitem__(self, s: State) -> float:
        return self.values[s]


@dataclass(frozen=True)
class MetricsReport:
    per_state_value: Mapping[State, float]
    average_value: float
    iteration_index: int = 0


class TrajectorySample(NamedTuple):
    steps: tuple[tuple[State, Action, float], ...]
    terminated: bool
    final_state: State


# -- dynamic programming ----------------------------------------------------


def _policy_arrays(mdp: TabularMdp, policy: PolicyTable):
    n = len(mdp.states)
    P = np.zeros((n, n))
    r = np.zeros(n)
    for s in mdp.non_terminal_states:
        i = mdp.index(s)
        for a, pa in policy[s].items():
            if pa == 0:
                continue
            for o in mdp.outcomes[(s, a)]:
                j = mdp.index(o.next_state)
                P[i, j] += pa * o.probability
                r[i] += pa * o.probability * o.reward
    return P, r


def exact_policy_evaluation(mdp: TabularMdp, policy: PolicyTable, tol: float = 1e-10) -> NumericValueTable:
    """Iterate the Bellman expectation backup until the sup-norm residual drops below ``tol``.

    Terminal rows stay at zero. The returned table is the last iterate whose
    one-step residual was measured below ``tol``.
    """
    if tol <= 0:
        raise UsageError("tol must be positive")
    policy.validate(mdp)
    P, r = _policy_arrays(mdp, policy)
    v = np.zeros(len(mdp.states))
    for _ in range(MAX_SWEEPS):
        v_new = r + mdp.gamma * (P @ v)
        if np.max(np.abs(v_new - v), initial=0.0) < tol:
            return NumericValueTable({s: float(v[mdp.index(s)]) for s in mdp.states})
        v = v_new
    raise DivergenceError(f"policy evaluation did not converge within {MAX_SWEEPS} sweeps")


def q_values(mdp: TabularMdp, values: Mapping[State, float], s: State) -> dict[Action, float]:
    return {
        a: sum(o.probability * (o.reward + mdp.gamma * values[o.next_state]) for o in mdp.outcomes[(s, a)])
        for a in mdp.actions[s]
    }


def greedy_policy(mdp: TabularMdp, values: Mapping[State, float], atol: float = 1e-8) -> PolicyTable:
    """Uniform mass over every action within ``atol`` of the best one-step lookahead."""
    choices = {}
    for s in mdp.non_terminal_states:
        q = q_values(mdp, values, s)
        best = max(q.values())
        choices[s] = [a for a in mdp.actions[s] if q[a] >= best - atol]
    return PolicyTable.uniform_over(mdp, choices)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10) -> tuple[NumericValueTable, PolicyTable]:
    if tol <= 0:
        raise UsageError("tol must be positive")
    n = len(mdp.states)
    # stacked (state, action) rows; terminal rows stay out so their value is pinned at 0
    rows, owners = [], []
    for s in mdp.non_terminal_states:
        for a in mdp.actions[s]:
            p = np.zeros(n)
            rew = 0.0
            for o in mdp.outcomes[(s, a)]:
                p[mdp.index(o.next_state)] += o.probability
                rew += o.probability * o.reward
            rows.append((p, rew))
            owners.append(mdp.index(s))
    v = np.zeros(n)
    if rows:
        P = np.array([p for p, _ in rows])
        R = np.array([rew for _, rew in rows])
        owners_arr = np.array(owners)
        for _ in range(MAX_SWEEPS):
            q = R + mdp.gamma * (P @ v)
            v_new = np.zeros(n)
            v_new[:] = -np.inf
            np.maximum.at(v_new, owners_arr, q)
            v_new[~np.isfinite(v_new)] = 0.0
            if np.max(np.abs(v_new - v)) < tol:
                v = v_new
                break
            v = v_new
        else:
            raise DivergenceError(f"value iteration did not converge within {MAX_SWEEPS} sweeps")
    values = {s: float(v[mdp.index(s)]) for s in mdp.states}
    return NumericValueTable(values), greedy_policy(mdp, values)


def policy_value_metrics(mdp: TabularMdp, policy: PolicyTable, iteration_index: int = 0) -> MetricsReport:
    """Exact per-state values of ``policy`` and their mean over non-terminal states."""
    values = exact_policy_evaluation(mdp, policy).values
    live = mdp.non_terminal_states
    if not live:
        warnings.warn("MDP has no non-terminal states; average value defined as 0", stacklevel=2)
        avg = 0.0
    else:
        avg = float(np.mean([values[s] for s in live]))
    return MetricsReport(dict(values), avg, iteration_index)


def sample_trajectory(
    mdp: TabularMdp,
    policy: PolicyTable,
    s0: State,
    seed: int,
    max_len: int | None = None,
    first_action: Action | None = None,
) -> TrajectorySample:
    """Roll out ``policy`` from ``s0`` until a terminal state or ``max_len`` steps.

    ``first_action`` forces the opening move, which is how action-value
    rollouts are drawn.
    """
    max_len = mdp.step_limit if max_len is None else max_len
    if max_len < 1:
        raise UsageError("max_len must be at least 1")
    mdp.index(s0)
    rng = np.random.default_rng(seed)
    steps = []
    s = s0
    while not mdp.is_terminal(s) and len(steps) < max_len:
        if first_action is not None and not steps:
            a = first_action
        else:
            acts = mdp.actions[s]
            a = acts[rng.choice(len(acts), p=[policy.prob(s, x) for x in acts])]
        outs = mdp.outcomes[(s, a)]
        o = outs[rng.choice(len(outs), p=[x.probability for x in outs])]
        steps.append((s, a, o.reward))
        s = o.next_state
    return TrajectorySample(tuple(steps), mdp.is_terminal(s), s)


def trajectory_return(mdp: TabularMdp, traj: TrajectorySample) -> float:
    return sum(r * mdp.gamma**t for t, (_, _, r) in enumerate(traj.steps))
