"""Command-line entry point: ``nlrl {oracle,eval-grid,gpi-lake,report,replay}``.

Exit status is 0 when the command finished and wrote its artifacts, 1 when a
run failed part way (the run directory is kept), and 2 for configuration or
usage problems.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, NlrlError, ReplayMiss, UsageError
from .mdp import (
    FrozenLakeSpec,
    GridWorldSpec,
    PolicyTable,
    TabularMdp,
    build_env,
    exact_policy_evaluation,
    parse_env_spec,
    policy_value_metrics,
    value_iteration,
)
from .reports import fmt3, write_report
from .runner import (
    EstimateMode,
    ExperimentConfig,
    RunArtifacts,
    load_config,
    run_language_gpi,
    run_policy_evaluation_experiment,
)

log = logging.getLogger("nlrl")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlrl", description="Language-valued policy iteration on tabular MDPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--aggregator", choices=("deterministic", "llm"))
        sp.add_argument("--cache", choices=("live", "cache_first", "replay_only"))
        sp.add_argument("--out", type=Path)
        sp.add_argument("--iterations", type=int)

    sp = sub.add_parser("oracle", help="exact DP values, greedy policy and uniform-policy evaluation")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--env", choices=("gridworld", "frozenlake"), default=None)
    sp.add_argument("--out", type=Path, default=Path("."))

    run_flags(sub.add_parser("eval-grid", help="language policy evaluation of the uniform policy"))
    run_flags(sub.add_parser("gpi-lake", help="language generalized policy iteration"))

    sp = sub.add_parser("report", help="write report.md and heatmap CSVs for a run directory")
    sp.add_argument("run_dir", type=Path)

    sp = sub.add_parser("replay", help="re-run a finished run from its recorded transcripts only")
    sp.add_argument("run_dir", type=Path)
    sp.add_argument("--out", type=Path)
    return p


def _default_config(command: str) -> ExperimentConfig:
    if command == "gpi-lake":
        return ExperimentConfig(env=FrozenLakeSpec(), improvement_enabled=True)
    return ExperimentConfig(env=GridWorldSpec())


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.aggregator:
        changes["aggregator"] = args.aggregator
    if args.cache:
        changes["cache_mode"] = args.cache
    if args.out:
        changes["output_dir"] = str(args.out)
    if args.seed is not None and cfg.estimate.mode != "td_exhaustive":
        changes["estimate"] = EstimateMode(cfg.estimate.mode, cfg.estimate.k, args.seed)
    cfg = replace(cfg, **changes)
    if cfg.output_dir is None:
        cfg = replace(cfg, output_dir=str(Path("runs") / args.command))
    if cfg.aggregator == "llm" and cfg.cache_dir is None:
        cfg = replace(cfg, cache_dir=str(Path(cfg.output_dir) / "cache"))
    return cfg


def _grid_lines(mdp: TabularMdp, cell) -> list[str]:
    if mdp.grid_shape is None:
        return [f"{mdp.label(s)}: {cell(s)}" for s in mdp.states]
    h, w = mdp.grid_shape
    return ["  ".join(f"{cell((r, c)):>10}" for c in range(w)) for r in range(h)]


def cmd_oracle(args) -> int:
    if args.config:
        doc = json.loads(args.config.read_text(encoding="utf-8"))
        spec = parse_env_spec(doc["env"] if "schema_version" in doc else doc)
    else:
        spec = FrozenLakeSpec() if args.env == "frozenlake" else GridWorldSpec()
    mdp = build_env(spec)
    v_opt, greedy = value_iteration(mdp)
    uniform = PolicyTable.uniform(mdp)
    v_uni = exact_policy_evaluation(mdp, uniform)
    opt = policy_value_metrics(mdp, greedy)
    uni = policy_value_metrics(mdp, uniform)

    def ties(s):
        return "-" if mdp.is_terminal(s) else "/".join(greedy.support(s))

    print("optimal values:")
    print("\n".join(_grid_lines(mdp, lambda s: f"{v_opt[s]:.4f}")))
    print("greedy actions:")
    print("\n".join(_grid_lines(mdp, ties)))
    print("uniform policy values:")
    print("\n".join(_grid_lines(mdp, lambda s: f"{v_uni[s]:.4f}")))
    print(f"optimal average value: {fmt3(opt.average_value)} ({opt.average_value:.6f})")
    print(f"uniform average value: {fmt3(uni.average_value)}")
    doc = {
        "env": mdp.kind,
        "optimal_average": opt.average_value,
        "uniform_average": uni.average_value,
        "optimal_values": {mdp.label(s): v_opt[s] for s in mdp.states},
        "uniform_values": {mdp.label(s): v_uni[s] for s in mdp.states},
        "greedy_actions": {mdp.label(s): list(greedy.support(s)) for s in mdp.non_terminal_states},
    }
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "oracle.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return 0


def _print_eval(art: RunArtifacts) -> None:
    for rec in art.records:
        if rec.changed_states == 0:
            print(f"iteration {rec.iteration}: converged")
        else:
            print(f"iteration {rec.iteration}: {rec.changed_states} states changed")


def _print_gpi(art: RunArtifacts, iteration_zero: float) -> None:
    print(f"iteration 0: average value {fmt3(iteration_zero)}")
    for rec in art.records:
        print(f"iteration {rec.iteration}: average value {fmt3(rec.metrics.average_value)}")
    print(f"optimal: average value {fmt3(art.optimal_average)}")


def _execute(cfg: ExperimentConfig) -> RunArtifacts:
    if cfg.improvement_enabled:
        art = run_language_gpi(cfg)
        mdp = build_env(cfg.env)
        _print_gpi(art, policy_value_metrics(mdp, PolicyTable.uniform(mdp)).average_value)
    else:
        art = run_policy_evaluation_experiment(cfg)
        _print_eval(art)
    write_report(cfg.output_dir)
    print(f"run directory: {cfg.output_dir}")
    return art


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else _default_config(args.command)
    cfg = _apply_overrides(cfg, args)
    if args.command == "gpi-lake" and not cfg.improvement_enabled:
        raise ConfigError("gpi-lake needs improvement_enabled = true")
    if args.command == "eval-grid" and cfg.improvement_enabled:
        raise ConfigError("eval-grid runs with improvement disabled")
    _execute(cfg)
    return 0


def cmd_report(args) -> int:
    for path in write_report(args.run_dir):
        print(path)
    return 0


def cmd_replay(args) -> int:
    cfg = load_config(args.run_dir / "config.json")
    out = args.out or args.run_dir.with_name(args.run_dir.name + "-replay")
    cfg = replace(cfg, cache_mode="replay_only", cache_dir=str(args.run_dir), output_dir=str(out))
    _execute(cfg)
    return 0


COMMANDS = {
    "oracle": cmd_oracle,
    "eval-grid": cmd_run,
    "gpi-lake": cmd_run,
    "report": cmd_report,
    "replay": cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NlrlError as exc:
        miss = _root_cause(exc, ReplayMiss)
        if miss is not None:
            print(f"error: replay cache miss: {miss}", file=sys.stderr)
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1


def _root_cause(exc: BaseException, kind: type) -> BaseException | None:
    while exc is not None:
        if isinstance(exc, kind):
            return exc
        exc = exc.__cause__
    return None


if __name__ == "__main__":
    sys.exit(main())
