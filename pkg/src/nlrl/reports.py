"""Markdown tables and heatmap CSVs built from a finished run directory."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .gateway import TRANSCRIPTS_FILE, load_transcripts
from .mdp import build_env, parse_env_spec

REPORT_FILE = "report.md"
REQUIRED = ("config.json", "metrics.json")


def fmt3(x: float) -> str:
    """Three decimals, ties to even on the decimal expansion (0.0625 -> 0.062)."""
    return str(Decimal(str(x)).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def emit_markdown_table(averages: Sequence[float], optimal: float | None = None, label: str = "Average value") -> str:
    header = ["", *(f"Iter {k}" for k in range(len(averages))), "Optimal"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    if averages:
        row = [label, *map(fmt3, averages), fmt3(optimal) if optimal is not None else ""]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_heatmap_csv(values: Mapping[tuple[int, int], float], height: int, width: int) -> str:
    rows = ["row,col,value"]
    for r in range(height):
        for c in range(width):
            rows.append(f"{r},{c},{fmt3(values[(r, c)])}")
    return "\n".join(rows) + "\n"


def missing_artifacts(run_dir: str | Path) -> list[str]:
    run_dir = Path(run_dir)
    return [name for name in REQUIRED if not (run_dir / name).is_file()]


def _transcript_digest(run_dir: Path) -> str | None:
    if not (run_dir / TRANSCRIPTS_FILE).exists():
        return None
    entries = list(load_transcripts(run_dir, lenient=True))
    unique = len({e.prompt_hash for e in entries})
    retried = sum(1 for e in entries if e.attempt > 1)
    return f"Transcripts: {len(entries)} exchanges, {unique} distinct prompts, {retried} needed a retry."


def build_report(run_dir: str | Path) -> dict[str, str]:
    """Return ``{file name: contents}`` for every report file of ``run_dir``."""
    run_dir = Path(run_dir)
    absent = missing_artifacts(run_dir)
    if absent:
        raise ConfigError(f"{run_dir} is missing: {', '.join(absent)}")
    config: dict[str, Any] = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    metrics: dict[str, Any] = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    mdp = build_env(parse_env_spec(config["env"]))
    records = metrics.get("iterations", [])
    averages = [m["average_value"] for m in records]
    parts = [
        f"# Run report: {config['env']['kind']}",
        "",
        f"Aggregator: {config['aggregator']}. Improvement: {'on' if config['improvement_enabled'] else 'off'}.",
        "",
        emit_markdown_table(averages, metrics.get("optimal_average")),
    ]
    digest = _transcript_digest(run_dir)
    if digest:
        parts += [digest, ""]
    files = {REPORT_FILE: "\n".join(parts)}
    if mdp.grid_shape is not None:
        h, w = mdp.grid_shape
        by_label = {mdp.label(s): s for s in mdp.states}
        for m in records:
            values = {by_label[k]: v for k, v in m["per_state_value"].items()}
            files[f"heatmap_iter_{m['iteration']}.csv"] = emit_heatmap_csv(values, h, w)
    return files


def write_report(run_dir: str | Path) -> list[Path]:
    run_dir = Path(run_dir)
    paths = []
    for name, text in build_report(run_dir).items():
        path = run_dir / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
