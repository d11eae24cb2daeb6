"""One-factor-at-a-time ablation grid with a relative-delta summary.

Every grid point changes a single knob of a shared baseline configuration,
trains into its own run directory, and is scored on the same held-out
multiple-choice set. Deltas are accuracy differences in points against the
baseline.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .adaptation import FREEZE_GRID
from .checkpoint import save_checkpoint
from .config import RunConfig, apply_overrides, from_dict, write_resolved
from .data import DOMAINS, SynthSpec, synth_dataset
from .errors import ConfigError
from .plotting import plot_ablation
from .runner import (
    CHECKPOINT_NAME,
    CONFIG_NAME,
    LOSSES_NAME,
    REPORT_NAME,
    eval_samples,
    evaluate_mc,
    fit,
    prepare_bundle,
    run_dir,
    template_for,
    training_samples,
)
from .training import precompute_mels, write_loss_csv

log = logging.getLogger(__name__)

# knob -> allowed values; "off" is the baseline for layer aggregation
GRID_DIMENSIONS = {
    "stack": ["1", "2", "4", "8"],
    "layer_agg": ["off", "3", "6", "12"],
    "layer_agg_position": ["before", "after"],
    "freeze": list(FREEZE_GRID),
    "stages": ["1", "2"],
}
DEFAULT_GRID = {k: list(v) for k, v in GRID_DIMENSIONS.items()}
EVAL_SEED_OFFSET = 7919
COLUMNS = ("total", *DOMAINS)

# desk-scale baseline: 24-layer encoder so every 3/6/12 are all valid
ABLATION_BASE = {
    "preset": "toy-deep",
    "train": {"lr_max": 0.01, "batch_size": 8, "max_steps": 24, "audio_max_seconds": 1.0},
    "data": {"synth": {"n_clips": 16, "formats": ["mc"], "clip_seconds": 1.0}},
    "base": {"pretrain_steps": 60, "n_clips": 128},
    "generation": {"temperature": 0.0, "max_new_tokens": 16},
}


@dataclass
class GridPoint:
    name: str
    group: str
    overrides: dict = field(default_factory=dict)


def parse_grid(items: list[str] | None) -> dict[str, list[str]]:
    """``["stack=1,2,4,8", "freeze=all,frozen_lm"]`` -> {knob: values}.

    With no items the full default grid is returned.
    """
    if not items:
        return {k: list(v) for k, v in DEFAULT_GRID.items()}
    grid: dict[str, list[str]] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid item {item!r} is not knob=v1,v2,...")
        knob, raw = item.split("=", 1)
        knob = knob.strip()
        if knob not in GRID_DIMENSIONS:
            raise ConfigError(f"unknown grid knob {knob!r}; choose from {', '.join(GRID_DIMENSIONS)}")
        values = [v.strip() for v in raw.split(",") if v.strip()]
        bad = [v for v in values if v not in GRID_DIMENSIONS[knob]]
        if not values or bad:
            raise ConfigError(f"grid {knob}: values must be from {GRID_DIMENSIONS[knob]}, got {values}")
        grid[knob] = grid.get(knob, []) + [v for v in values if v not in grid.get(knob, [])]
    if "layer_agg_position" in grid and "layer_agg" not in grid:
        grid["layer_agg"] = [v for v in GRID_DIMENSIONS["layer_agg"] if v != "off"]
    return grid


def grid_points(grid: dict[str, list[str]]) -> list[GridPoint]:
    """Baseline first, then one point per non-baseline knob value."""
    points = [GridPoint("baseline", "baseline", {})]
    for k in grid.get("stack", []):
        points.append(GridPoint(f"stack-{k}", "stack", {"connector": {"reduction": "stack", "k": int(k)}}))
    positions = grid.get("layer_agg_position", GRID_DIMENSIONS["layer_agg_position"])
    for pos in positions:
        for every in grid.get("layer_agg", []):
            if every == "off":
                continue
            points.append(
                GridPoint(
                    f"agg{every}-{pos}",
                    f"layer_agg_{pos}",
                    {"connector": {"layer_agg_every": int(every), "layer_agg_position": pos}},
                )
            )
    for name in grid.get("freeze", []):
        if name == "all":
            continue
        points.append(GridPoint(f"freeze-{name}", "freeze", {"freeze": FREEZE_GRID[name].to_dict()}))
    for st in grid.get("stages", []):
        if st != "1":
            points.append(GridPoint("two-stage", "stages", {"stages": int(st)}))
    return points


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def point_config(base: dict, point: GridPoint) -> RunConfig:
    return from_dict(_merge(base, point.overrides))


def held_out_samples(cfg: RunConfig, base_dir=None):
    if cfg.data.eval_manifests:
        return eval_samples(cfg, base_dir)
    return synth_dataset(SynthSpec.from_dict(cfg.data.synth), seed=cfg.seed + EVAL_SEED_OFFSET)


def accuracy_row(acc: dict) -> dict[str, float]:
    row = {"total": acc["micro"]}
    for d in DOMAINS:
        row[d] = acc["per_domain"].get(d, float("nan"))
    return row


def delta_rows(results: list[dict]) -> list[dict]:
    """Relative deltas (points) of every point against the first (baseline) row."""
    base = results[0]["accuracy"]
    rows = []
    for r in results:
        row = {"name": r["name"], "group": r["group"]}
        for c in COLUMNS:
            row[c] = r["accuracy"][c]
            row[f"d_{c}"] = r["accuracy"][c] - base[c]
        rows.append(row)
    return rows


def format_delta_table(rows: list[dict]) -> str:
    head = ["ablation", "Total", "Sound", "Music", "Speech"]
    lines = [head]
    for r in rows:
        if r["name"] == "baseline":
            cells = [f"{r[c]:.1f}" for c in COLUMNS]
        else:
            cells = [f"{r['d_' + c]:+.1f}" for c in COLUMNS]
        lines.append([r["name"], *cells])
    w = [max(len(line[i]) for line in lines) for i in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w[0]) if i == 0 else cell.rjust(w[i]) for i, cell in enumerate(line)) for line in lines)


def delta_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    fields = ["name", "group", *COLUMNS, *(f"d_{c}" for c in COLUMNS)]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]) for k in fields})
    return buf.getvalue()


def run_ablation(base: dict | None, grid: dict[str, list[str]], out_dir, seed: int = 0, base_dir=None) -> list[dict]:
    """Train and score every grid point; writes per-point run dirs plus
    ``ablation.csv``, ``ablation.json``, ``report.json`` and ``ablation.png``."""
    base = apply_overrides(base if base is not None else ABLATION_BASE, [f"seed={seed}", f"train.seed={seed}"])
    points = grid_points(grid)
    configs = [point_config(base, p) for p in points]
    out = Path(out_dir)
    results = []
    with run_dir(out) as root:
        (root / CONFIG_NAME).write_text(
            json.dumps({**base, "_run": {"command": "ablate", "grid": grid, "seed": seed}}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        eval_set = held_out_samples(configs[0], base_dir)
        for point, cfg in zip(points, configs):
            log.info("ablation point %s", point.name)
            with run_dir(root / point.name) as pdir:
                write_resolved(cfg, pdir / CONFIG_NAME, {"command": "ablate", "point": point.name, "seed": seed})
                samples = training_samples(cfg, base_dir)
                bundle = prepare_bundle(cfg)
                result = fit(cfg, samples, bundle, base_dir=base_dir)
                write_loss_csv(pdir / LOSSES_NAME, result.history)
                save_checkpoint(bundle, pdir / CHECKPOINT_NAME, result.step, None, None, {"run": cfg.to_dict()})
                mels = precompute_mels(eval_set, cfg.train.audio_max_seconds, base_dir)
                records, acc = evaluate_mc(bundle, eval_set, cfg.generation, template_for(cfg), cfg.train.audio_max_seconds, base_dir, mels)
                summary = {
                    "name": point.name,
                    "group": point.group,
                    "overrides": point.overrides,
                    "final_loss": result.losses[-1],
                    "accuracy": accuracy_row(acc),
                    "counts": acc["counts"],
                }
                (pdir / REPORT_NAME).write_text(
                    json.dumps({**summary, "records": [r.to_json() for r in records]}, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8",
                )
                results.append(summary)
        rows = delta_rows(results)
        (root / "ablation.csv").write_text(delta_csv(rows), encoding="utf-8")
        (root / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        (root / REPORT_NAME).write_text(json.dumps({"grid": grid, "points": results}, indent=2) + "\n", encoding="utf-8")
        plot_ablation(
            [{"name": r["name"], **{c.capitalize(): r[f"d_{c}"] for c in COLUMNS}} for r in rows[1:]] or [],
            [c.capitalize() for c in COLUMNS],
            root / "ablation.png",
        )
    return rows
