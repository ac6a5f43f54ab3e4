"""Ablation presets: component removals, expert-count sweep, single-mode training."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .configs import TrainConfig
from .data import DatasetManifest
from .errors import ConfigError
from .evaluation import evaluate, write_report
from .model import build_model
from .training import load_checkpoint, train

PRESETS = (
    "full",
    "no_moe_ca",
    "no_moe_ffn",
    "no_moe_both",
    "no_dense",
    "no_sparse",
    "experts_2",
    "experts_3",
    "experts_4",
    "experts_5",
    "single_mode_semantic",
    "single_mode_incontext",
    "single_mode_interactive",
)


def preset_config(preset: str, base: TrainConfig) -> TrainConfig:
    """Map a preset name onto config flags."""
    if preset == "full":
        return base
    if preset == "no_moe_ca":
        return dataclasses.replace(base, ablations=dataclasses.replace(base.ablations, no_moe_ca=True))
    if preset == "no_moe_ffn":
        return dataclasses.replace(base, ablations=dataclasses.replace(base.ablations, no_moe_ffn=True))
    if preset == "no_moe_both":
        return dataclasses.replace(
            base, ablations=dataclasses.replace(base.ablations, no_moe_ca=True, no_moe_ffn=True)
        )
    if preset == "no_dense":
        return dataclasses.replace(
            base, ablations=dataclasses.replace(base.ablations, no_dense_fusion=True)
        )
    if preset == "no_sparse":
        return dataclasses.replace(
            base, ablations=dataclasses.replace(base.ablations, no_sparse_queries=True)
        )
    if preset.startswith("experts_"):
        m = int(preset.split("_")[1])
        return dataclasses.replace(base, moe=dataclasses.replace(base.moe, num_experts=m))
    if preset.startswith("single_mode_"):
        mode = preset.removeprefix("single_mode_")
        return dataclasses.replace(
            base, ablations=dataclasses.replace(base.ablations, single_mode=mode)
        )
    raise ConfigError(f"unknown ablation preset {preset!r}; known: {PRESETS}")


def parameter_count(cfg: TrainConfig, n_classes: int) -> int:
    return build_model(cfg, n_classes, seed=0).parameter_count()


def run_ablation(
    preset: str,
    base: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    modes: list[str] | None = None,
    budget: int = 10,
    train_variants: bool = True,
) -> dict:
    """Train/evaluate the preset variant against the full model, shared seed and data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = modes or ["semantic", "incontext", "interactive"]
    rows = {}
    for name in ("full", preset) if preset != "full" else ("full",):
        cfg = preset_config(name, base)
        row: dict = {"params": parameter_count(cfg, manifest.n_cls)}
        if train_variants:
            run_dir = out / name
            ckpt = run_dir / "ckpt.pt"
            if not ckpt.exists():
                train(cfg, manifest, run_dir, log_every=0)
            model, _, _ = load_checkpoint(ckpt)
            report = evaluate(model, manifest, modes, budget=budget, seed=base.seed)
            write_report(report, run_dir / "report.json")
            row["report"] = {k: v for k, v in report.items() if not k.startswith("_")}
        rows[name] = row
    comparison = {"preset": preset, "rows": rows}
    (out / "comparison.json").write_text(json.dumps(comparison, indent=1))
    return comparison
