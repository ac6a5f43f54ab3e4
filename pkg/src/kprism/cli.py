"""Command-line surface: data synth / train / eval / ablate / plot / serve."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click

from .configs import SynthConfig, TrainConfig, load_train_config


@click.group()
def main():
    """Unified semantic / in-context / interactive segmentation toolkit."""


@main.group()
def data():
    """Dataset commands."""


@data.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", "n_train", default=500, show_default=True, help="training samples")
@click.option("--val", "n_val", default=0, show_default=True)
@click.option("--test", "n_test", default=0, show_default=True)
@click.option("--classes", "n_classes", default=3, show_default=True)
@click.option("--size", default=64, show_default=True, help="image height and width")
@click.option("--seed", default=7, show_default=True)
def data_synth(out_dir, n_train, n_val, n_test, n_classes, size, seed):
    """Generate a synthetic shapes dataset with a JSON manifest."""
    from .data import generate_synthetic

    cfg = SynthConfig(
        n_samples=n_train + n_val + n_test,
        height=size,
        width=size,
        n_classes=n_classes,
        seed=seed,
        n_val=n_val,
        n_test=n_test,
    )
    manifest = generate_synthetic(cfg, out_dir)
    click.echo(f"wrote {len(manifest.entries)} samples to {out_dir}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--paper-scale", is_flag=True, help="use full-size settings (512px, width 256)")
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train(config_path, data_dir, out_dir, paper_scale, epochs, seed):
    """Train the unified model on a manifest's train split."""
    from .data import DatasetManifest
    from .training import train as run_train

    if config_path:
        cfg = load_train_config(config_path)
    elif paper_scale:
        cfg = TrainConfig.paper_scale()
    else:
        cfg = TrainConfig()
    overrides = {}
    if epochs is not None:
        overrides["epochs"] = epochs
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    manifest = DatasetManifest.load(data_dir)
    ckpt = run_train(cfg, manifest, out_dir)
    click.echo(f"checkpoint: {ckpt}")


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--modes", default="semantic,incontext,interactive", show_default=True)
@click.option("--budget", default=10, show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--traces", "traces_path", default=None, type=click.Path())
@click.option("--plot", "plot_path", default=None, type=click.Path())
@click.option("--limit", default=None, type=int)
def eval_cmd(ckpt, data_dir, modes, budget, split, out_path, traces_path, plot_path, limit):
    """Evaluate a checkpoint: per-mode Dice, NoC metrics, gate diagnostics."""
    from .data import DatasetManifest
    from .evaluation import evaluate, write_report
    from .interaction import emit_convergence_plot, export_traces_jsonl
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(ckpt)
    manifest = DatasetManifest.load(data_dir)
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    report = evaluate(model, manifest, mode_list, budget=budget, split=split, limit=limit)
    traces = report.pop("_traces", {})
    if out_path:
        write_report(report, out_path)
        click.echo(f"report: {out_path}")
    else:
        click.echo(json.dumps({k: v for k, v in report.items() if k != "gate_diagnostic"}, indent=1))
    flat_traces = [t for ts in traces.values() for t in ts]
    if traces_path and flat_traces:
        export_traces_jsonl(flat_traces, traces_path)
        click.echo(f"traces: {traces_path}")
    if plot_path and flat_traces:
        emit_convergence_plot(flat_traces, plot_path)
        click.echo(f"plot: {plot_path}")


@main.command()
@click.option("--preset", required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--budget", default=10, show_default=True)
@click.option("--params-only", is_flag=True, help="compare parameter counts without training")
def ablate(preset, config_path, data_dir, out_dir, budget, params_only):
    """Train/evaluate an ablation preset against the full model."""
    from .ablation import run_ablation
    from .data import DatasetManifest

    cfg = load_train_config(config_path) if config_path else TrainConfig()
    manifest = DatasetManifest.load(data_dir)
    comparison = run_ablation(
        preset, cfg, manifest, out_dir, budget=budget, train_variants=not params_only
    )
    click.echo(json.dumps({k: {"params": v["params"]} for k, v in comparison["rows"].items()}, indent=1))


@main.command()
@click.option("--traces", "traces_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def plot(traces_path, out_path):
    """Convergence plot from an exported traces JSONL file."""
    from .interaction import emit_convergence_plot, load_traces_jsonl

    traces = load_traces_jsonl(traces_path)
    emit_convergence_plot(traces, out_path)
    click.echo(f"plot: {out_path}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data", "data_dir", default=None, type=click.Path(exists=True), help="manifest for the reference catalog")
@click.option("--ui", "ui_dir", default=None, type=click.Path(), help="serve a static UI bundle")
def serve(ckpt, port, host, data_dir, ui_dir):
    """Run the HTTP inference service."""
    import uvicorn

    from .data import DatasetManifest
    from .service import create_app
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(ckpt)
    manifest = DatasetManifest.load(data_dir) if data_dir else None
    app = create_app(model, manifest=manifest, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
