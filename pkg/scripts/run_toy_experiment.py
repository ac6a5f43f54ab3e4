#!/usr/bin/env python3
"""End-to-end toy experiment: synth data -> train -> evaluate -> plots.

Produces the desk-scale numbers the acceptance suite checks (Mode-1/2 mean
Dice, interactive Dice(k) and NoC curves for all three initialization
settings) plus convergence plots and a gate-weight diagnostic dump.
"""

import argparse
import json
import time
from pathlib import Path

from kprism.configs import SynthConfig, TrainConfig
from kprism.data import DatasetManifest, generate_synthetic
from kprism.evaluation import evaluate, write_report
from kprism.interaction import emit_convergence_plot, export_traces_jsonl
from kprism.training import load_checkpoint, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=100)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--budget", type=int, default=10)
    args = ap.parse_args()

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    if (data_dir / "manifest.json").exists():
        manifest = DatasetManifest.load(data_dir)
        print(f"reusing dataset at {data_dir}")
    else:
        manifest = generate_synthetic(
            SynthConfig(
                n_samples=args.n_train + args.n_test,
                height=args.size,
                width=args.size,
                n_classes=args.classes,
                seed=args.data_seed,
                n_test=args.n_test,
            ),
            data_dir,
        )
        print(f"wrote {len(manifest.entries)} samples to {data_dir}")

    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, input_size=args.size)
    t0 = time.time()
    ckpt = train(cfg, manifest, out / "run", log_every=5)
    print(f"training wall time: {time.time() - t0:.0f}s -> {ckpt}")

    model, _, _ = load_checkpoint(ckpt)
    report = evaluate(
        model,
        manifest,
        ["semantic", "incontext", "interactive", "refine-semantic", "refine-incontext"],
        budget=args.budget,
    )
    traces = report.pop("_traces", {})
    write_report(report, out / "report.json")
    (out / "gate_diagnostic.json").write_text(json.dumps(report["gate_diagnostic"], indent=1))
    for mode, mode_traces in traces.items():
        export_traces_jsonl(mode_traces, out / f"traces_{mode}.jsonl")
        emit_convergence_plot(mode_traces, out / f"curve_{mode}.png")

    print(json.dumps({m: v for m, v in report["modes"].items()}, indent=1))
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()
