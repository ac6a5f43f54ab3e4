#!/usr/bin/env python3
"""Bar chart of mean expert gate weights per mode (per decoder layer or overall).

Input: the `gate_diagnostic` section of an evaluation report (or the file
written by scripts/run_toy_experiment.py).
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--report", type=Path, required=True, help="report.json or gate_diagnostic.json")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--per-layer", action="store_true", help="one panel per layer instead of the mean")
    args = ap.parse_args()

    doc = json.loads(args.report.read_text())
    diag = doc.get("gate_diagnostic", doc)  # accept either file shape
    modes = sorted(diag)
    if not modes:
        raise SystemExit("no gate diagnostics in the report")

    if args.per_layer:
        n_layers = len(diag[modes[0]])
        fig, axes = plt.subplots(1, n_layers, figsize=(2.2 * n_layers, 2.8), sharey=True)
        for layer, ax in enumerate(np.atleast_1d(axes)):
            _bars(ax, {m: diag[m][layer] for m in modes})
            ax.set_title(f"layer {layer + 1}", fontsize=9)
        axes[0].set_ylabel("mean gate weight")
    else:
        fig, ax = plt.subplots(figsize=(5, 3))
        _bars(ax, {m: np.mean(diag[m], axis=0) for m in modes})
        ax.set_ylabel("mean gate weight")
    fig.tight_layout()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out)
    print(f"wrote {args.out}")


def _bars(ax, per_mode: dict) -> None:
    modes = sorted(per_mode)
    n_experts = len(next(iter(per_mode.values())))
    width = 0.8 / len(modes)
    xs = np.arange(n_experts)
    for i, mode in enumerate(modes):
        ax.bar(xs + i * width, per_mode[mode], width, label=mode)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels([f"E{m + 1}" for m in range(n_experts)], fontsize=8)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.25, axis="y")


if __name__ == "__main__":
    main()
