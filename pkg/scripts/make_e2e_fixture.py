#!/usr/bin/env python3
"""Headless reference trace for the frontend end-to-end test.

Runs the click simulator against a checkpoint on one test image and freezes
the resulting clicks, Dice curve, and encoded image/gt payloads so the
scripted browser session can be compared against them exactly.
"""

import argparse
import base64
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from kprism.data import DatasetManifest, binarize, load_sample
from kprism.interaction import run_interaction
from kprism.training import load_checkpoint


def png_b64(arr: np.ndarray, mode: str) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", type=Path, required=True)
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--budget", type=int, default=5)
    ap.add_argument("--sample", type=int, default=None, help="test-split position (default: first)")
    args = ap.parse_args()

    model, cfg, _ = load_checkpoint(args.ckpt)
    manifest = DatasetManifest.load(args.data)
    test_indices = manifest.indices("test")
    idx = test_indices[args.sample if args.sample is not None else 0]
    sample = load_sample(manifest, idx, input_size=cfg.input_size)
    class_id = sorted(sample.class_ids)[0]
    gt = binarize(sample.mask, class_id)

    trace = run_interaction(model, sample.image, gt, mode_init="none", budget=args.budget)
    fixture = {
        "sample_id": sample.source_id,
        "class_id": class_id,
        "budget": args.budget,
        "image": png_b64(np.round(sample.image * 255).astype(np.uint8), "RGB"),
        "gt": png_b64((gt * 255).astype(np.uint8), "L"),
        "initial_dice": trace.initial_dice,
        "dice_per_click": trace.dice_per_click,
        "clicks": [
            {"x": c.x, "y": c.y, "polarity": "positive" if c.polarity > 0 else "negative"}
            for c in trace.clicks.clicks
        ],
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(fixture, indent=1))
    print(f"fixture for {sample.source_id} (class {class_id}) -> {args.out}")
    print(f"dice trace: {[round(d, 4) for d in trace.dice_per_click]}")


if __name__ == "__main__":
    main()
