"""Click simulation, iterative refinement, and interactive metrics.

Simulated clicks follow the error-centroid rule: false-negative and
false-positive pixels are labeled into 4-connected components separately (so
each component has a well-defined polarity), the largest component wins (ties
broken by the smallest scan-order first pixel), and the click lands on the
component centroid, snapped to the interior point of maximal distance
transform when the centroid falls outside a concave component.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ShapeError
from .model import ModeRequest, SegModel, binarize_probability
from .prompts import Click, ClickSet

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int8)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty, 0.0 when exactly one is."""
    if pred.shape != gt.shape:
        raise ShapeError(f"dice shapes differ: {pred.shape} vs {gt.shape}")
    a = pred.astype(bool)
    b = gt.astype(bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def _largest_component(mask: np.ndarray) -> tuple[np.ndarray, int, int] | None:
    """Largest 4-connected component: (component mask, size, first scan-order flat index)."""
    labels, n = ndimage.label(mask, structure=FOUR_CONN)
    if n == 0:
        return None
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n + 1)
    vals, firsts = np.unique(flat, return_index=True)  # first scan-order occurrence per label
    first_of = {int(v): int(f) for v, f in zip(vals, firsts) if v > 0}
    comp_id = min(range(1, n + 1), key=lambda c: (-sizes[c], first_of[c]))
    return labels == comp_id, int(sizes[comp_id]), first_of[comp_id]


def _snap_to_component(component: np.ndarray, cy: float, cx: float) -> tuple[int, int]:
    ry, rx = int(np.rint(cy)), int(np.rint(cx))
    h, w = component.shape
    if 0 <= ry < h and 0 <= rx < w and component[ry, rx]:
        return ry, rx
    dist = ndimage.distance_transform_edt(component)
    flat_idx = int(dist.argmax())
    return flat_idx // w, flat_idx % w


def simulate_click(pred: np.ndarray, gt: np.ndarray) -> Click | None:
    """Next corrective click, or None when prediction equals ground truth."""
    if pred.shape != gt.shape:
        raise ShapeError(f"simulate_click shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    false_neg = g & ~p
    false_pos = p & ~g
    candidates = []
    for err_mask, polarity in ((false_neg, 1), (false_pos, -1)):
        comp = _largest_component(err_mask)
        if comp is not None:
            mask, size, first = comp
            candidates.append(((-size, first), mask, polarity))
    if not candidates:
        return None
    candidates.sort(key=lambda c: c[0])
    _, component, polarity = candidates[0]
    ys, xs = np.nonzero(component)
    ry, rx = _snap_to_component(component, ys.mean(), xs.mean())
    return Click(x=rx, y=ry, polarity=polarity)


@dataclass
class InteractionTrace:
    dice_per_click: list[float]  # Dice after click 1..B (padded after early stop)
    clicks: ClickSet
    budget: int
    initial_dice: float
    sample_id: str = ""
    mode_init: str = "none"


@dataclass
class NoCReport:
    noc90: float
    noc95: float
    reached90: bool
    reached95: bool


def noc(trace: InteractionTrace, thresholds: tuple[float, float] = (0.90, 0.95)) -> NoCReport:
    """First click index reaching each threshold, capped at the budget."""
    values = []
    flags = []
    for t in thresholds:
        hit = next((k + 1 for k, d in enumerate(trace.dice_per_click) if d >= t), None)
        values.append(float(hit) if hit is not None else float(trace.budget))
        flags.append(hit is not None)
    return NoCReport(noc90=values[0], noc95=values[1], reached90=flags[0], reached95=flags[1])


def run_interaction(
    model: SegModel,
    image: np.ndarray,
    gt: np.ndarray,
    mode_init: str = "none",
    init_args: dict | None = None,
    budget: int = 10,
    sample_id: str = "",
) -> InteractionTrace:
    """Iterative refinement episode: simulate click -> forward -> record Dice.

    mode_init 'semantic' or 'incontext' produces the 0-click initial mask via
    that mode (its Dice is recorded separately); 'none' starts from an empty
    mask. Stops early when the prediction matches gt, padding the trace with
    the final Dice so traces stay rectangular.
    """
    init_args = init_args or {}
    with torch.no_grad():
        pyramid = model.encode_images([image])
        incontext_part = None
        if mode_init == "semantic":
            req = ModeRequest(mode="semantic", class_id=init_args["class_id"])
            pred = binarize_probability(model.predict(req, image, pyramid=pyramid)["probability"])
            refine_mode = "refine-semantic"
        elif mode_init == "incontext":
            incontext_part = model.prepare_incontext(pyramid, init_args["support"])
            req = ModeRequest(mode="incontext", support=init_args["support"])
            pred = binarize_probability(
                model.predict(req, image, pyramid=pyramid, incontext_part=incontext_part)["probability"]
            )
            refine_mode = "refine-incontext"
        elif mode_init == "none":
            pred = np.zeros(gt.shape, dtype=np.uint8)
            refine_mode = "interactive"
        else:
            raise ValueError(f"mode_init must be none|semantic|incontext, got {mode_init!r}")

    initial_dice = dice(pred, gt)
    clicks = ClickSet()
    scores: list[float] = []
    for k in range(1, budget + 1):
        click = simulate_click(pred, gt)
        if click is None:
            break
        click.round = k
        clicks.clicks.append(click)
        req = ModeRequest(
            mode=refine_mode,
            class_id=init_args.get("class_id") if refine_mode == "refine-semantic" else None,
            support=init_args.get("support") if refine_mode == "refine-incontext" else None,
            clicks=clicks,
            prev_mask=pred,
        )
        pred = binarize_probability(
            model.predict(req, image, pyramid=pyramid, incontext_part=incontext_part)["probability"]
        )
        scores.append(dice(pred, gt))
    last = scores[-1] if scores else initial_dice
    scores = scores + [last] * (budget - len(scores))
    return InteractionTrace(
        dice_per_click=scores,
        clicks=clicks,
        budget=budget,
        initial_dice=initial_dice,
        sample_id=sample_id,
        mode_init=mode_init,
    )


@dataclass
class TraceStats:
    mean_dice_final: float
    dice_at: dict[int, float]
    noc90_mean: float
    noc95_mean: float
    reached90_rate: float
    reached95_rate: float
    mean_initial_dice: float
    count: int = 0
    mean_curve: list[float] = field(default_factory=list)


def aggregate_traces(traces: list[InteractionTrace], checkpoints: tuple[int, ...] = (1, 5)) -> TraceStats:
    if not traces:
        raise ValueError("no traces to aggregate")
    curves = np.array([t.dice_per_click for t in traces])  # (N, B)
    reports = [noc(t) for t in traces]
    budget = traces[0].budget
    return TraceStats(
        mean_dice_final=float(curves[:, -1].mean()),
        dice_at={k: float(curves[:, k - 1].mean()) for k in checkpoints if k <= budget},
        noc90_mean=float(np.mean([r.noc90 for r in reports])),
        noc95_mean=float(np.mean([r.noc95 for r in reports])),
        reached90_rate=float(np.mean([r.reached90 for r in reports])),
        reached95_rate=float(np.mean([r.reached95 for r in reports])),
        mean_initial_dice=float(np.mean([t.initial_dice for t in traces])),
        count=len(traces),
        mean_curve=[float(v) for v in curves.mean(axis=0)],
    )


def mean_convergence_curve(traces: list[InteractionTrace]) -> tuple[np.ndarray, np.ndarray]:
    curves = np.array([t.dice_per_click for t in traces])
    return curves.mean(axis=0), curves.std(axis=0)


def emit_convergence_plot(traces: list[InteractionTrace], out_path: str | Path) -> np.ndarray:
    """Mean-Dice-vs-clicks curve with a +/- one-std band; returns the mean curve."""
    if not traces:
        raise ValueError("no traces to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mean, std = mean_convergence_curve(traces)
    xs = np.arange(1, len(mean) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, mean, marker="o", lw=1.5)
    ax.fill_between(xs, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("clicks")
    ax.set_ylabel("Dice")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    if not out_path.exists():
        raise OSError(f"failed to write plot {out_path}")
    return mean


def export_traces_jsonl(traces: list[InteractionTrace], out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w") as fh:
        for t in traces:
            r = noc(t)
            fh.write(
                json.dumps(
                    {
                        "sample_id": t.sample_id,
                        "mode_init": t.mode_init,
                        "dice_per_click": t.dice_per_click,
                        "noc90": r.noc90,
                        "noc95": r.noc95,
                    }
                )
                + "\n"
            )
    return out_path


def load_traces_jsonl(path: str | Path) -> list[InteractionTrace]:
    traces = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        traces.append(
            InteractionTrace(
                dice_per_click=doc["dice_per_click"],
                clicks=ClickSet(),
                budget=len(doc["dice_per_click"]),
                initial_dice=doc["dice_per_click"][0],
                sample_id=doc.get("sample_id", ""),
                mode_init=doc.get("mode_init", "none"),
            )
        )
    return traces
