"""Joint three-mode training loop, schedule, and checkpointing.

Each training step draws one mode for the whole batch. Semantic and in-context
steps run an initial forward plus two simulated-click refinement rounds;
interactive steps run three iterative click rounds. The step loss is the
uniform mean of the per-round (BCE + Dice) losses. Previous-round predictions
enter the next round binarized and detached.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .configs import TrainConfig, train_config_from_dict, train_config_to_dict
from .data import DatasetManifest, Sample, binarize, load_sample
from .encoders import pad_to_stride
from .errors import ConfigError, NumericError
from .interaction import simulate_click
from .model import ModeRequest, SegModel, build_model, compute_loss
from .prompts import ClickSet

MODE_NAMES = ("semantic", "incontext", "interactive")
CHECKPOINT_VERSION = 1


def sample_mode(rng: np.random.Generator, mode_probs: tuple[float, float, float]) -> str:
    """Categorical draw over (semantic, incontext, interactive)."""
    if any(p < 0 for p in mode_probs) or abs(sum(mode_probs) - 1.0) > 1e-9:
        raise ConfigError(f"invalid mode probabilities {mode_probs}")
    return MODE_NAMES[int(rng.choice(3, p=np.asarray(mode_probs)))]


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup to the base lr, then cosine annealing to lr * min_lr_factor."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = max(cfg.epochs - cfg.warmup_epochs, 1)
    progress = min((epoch - cfg.warmup_epochs) / span, 1.0)
    lo = cfg.lr * cfg.min_lr_factor
    return lo + (cfg.lr - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


def augment_sample(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Horizontal/vertical flips plus intensity jitter; mask follows the flips."""
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    scale = 1.0 + rng.uniform(-0.1, 0.1)
    shift = rng.uniform(-0.05, 0.05)
    image = np.clip(image * scale + shift, 0.0, 1.0)
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask)


@dataclass
class TrainItem:
    image: np.ndarray
    target: np.ndarray  # binary (H, W)
    class_id: int
    support: tuple[np.ndarray, np.ndarray] | None = None
    sample_index: int = -1
    support_index: int = -1


def class_carriers(samples: list[Sample]) -> dict[int, list[int]]:
    carriers: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        for c in s.class_ids:
            carriers.setdefault(c, []).append(i)
    return carriers


def build_training_batch(
    mode: str,
    samples: list[Sample],
    indices: list[int],
    rng: np.random.Generator,
    cfg: TrainConfig,
    carriers: dict[int, list[int]] | None = None,
    max_retries: int = 8,
) -> list[TrainItem]:
    """Per-sample targets (and 1-shot support for in-context) for one step."""
    carriers = carriers if carriers is not None else class_carriers(samples)
    items: list[TrainItem] = []
    for idx in indices:
        s = samples[idx]
        if not s.class_ids:
            continue
        class_id = int(rng.choice(sorted(s.class_ids)))
        image, mask = (s.image, s.mask)
        if cfg.augment:
            image, mask = augment_sample(image, mask, rng)
        target = binarize(mask, class_id)
        support = None
        support_index = -1
        if mode == "incontext":
            pool = [j for j in carriers.get(class_id, []) if j != idx]
            for _ in range(max_retries):
                if pool:
                    support_index = int(rng.choice(pool))
                    break
                class_id = int(rng.choice(sorted(s.class_ids)))
                pool = [j for j in carriers.get(class_id, []) if j != idx]
            if support_index < 0:
                warnings.warn(
                    f"sample {idx}: no other carrier for any of its classes; skipping",
                    stacklevel=2,
                )
                continue
            ref = samples[support_index]
            ref_img, ref_mask = ref.image, ref.mask
            if cfg.augment:
                ref_img, ref_mask = augment_sample(ref_img, ref_mask, rng)
            support = (ref_img, binarize(ref_mask, class_id).astype(np.float32))
            target = binarize(mask, class_id)
        items.append(
            TrainItem(
                image=image,
                target=target,
                class_id=class_id,
                support=support,
                sample_index=idx,
                support_index=support_index,
            )
        )
    return items


def _requests_for_round(
    mode: str, items: list[TrainItem], clicks: list[ClickSet], prev: list[np.ndarray] | None
) -> list[ModeRequest]:
    reqs = []
    for i, item in enumerate(items):
        if mode == "semantic":
            reqs.append(ModeRequest(mode="semantic", class_id=item.class_id))
        elif mode == "incontext":
            reqs.append(ModeRequest(mode="incontext", support=[item.support]))
        elif mode == "refine-semantic":
            reqs.append(
                ModeRequest(
                    mode="refine-semantic",
                    class_id=item.class_id,
                    clicks=clicks[i],
                    prev_mask=prev[i],
                )
            )
        elif mode == "refine-incontext":
            reqs.append(
                ModeRequest(
                    mode="refine-incontext",
                    support=[item.support],
                    clicks=clicks[i],
                    prev_mask=prev[i],
                )
            )
        else:
            reqs.append(
                ModeRequest(
                    mode="interactive",
                    clicks=clicks[i],
                    prev_mask=prev[i] if prev is not None else None,
                )
            )
    return reqs


def train_step(model: SegModel, mode: str, items: list[TrainItem], cfg: TrainConfig):
    """One optimization step's forward passes; returns the mean round loss.

    The image pyramid (and, for in-context, the reference fusion) is encoded
    once and shared across the click rounds; gradients accumulate through the
    shared subgraph when the mean round loss is backpropagated.
    """
    images = [it.image for it in items]
    targets = torch.stack(
        [torch.from_numpy(it.target.astype(np.float32)) for it in items]
    )
    losses = []
    aux_losses = []
    clicks = [ClickSet() for _ in items]
    pyramid = model.encode_images(images)
    incontext_parts = None
    if mode == "incontext":
        incontext_parts = model.prepare_incontext_batch(pyramid, [[it.support] for it in items])
    # deep supervision at half resolution: cheap, but still resolves shape and
    # class boundaries (the level grids alone are too coarse to discriminate)
    aux_hw = None
    aux_target = None
    if cfg.aux_loss_weight > 0:
        padded, _ = pad_to_stride(targets[:, None])
        aux_hw = (padded.shape[-2] // 2, padded.shape[-1] // 2)
        down = F.interpolate(padded, size=aux_hw, mode="area")[:, 0]
        aux_target = (down >= 0.5).to(targets.dtype)

    def run(reqs):
        probs, out = model.forward_batch(reqs, images, pyramid=pyramid, incontext_parts=incontext_parts)
        losses.append(compute_loss(probs, targets))
        if cfg.aux_loss_weight > 0:
            per_layer = []
            for aux in out.aux_logits:
                up = F.interpolate(aux[:, None], size=aux_hw, mode="bilinear", align_corners=False)[:, 0]
                per_layer.append(compute_loss(torch.sigmoid(up), aux_target).total)
            aux_losses.append(torch.stack(per_layer).mean())
        return probs

    if mode in ("semantic", "incontext"):
        probs = run(_requests_for_round(mode, items, clicks, None))
        prev = [binarize_np(p) for p in probs.detach().numpy()]
        refine_mode = "refine-semantic" if mode == "semantic" else "refine-incontext"
        for round_idx in range(1, cfg.refine_clicks + 1):
            _append_clicks(clicks, prev, items, round_idx)
            probs = run(_requests_for_round(refine_mode, items, clicks, prev))
            prev = [binarize_np(p) for p in probs.detach().numpy()]
    elif mode == "interactive":
        prev = [np.zeros_like(it.target) for it in items]
        for round_idx in range(1, cfg.interactive_clicks + 1):
            _append_clicks(clicks, prev, items, round_idx)
            probs = run(_requests_for_round("interactive", items, clicks, prev))
            prev = [binarize_np(p) for p in probs.detach().numpy()]
    else:
        raise ConfigError(f"unknown training mode {mode!r}")

    total = torch.stack([l.total for l in losses]).mean()
    if aux_losses:
        total = total + cfg.aux_loss_weight * torch.stack(aux_losses).mean()
    ce = torch.stack([l.ce for l in losses]).mean().detach()
    dice_l = torch.stack([l.dice for l in losses]).mean().detach()
    return total, float(ce), float(dice_l)


def binarize_np(prob: np.ndarray) -> np.ndarray:
    return (prob >= 0.5).astype(np.uint8)


def _append_clicks(clicks: list[ClickSet], prev: list[np.ndarray], items: list[TrainItem], round_idx: int):
    for i, item in enumerate(items):
        c = simulate_click(prev[i], item.target)
        if c is not None:
            c.round = round_idx
            clicks[i].clicks.append(c)


def save_checkpoint(
    path: str | Path,
    model: SegModel,
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "state": model.state_dict(),
        "config": train_config_to_dict(cfg),
        "n_classes": model.n_classes,
        "class_names": model.class_names,
        "epoch": epoch,
        "rng": {
            "torch": torch.get_rng_state(),
            "numpy": rng.bit_generator.state if rng is not None else None,
        },
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[SegModel, TrainConfig, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')}")
    cfg = train_config_from_dict(payload["config"], strict=False)
    class_names = {int(k): v for k, v in payload["class_names"].items()}
    model = build_model(cfg, payload["n_classes"], class_names)
    model.load_state_dict(payload["state"])
    model.eval()
    meta = {"epoch": payload["epoch"], "rng": payload["rng"]}
    return model, cfg, meta


def load_split_samples(manifest: DatasetManifest, split: str, input_size: int) -> list[Sample]:
    return [load_sample(manifest, i, input_size=input_size) for i in manifest.indices(split)]


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    log_every: int = 10,
    forward_spy=None,
) -> Path:
    """Train on the manifest's train split; returns the final checkpoint path.

    Writes `loss_log.jsonl` (one record per step) and a checkpoint per epoch
    plus `ckpt.pt` at the end. A NaN loss aborts with a diagnostic dump of the
    offending batch and the gate trace.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    samples = load_split_samples(manifest, "train", cfg.input_size)
    if not samples:
        raise ConfigError("manifest has no training samples")
    carriers = class_carriers(samples)
    model = build_model(cfg, manifest.n_cls, manifest.class_names)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    log_path = out / "loss_log.jsonl"
    step = 0
    with log_path.open("w") as log:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            order = rng.permutation(len(samples))
            t0 = time.time()
            for start in range(0, len(order), cfg.batch_size):
                idxs = [int(i) for i in order[start : start + cfg.batch_size]]
                mode = (
                    cfg.ablations.single_mode
                    if cfg.ablations.single_mode is not None
                    else sample_mode(rng, cfg.mode_probs)
                )
                items = build_training_batch(mode, samples, idxs, rng, cfg, carriers)
                if not items:
                    continue
                if forward_spy is not None:
                    forward_spy(mode, items)
                total, ce, dice_l = train_step(model, mode, items, cfg)
                if not torch.isfinite(total):
                    _dump_nan(out, model, mode, items)
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}; dump written")
                opt.zero_grad()
                total.backward()
                opt.step()
                record = {
                    "epoch": epoch,
                    "step": step,
                    "mode": mode,
                    "loss": float(total.detach()),
                    "ce": ce,
                    "dice": dice_l,
                    "lr": lr,
                }
                log.write(json.dumps(record) + "\n")
                step += 1
            log.flush()
            save_checkpoint(out / f"ckpt_epoch{epoch:03d}.pt", model, cfg, epoch, rng)
            if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
                print(f"epoch {epoch}: loss {float(total.detach()):.4f} lr {lr:.2e} ({time.time()-t0:.1f}s)")
    final = save_checkpoint(out / "ckpt.pt", model, cfg, cfg.epochs - 1, rng)
    return final


def _dump_nan(out: Path, model: SegModel, mode: str, items: list[TrainItem]) -> None:
    dump = out / "nan_dump"
    dump.mkdir(exist_ok=True)
    np.savez(
        dump / "batch.npz",
        images=np.stack([it.image for it in items]),
        targets=np.stack([it.target for it in items]),
        classes=np.array([it.class_id for it in items]),
        mode=np.array(mode),
    )
    try:
        with torch.no_grad():
            req = ModeRequest(mode="semantic", class_id=items[0].class_id)
            _, outp = model.forward_single(req, items[0].image)
        trace = [
            {k: v.detach().numpy().tolist() for k, v in layer.items()} for layer in outp.gate_trace
        ]
        (dump / "gate_trace.json").write_text(json.dumps(trace))
    except Exception:
        pass
