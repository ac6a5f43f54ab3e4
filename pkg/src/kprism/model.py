"""Mode dispatch and end-to-end forward passes.

`SegModel` wires the shared image encoder, the mask/click encoders, the prompt
assembler, and the MoE decoder behind a single request interface. Requests are
validated strictly: every (mode, fields) combination either forwards or raises
a ContractError, never silently defaulting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .configs import AblationFlags, TrainConfig
from .decoder import DecoderOutput, MoEDecoder
from .encoders import FeaturePyramid, ImageEncoder, MapEncoder, encode_mask_pair, pad_to_stride
from .errors import ContractError, ShapeError
from .prompts import (
    GROUP_DUMMY,
    GROUP_SEMANTIC,
    ClickSet,
    PromptAssembler,
    PromptBundle,
    SparseQuerySet,
    rasterize_clicks,
)

LOSS_EPS = 1.0
CE_CLAMP = 1e-6


@dataclass
class ModeRequest:
    mode: str  # semantic | incontext | interactive | refine-semantic | refine-incontext
    class_id: int | None = None
    support: list[tuple[np.ndarray, np.ndarray]] | None = None  # (image HxWx3, binary mask HxW)
    clicks: ClickSet | None = None
    prev_mask: np.ndarray | None = None  # binary HxW


_REQUIRED = {
    "semantic": {"class_id"},
    "incontext": {"support"},
    "interactive": {"clicks"},
    "refine-semantic": {"class_id", "clicks"},
    "refine-incontext": {"support", "clicks"},
}
_ALLOWED = {
    "semantic": {"class_id"},
    "incontext": {"support"},
    "interactive": {"clicks", "prev_mask"},
    "refine-semantic": {"class_id", "clicks", "prev_mask"},
    "refine-incontext": {"support", "clicks", "prev_mask"},
}


def validate_request(request: ModeRequest) -> None:
    if request.mode not in _REQUIRED:
        raise ContractError(f"unknown mode {request.mode!r}")
    fields_set = {
        name
        for name in ("class_id", "support", "clicks", "prev_mask")
        if getattr(request, name) is not None
    }
    missing = _REQUIRED[request.mode] - fields_set
    extra = fields_set - _ALLOWED[request.mode]
    if missing or extra:
        raise ContractError(
            f"mode {request.mode!r}: missing fields {sorted(missing)}, unexpected {sorted(extra)}"
        )
    if request.support is not None and len(request.support) == 0:
        raise ContractError("support set must contain at least one reference pair")


@dataclass
class LossReport:
    total: torch.Tensor
    ce: torch.Tensor
    dice: torch.Tensor

    def item(self) -> tuple[float, float, float]:
        return (float(self.total), float(self.ce), float(self.dice))


def compute_loss(probability: torch.Tensor, target: torch.Tensor) -> LossReport:
    """Binary cross-entropy plus Dice loss on a probability mask.

    dice = 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) with eps = 1.0;
    probabilities are clamped away from {0,1} for the log terms.
    """
    if probability.shape != target.shape:
        raise ShapeError(f"probability {tuple(probability.shape)} vs target {tuple(target.shape)}")
    t = target.to(probability.dtype)
    p = probability.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    ce = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()
    if probability.ndim == 3:  # batched: mean of per-sample dice losses
        dims = (1, 2)
    else:
        dims = tuple(range(probability.ndim))
    inter = (probability * t).sum(dim=dims)
    denom = probability.sum(dim=dims) + t.sum(dim=dims)
    dice = (1.0 - (2.0 * inter + LOSS_EPS) / (denom + LOSS_EPS)).mean()
    return LossReport(total=ce + dice, ce=ce, dice=dice)


def _to_image_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected (H,W,3) image, got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image)).to(dtype).permute(2, 0, 1)[None]


def _slice_pyramid(pyr: FeaturePyramid, i: int) -> FeaturePyramid:
    return FeaturePyramid(
        levels=[lvl[i : i + 1] for lvl in pyr.levels],
        strides=pyr.strides,
        input_hw=pyr.input_hw,
        pad=pyr.pad,
    )


def collate_bundles(bundles: list[PromptBundle]) -> PromptBundle:
    """Stack single-sample bundles; query sets are dummy-padded to equal length."""
    q_max = max(b.queries.queries.shape[0] for b in bundles)
    width = bundles[0].queries.queries.shape[1]
    qs, gs = [], []
    for b in bundles:
        q, g = b.queries.queries, b.queries.groups
        pad = q_max - q.shape[0]
        if pad:
            q = torch.cat([q, torch.zeros(pad, width, dtype=q.dtype, device=q.device)], dim=0)
            g = torch.cat([g, torch.full((pad,), GROUP_DUMMY, dtype=torch.long)], dim=0)
        qs.append(q)
        gs.append(g)
    dense = [torch.cat([b.dense[lvl] for b in bundles], dim=0) for lvl in range(len(bundles[0].dense))]
    seeds = None
    if bundles[0].mask_seed is not None:
        seeds = torch.stack([b.mask_seed for b in bundles], dim=0)
    return PromptBundle(
        mode=bundles[0].mode,
        queries=SparseQuerySet(queries=torch.stack(qs), groups=torch.stack(gs)),
        dense=dense,
        fused_levels=bundles[0].fused_levels,
        input_hw=bundles[0].input_hw,
        pad=bundles[0].pad,
        mask_seed=seeds,
    )


class SegModel(nn.Module):
    """Unified segmentation model: one encoder, dual prompts, MoE decoder."""

    def __init__(
        self,
        cfg: TrainConfig,
        n_classes: int,
        class_names: dict[int, str] | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.class_names = class_names or {c: f"class{c}" for c in range(1, n_classes + 1)}
        self.ablations: AblationFlags = cfg.ablations
        width = cfg.moe.width
        self.image_encoder = ImageEncoder(cfg.encoder)
        self.reference_encoder = MapEncoder(cfg.encoder, in_channels=4)
        self.click_encoder = MapEncoder(cfg.encoder, in_channels=3)
        self.prompts = PromptAssembler(
            cfg.encoder,
            width=width,
            n_classes=n_classes,
            queries_per_class=cfg.queries_per_class,
            object_queries=cfg.object_queries,
            click_window_radius=cfg.click_window_radius,
        )
        self.decoder = MoEDecoder(
            cfg.moe,
            num_experts_ca=1 if cfg.ablations.no_moe_ca else None,
            num_experts_ffn=1 if cfg.ablations.no_moe_ffn else None,
        )
        # stand-in queries for the no-sparse-queries ablation
        self.generic_queries = nn.Parameter(torch.randn(2, width))

    # ---- bundle construction --------------------------------------------

    def prepare_incontext(
        self, pyr: FeaturePyramid, support: list[tuple[np.ndarray, np.ndarray]]
    ) -> tuple[torch.Tensor, SparseQuerySet]:
        """Reference encodings + affinity fusion; cacheable across click rounds."""
        dtype = self.prompts.bank.dtype
        ref_imgs = torch.cat([_to_image_tensor(ri, dtype) for ri, _ in support], dim=0)
        ref_masks = torch.stack(
            [torch.from_numpy(np.ascontiguousarray(rm)).to(dtype) for _, rm in support]
        )
        ref_pyr = self.image_encoder(ref_imgs, coarse_only=True)
        val_pyr = encode_mask_pair(self.reference_encoder, ref_imgs, ref_masks)
        padded_masks = pad_to_stride(ref_masks[:, None])[0][:, 0]
        return self.prompts.incontext_fusion(pyr, ref_pyr, val_pyr, padded_masks)

    def prepare_incontext_batch(
        self, pyramid: FeaturePyramid, supports: list[list[tuple[np.ndarray, np.ndarray]]]
    ) -> list[tuple[torch.Tensor, SparseQuerySet]]:
        """Per-sample fusion with the reference encoders run as one batch (1-shot only)."""
        if any(len(s) != 1 for s in supports):
            return [
                self.prepare_incontext(_slice_pyramid(pyramid, i), s)
                for i, s in enumerate(supports)
            ]
        dtype = self.prompts.bank.dtype
        ref_imgs = torch.cat([_to_image_tensor(s[0][0], dtype) for s in supports], dim=0)
        ref_masks = torch.stack(
            [torch.from_numpy(np.ascontiguousarray(s[0][1])).to(dtype) for s in supports]
        )
        ref_pyr = self.image_encoder(ref_imgs, coarse_only=True)
        val_pyr = encode_mask_pair(self.reference_encoder, ref_imgs, ref_masks)
        padded_masks = pad_to_stride(ref_masks[:, None])[0][:, 0]
        parts = []
        for i in range(len(supports)):
            parts.append(
                self.prompts.incontext_fusion(
                    _slice_pyramid(pyramid, i),
                    _slice_pyramid(ref_pyr, i),
                    _slice_pyramid(val_pyr, i),
                    padded_masks[i : i + 1],
                )
            )
        return parts

    def build_bundle(self, request: ModeRequest, image: np.ndarray) -> PromptBundle:
        validate_request(request)
        dtype = self.prompts.bank.dtype
        img_t = _to_image_tensor(image, dtype)
        pyr = self.image_encoder(img_t)
        return self._bundle_from_pyramid(request, image, pyr)

    def _bundle_from_pyramid(
        self,
        request: ModeRequest,
        image: np.ndarray,
        pyr: FeaturePyramid,
        incontext_part: tuple[torch.Tensor, SparseQuerySet] | None = None,
        click_pyramid: FeaturePyramid | None = None,
    ) -> PromptBundle:
        mode = request.mode
        dtype = self.prompts.bank.dtype
        h, w = image.shape[:2]
        parts: dict = {}
        if mode in ("semantic", "refine-semantic"):
            parts["class_queries"] = self.prompts.semantic_queries(request.class_id)
        if mode in ("incontext", "refine-incontext"):
            if incontext_part is None:
                incontext_part = self.prepare_incontext(pyr, request.support)
            parts["fused_level0"], parts["object_queries"] = incontext_part
        if mode in ("interactive", "refine-semantic", "refine-incontext"):
            clicks = request.clicks
            if click_pyramid is None:
                click_map = rasterize_clicks(
                    clicks, request.prev_mask, h, w, radius=self.cfg.click_disk_radius
                )
                click_pyramid = self.click_encoder(torch.from_numpy(click_map).to(dtype)[None])
            parts["click_pyramid"] = click_pyramid
            parts["click_query_set"] = self.prompts.click_queries(clicks, pyr)
            if request.prev_mask is not None:
                prev_t = torch.from_numpy(np.ascontiguousarray(request.prev_mask)).to(dtype)
                parts["prev_mask"] = pad_to_stride(prev_t[None, None])[0][0, 0]
        bundle = self.prompts.assemble(
            mode, pyr, no_dense_fusion=self.ablations.no_dense_fusion, **parts
        )
        if self.ablations.no_sparse_queries:
            groups = torch.full((self.generic_queries.shape[0],), GROUP_SEMANTIC, dtype=torch.long)
            bundle.queries = SparseQuerySet(queries=self.generic_queries, groups=groups)
        return bundle

    # ---- forward passes ---------------------------------------------------

    def forward_single(
        self,
        request: ModeRequest,
        image: np.ndarray,
        capture_attn_layer: int | None = None,
        pyramid: FeaturePyramid | None = None,
        incontext_part: tuple[torch.Tensor, SparseQuerySet] | None = None,
    ) -> tuple[torch.Tensor, DecoderOutput]:
        """One request, with autograd; returns ((H,W) probability, DecoderOutput).

        `pyramid` / `incontext_part` allow callers that refine iteratively to
        reuse the image and reference encodings across click rounds.
        """
        validate_request(request)
        if pyramid is None:
            pyramid = self.image_encoder(_to_image_tensor(image, self.prompts.bank.dtype))
        bundle = self._bundle_from_pyramid(request, image, pyramid, incontext_part)
        out = self.decoder(
            bundle.dense,
            bundle.queries.queries,
            bundle.queries.groups,
            bundle.mask_seed,
            bundle.input_hw,
            bundle.pad,
            capture_attn_layer=capture_attn_layer,
        )
        return torch.sigmoid(out.logits)[0], out

    def encode_images(self, images: list[np.ndarray]) -> FeaturePyramid:
        dtype = self.prompts.bank.dtype
        imgs = torch.cat([_to_image_tensor(im, dtype) for im in images], dim=0)
        return self.image_encoder(imgs)

    def forward_batch(
        self,
        requests: list[ModeRequest],
        images: list[np.ndarray],
        pyramid: FeaturePyramid | None = None,
        incontext_parts: list | None = None,
    ) -> tuple[torch.Tensor, DecoderOutput]:
        """Same-mode batch; encoders and decoder run batched, prompts per sample."""
        if len({r.mode for r in requests}) != 1:
            raise ContractError("forward_batch requires a single shared mode")
        for req in requests:
            validate_request(req)
        if pyramid is None:
            pyramid = self.encode_images(images)
        click_slices: list[FeaturePyramid | None] = [None] * len(requests)
        if requests[0].mode in ("interactive", "refine-semantic", "refine-incontext"):
            dtype = self.prompts.bank.dtype
            maps = np.stack(
                [
                    rasterize_clicks(
                        req.clicks,
                        req.prev_mask,
                        im.shape[0],
                        im.shape[1],
                        radius=self.cfg.click_disk_radius,
                    )
                    for req, im in zip(requests, images)
                ]
            )
            click_pyr = self.click_encoder(torch.from_numpy(maps).to(dtype))
            click_slices = [_slice_pyramid(click_pyr, i) for i in range(len(requests))]
        bundles = [
            self._bundle_from_pyramid(
                req,
                im,
                _slice_pyramid(pyramid, i),
                incontext_parts[i] if incontext_parts is not None else None,
                click_slices[i],
            )
            for i, (req, im) in enumerate(zip(requests, images))
        ]
        batch = collate_bundles(bundles)
        out = self.decoder(
            batch.dense,
            batch.queries.queries,
            batch.queries.groups,
            batch.mask_seed,
            batch.input_hw,
            batch.pad,
        )
        return torch.sigmoid(out.logits), out

    @torch.no_grad()
    def predict(
        self,
        request: ModeRequest,
        image: np.ndarray,
        pyramid: FeaturePyramid | None = None,
        incontext_part: tuple[torch.Tensor, SparseQuerySet] | None = None,
    ) -> dict:
        """Inference entry point: numpy probability mask plus the gate trace."""
        prob, out = self.forward_single(
            request, image, pyramid=pyramid, incontext_part=incontext_part
        )
        gate = [
            {name: alpha.detach().numpy() for name, alpha in layer.items()}
            for layer in out.gate_trace
        ]
        return {"probability": prob.detach().numpy(), "gate_trace": gate}

    @torch.no_grad()
    def predict_multiclass(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel argmax over per-class semantic probabilities, 0.5 floor."""
        probs = []
        for class_id in range(1, self.n_classes + 1):
            prob, _ = self.forward_single(ModeRequest(mode="semantic", class_id=class_id), image)
            probs.append(prob.detach().numpy())
        stack = np.stack(probs, axis=0)  # (N_cls, H, W)
        best = stack.argmax(axis=0)
        return np.where(stack.max(axis=0) >= 0.5, best + 1, 0).astype(np.int64)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: TrainConfig, n_classes: int, class_names=None, seed: int | None = None) -> SegModel:
    if seed is not None:
        torch.manual_seed(seed)
    return SegModel(cfg, n_classes, class_names)


def binarize_probability(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (prob >= threshold).astype(np.uint8)
