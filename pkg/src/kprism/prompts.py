"""Dual-prompt construction: sparse query sets and dense fusion pyramids.

Three knowledge sources are normalized into one decoder input:
  * semantic: learnable per-class query vectors from a prompt bank,
  * in-context: a softmax affinity between reference and query key features
    projects reference mask features onto the query grid (lowest level only),
    plus foreground/background object queries from masked average pooling,
  * interactive: clicks rasterized into a 3-channel map (positive, negative,
    previous mask) that is encoded and added to the image pyramid, plus
    per-click sparse queries pooled from the coarsest image level.

Positive/negative click-query groups are padded to equal size with dummy
queries (exact zero vectors), which the decoder keeps inert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .configs import QUERY_GROUPS, EncoderConfig
from .encoders import FeaturePyramid
from .errors import ConfigError, ContractError, InputError, NumericError, ShapeError, UnknownClassError
from .positional import FourierPositionEncoding

GROUP_SEMANTIC, GROUP_OBJECT_FG, GROUP_OBJECT_BG, GROUP_CLICK_POS, GROUP_CLICK_NEG, GROUP_DUMMY = range(6)
FG_GROUPS = (GROUP_SEMANTIC, GROUP_OBJECT_FG, GROUP_CLICK_POS)
BG_GROUPS = (GROUP_OBJECT_BG, GROUP_CLICK_NEG)
POOL_EPS = 1e-8


@dataclass
class Click:
    x: int  # pixel column
    y: int  # pixel row
    polarity: int  # +1 positive, -1 negative
    round: int = 0

    def __post_init__(self) -> None:
        if self.polarity not in (1, -1):
            raise InputError(f"click polarity must be +1 or -1, got {self.polarity}")


@dataclass
class ClickSet:
    clicks: list[Click] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clicks)

    def validate_bounds(self, h: int, w: int) -> None:
        for c in self.clicks:
            if not (0 <= c.x < w and 0 <= c.y < h):
                raise InputError(f"click ({c.x},{c.y}) outside {h}x{w} image")
        rounds = [c.round for c in self.clicks]
        if any(b < a for a, b in zip(rounds, rounds[1:])):
            raise InputError("click rounds must be nondecreasing")

    def positives(self) -> list[Click]:
        return [c for c in self.clicks if c.polarity > 0]

    def negatives(self) -> list[Click]:
        return [c for c in self.clicks if c.polarity < 0]


@dataclass
class SparseQuerySet:
    """1-D queries with per-query group tags (integer codes into QUERY_GROUPS)."""

    queries: torch.Tensor  # (q, C), or (B, q, C) after collation
    groups: torch.Tensor  # (q,) long, or (B, q)

    def __post_init__(self) -> None:
        ok = (
            self.queries.ndim == self.groups.ndim + 1
            and self.queries.ndim in (2, 3)
            and self.groups.shape == self.queries.shape[:-1]
        )
        if not ok:
            raise ShapeError("queries must be (q, C) [or batched (B, q, C)] with one group tag per query")

    def tags(self) -> list[str]:
        return [QUERY_GROUPS[int(g)] for g in self.groups]

    @staticmethod
    def concat(parts: list["SparseQuerySet"]) -> "SparseQuerySet":
        return SparseQuerySet(
            queries=torch.cat([p.queries for p in parts], dim=0),
            groups=torch.cat([p.groups for p in parts], dim=0),
        )


@dataclass
class PromptBundle:
    """Decoder input: sparse queries + dense per-level maps at decoder width."""

    mode: str
    queries: SparseQuerySet
    dense: list[torch.Tensor]  # per level, (B, width, h_s, w_s)
    fused_levels: frozenset[int]
    input_hw: tuple[int, int]
    pad: tuple[int, int, int, int]
    mask_seed: torch.Tensor | None = None  # (H_pad, W_pad) in [0,1], or None -> 0.5


def compute_affinity(k_ref: torch.Tensor, k_q: torch.Tensor) -> torch.Tensor:
    """Column-stochastic affinity from reference to query positions.

    k_ref: (C, P_ref), k_q: (C, P_q). Scores are the negative squared L2
    distance with the query-norm term dropped (a per-column constant, so the
    softmax over reference positions is unchanged):
        a[i, j] = 2 <k_ref[:, i], k_q[:, j]> - ||k_ref[:, i]||^2
    Each column of the result sums to 1.
    """
    if k_ref.ndim != 2 or k_q.ndim != 2 or k_ref.shape[0] != k_q.shape[0]:
        raise ShapeError(f"channel mismatch: k_ref {tuple(k_ref.shape)} vs k_q {tuple(k_q.shape)}")
    if not (torch.isfinite(k_ref).all() and torch.isfinite(k_q).all()):
        raise NumericError("affinity inputs must be finite")
    scores = 2.0 * (k_ref.transpose(0, 1) @ k_q) - (k_ref * k_ref).sum(dim=0)[:, None]
    return torch.softmax(scores, dim=0)


def fuse_incontext(v_ref: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Project reference value features onto the query grid: (C, P_ref) @ (P_ref, P_q)."""
    if v_ref.ndim != 2 or weights.ndim != 2 or v_ref.shape[1] != weights.shape[0]:
        raise ShapeError(f"cannot fuse v_ref {tuple(v_ref.shape)} with weights {tuple(weights.shape)}")
    return v_ref @ weights


def masked_pool_queries(k_ref: torch.Tensor, pool_mask: torch.Tensor, n_queries: int) -> SparseQuerySet:
    """Foreground/background object queries via masked average pooling.

    k_ref: (C, P), pool_mask: (P,) in [0,1]. The first n_queries/2 rows average
    the columns where pool_mask >= 0.5, the rest average the complement. An
    empty selection yields an exact zero vector (epsilon-guarded denominator)
    with its group tag kept.
    """
    if n_queries % 2 != 0 or n_queries < 2:
        raise ConfigError(f"n_queries must be even and >= 2, got {n_queries}")
    if k_ref.ndim != 2 or pool_mask.ndim != 1 or k_ref.shape[1] != pool_mask.shape[0]:
        raise ShapeError(f"k_ref {tuple(k_ref.shape)} vs pool_mask {tuple(pool_mask.shape)}")
    fg = (pool_mask >= 0.5).to(k_ref.dtype)
    bg = 1.0 - fg
    fg_vec = (k_ref @ fg) / (fg.sum() + POOL_EPS)
    bg_vec = (k_ref @ bg) / (bg.sum() + POOL_EPS)
    half = n_queries // 2
    queries = torch.cat([fg_vec[None].expand(half, -1), bg_vec[None].expand(half, -1)], dim=0)
    groups = torch.tensor([GROUP_OBJECT_FG] * half + [GROUP_OBJECT_BG] * half, dtype=torch.long)
    return SparseQuerySet(queries=queries.clone(), groups=groups)


def rasterize_clicks(
    clicks: ClickSet,
    prev_mask: np.ndarray | None,
    h: int,
    w: int,
    radius: int = 1,
) -> np.ndarray:
    """Render clicks into a (3, H, W) map: positive disks, negative disks, previous mask.

    Disks are Euclidean balls (distance <= radius, inclusive) clipped to the
    image; channels 0 and 1 are binary.
    """
    clicks.validate_bounds(h, w)
    out = np.zeros((3, h, w), dtype=np.float32)
    for c in clicks.clicks:
        chan = 0 if c.polarity > 0 else 1
        y0, y1 = max(0, c.y - radius), min(h, c.y + radius + 1)
        x0, x1 = max(0, c.x - radius), min(w, c.x + radius + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        disk = (yy - c.y) ** 2 + (xx - c.x) ** 2 <= radius * radius
        out[chan, y0:y1, x0:x1][disk] = 1.0
    if prev_mask is not None:
        if prev_mask.shape != (h, w):
            raise ShapeError(f"prev_mask shape {prev_mask.shape} != ({h},{w})")
        out[2] = prev_mask.astype(np.float32)
    return out


def downsample_mask(mask: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Area-average a (H, W) mask down to hw; values stay in [0,1]."""
    return F.interpolate(mask[None, None].float(), size=hw, mode="area")[0, 0]


def feature_coords(x: int, y: int, stride: int) -> tuple[int, int]:
    """Pixel (x, y) to feature-map coordinates on a stride-s level."""
    return (x // stride, y // stride)


def window_pool(level: torch.Tensor, fx: int, fy: int, r: int) -> torch.Tensor:
    """Average a clamped (2r+1)^2 window of (C, h, w) around feature coords (fx, fy)."""
    _, fh, fw = level.shape
    xs = torch.arange(fx - r, fx + r + 1).clamp_(0, fw - 1)
    ys = torch.arange(fy - r, fy + r + 1).clamp_(0, fh - 1)
    return level[:, ys][:, :, xs].mean(dim=(1, 2))


class PromptAssembler(nn.Module):
    """Owns the learnable prompt parameters and builds decoder-ready bundles.

    Holds the semantic prompt bank, the object-query projection (bias-free so
    zero-pooled vectors stay exactly zero), the shared click MLP, the frozen
    Fourier positional table, and the per-level 1x1 projections that bring the
    dense pyramid to decoder width.
    """

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        width: int,
        n_classes: int,
        queries_per_class: int = 2,
        object_queries: int = 6,
        click_window_radius: int = 1,
    ):
        super().__init__()
        if object_queries % 2 != 0:
            raise ConfigError("object_queries must be even")
        self.width = width
        self.n_classes = n_classes
        self.queries_per_class = queries_per_class
        self.object_queries = object_queries
        self.click_window_radius = click_window_radius
        c16, c8, c4 = encoder_cfg.channel_dims
        self.bank = nn.Parameter(torch.randn(n_classes, queries_per_class, width))
        self.object_proj = nn.Linear(c16, width, bias=False)
        self.click_mlp = nn.Sequential(nn.Linear(c16, width), nn.GELU(), nn.Linear(width, width))
        self.pos_enc = FourierPositionEncoding(width)
        self.dense_proj = nn.ModuleList([nn.Conv2d(c, width, 1) for c in (c16, c8, c4)])

    # ---- sparse prompts -------------------------------------------------

    def semantic_queries(self, class_id: int) -> SparseQuerySet:
        """The learnable query vectors for one class, tagged semantic."""
        if not 1 <= class_id <= self.n_classes:
            raise UnknownClassError(
                f"class {class_id} not in bank (known: 1..{self.n_classes})"
            )
        rows = self.bank[class_id - 1]
        groups = torch.full((self.queries_per_class,), GROUP_SEMANTIC, dtype=torch.long)
        return SparseQuerySet(queries=rows, groups=groups)

    def project_object_queries(self, pooled: SparseQuerySet) -> SparseQuerySet:
        return SparseQuerySet(queries=self.object_proj(pooled.queries), groups=pooled.groups)

    def click_queries(self, clicks: ClickSet, image_pyramid: FeaturePyramid, r: int | None = None) -> SparseQuerySet:
        """Per-click queries pooled from the coarsest level, grouped by polarity.

        Each click maps to feature coords (floor(x/s), floor(y/s)) on the
        stride-s level, pools a clamped (2r+1)^2 window, passes the shared MLP,
        and adds the Fourier embedding of its pixel position. The smaller
        polarity group is padded with zero-vector dummies.
        """
        r = self.click_window_radius if r is None else r
        if r < 0:
            raise ConfigError("window radius must be >= 0")
        h, w = image_pyramid.input_hw
        clicks.validate_bounds(h, w)
        level = image_pyramid.levels[0]
        if level.ndim == 4:
            if level.shape[0] != 1:
                raise ShapeError("click_queries expects a single-sample pyramid")
            level = level[0]
        stride = image_pyramid.strides[0]
        left, _, top, _ = image_pyramid.pad
        ph, pw = image_pyramid.padded_hw
        dtype = level.dtype

        def embed(c: Click) -> torch.Tensor:
            x_p, y_p = c.x + left, c.y + top
            fx, fy = feature_coords(x_p, y_p, stride)
            pooled = window_pool(level, fx, fy, r)
            xy = torch.tensor([[(x_p + 0.5) / pw, (y_p + 0.5) / ph]], dtype=dtype, device=level.device)
            return self.click_mlp(pooled[None]) [0] + self.pos_enc.encode(xy)[0]

        pos = [embed(c) for c in clicks.positives()]
        neg = [embed(c) for c in clicks.negatives()]
        size = max(len(pos), len(neg))
        if size == 0:
            # no clicks: two inert dummies keep the decoder query set nonempty
            queries = torch.zeros(2, self.width, dtype=dtype, device=level.device)
            groups = torch.full((2,), GROUP_DUMMY, dtype=torch.long)
            return SparseQuerySet(queries=queries, groups=groups)

        def group(vecs: list[torch.Tensor], tag: int) -> tuple[list[torch.Tensor], list[int]]:
            pad = size - len(vecs)
            padded = vecs + [torch.zeros(self.width, dtype=dtype, device=level.device)] * pad
            return padded, [tag] * len(vecs) + [GROUP_DUMMY] * pad

        pos_vecs, pos_tags = group(pos, GROUP_CLICK_POS)
        neg_vecs, neg_tags = group(neg, GROUP_CLICK_NEG)
        queries = torch.stack(pos_vecs + neg_vecs, dim=0)
        groups = torch.tensor(pos_tags + neg_tags, dtype=torch.long)
        return SparseQuerySet(queries=queries, groups=groups)

    # ---- in-context dense fusion ----------------------------------------

    def incontext_fusion(
        self,
        query_pyramid: FeaturePyramid,
        ref_pyramid: FeaturePyramid,
        value_pyramid: FeaturePyramid,
        ref_mask: torch.Tensor,  # (N_ref, H, W) binary
    ) -> tuple[torch.Tensor, SparseQuerySet]:
        """Fused lowest-level map plus masked-pooled object queries (encoder width)."""
        k_q_map = query_pyramid.levels[0]
        k_ref_map = ref_pyramid.levels[0]
        v_ref_map = value_pyramid.levels[0]
        if k_q_map.shape[0] != 1:
            raise ShapeError("incontext_fusion expects a single query sample")
        c, fh, fw = k_q_map.shape[1:]
        n_ref = k_ref_map.shape[0]
        k_ref = k_ref_map.permute(1, 0, 2, 3).reshape(c, n_ref * fh * fw)
        v_ref = v_ref_map.permute(1, 0, 2, 3).reshape(c, n_ref * fh * fw)
        k_q = k_q_map[0].reshape(c, fh * fw)
        weights = compute_affinity(k_ref, k_q)
        fused0 = fuse_incontext(v_ref, weights).reshape(1, c, fh, fw)
        pooled_masks = torch.stack([downsample_mask(m, (fh, fw)) for m in ref_mask], dim=0)
        pool_flat = pooled_masks.reshape(n_ref * fh * fw)
        object_qs = masked_pool_queries(k_ref, pool_flat, self.object_queries)
        return fused0, self.project_object_queries(object_qs)

    # ---- bundle assembly -------------------------------------------------

    def assemble(
        self,
        mode: str,
        image_pyramid: FeaturePyramid,
        *,
        class_queries: SparseQuerySet | None = None,
        object_queries: SparseQuerySet | None = None,
        fused_level0: torch.Tensor | None = None,
        click_pyramid: FeaturePyramid | None = None,
        click_query_set: SparseQuerySet | None = None,
        prev_mask: torch.Tensor | None = None,  # (H_pad, W_pad) float
        no_dense_fusion: bool = False,
    ) -> PromptBundle:
        """Compose the per-mode query set and dense pyramid (Mode dispatch).

        semantic:          queries = class bank rows; dense = image pyramid.
        incontext:         queries = object queries; dense = fused lowest level
                           + query-image features at the finer levels.
        interactive:       queries = click queries; dense = image + click maps.
        refine-semantic:   {class, click} queries; dense = image + click maps.
        refine-incontext:  {object, click} queries; dense = fused + click maps.
        """
        levels = image_pyramid.levels
        need = {
            "semantic": (class_queries is not None,),
            "incontext": (object_queries is not None, fused_level0 is not None),
            "interactive": (click_query_set is not None, click_pyramid is not None),
            "refine-semantic": (
                class_queries is not None,
                click_query_set is not None,
                click_pyramid is not None,
            ),
            "refine-incontext": (
                object_queries is not None,
                fused_level0 is not None,
                click_query_set is not None,
                click_pyramid is not None,
            ),
        }
        if mode not in need:
            raise ContractError(f"unknown mode {mode!r}")
        if not all(need[mode]):
            raise ContractError(f"mode {mode!r} is missing required prompt parts")

        fused_levels: frozenset[int] = frozenset()
        if mode == "semantic":
            dense_src = list(levels)
            queries = class_queries
        elif mode == "incontext":
            if no_dense_fusion:
                dense_src = list(levels)
            else:
                dense_src = [fused_level0, levels[1], levels[2]]
                fused_levels = frozenset({0})
            queries = object_queries
        else:
            if click_pyramid.spatial_shapes() != image_pyramid.spatial_shapes():
                raise ShapeError("click pyramid misaligned with image pyramid")
            base = list(levels)
            if mode == "refine-incontext" and not no_dense_fusion:
                base[0] = fused_level0
                fused_levels = frozenset({0})
            if no_dense_fusion:
                dense_src = base
            else:
                dense_src = [b + c for b, c in zip(base, click_pyramid.levels)]
                fused_levels = fused_levels | frozenset(range(len(levels)))
            if mode == "interactive":
                queries = click_query_set
            elif mode == "refine-semantic":
                queries = SparseQuerySet.concat([class_queries, click_query_set])
            else:
                queries = SparseQuerySet.concat([object_queries, click_query_set])

        dense = [proj(src) for proj, src in zip(self.dense_proj, dense_src)]
        mask_seed = None
        if mode in ("interactive", "refine-semantic", "refine-incontext"):
            ph, pw = image_pyramid.padded_hw
            if prev_mask is not None:
                if prev_mask.shape != (ph, pw):
                    raise ShapeError(f"prev_mask {tuple(prev_mask.shape)} != padded {(ph, pw)}")
                mask_seed = prev_mask
            else:
                mask_seed = torch.zeros(ph, pw, dtype=dense[0].dtype, device=dense[0].device)
        return PromptBundle(
            mode=mode,
            queries=queries,
            dense=dense,
            fused_levels=fused_levels,
            input_hw=image_pyramid.input_hw,
            pad=image_pyramid.pad,
            mask_seed=mask_seed,
        )
