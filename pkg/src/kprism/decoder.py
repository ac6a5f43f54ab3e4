"""Bidirectional mixture-of-experts cross-attention decoder.

Each layer runs, on one pyramid level chosen by a cyclic schedule:
  (a) MoE cross-attention, queries <- features, under a foreground/background
      attention mask derived from the running probability mask,
  (b) self-attention over the queries,
  (c) a MoE feed-forward block,
  (d) MoE cross-attention in the reverse direction, features <- queries,
      under the transposed mask,
followed by a residual resampling bridge that carries the updated level into
the next layer's level. Expert outputs are blended by a per-token softmax gate
(all experts always active). Dummy queries are kept exactly zero and excluded
from keys, so padding never leaks signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .configs import MoEDecoderConfig
from .errors import NumericError, ShapeError
from .positional import FourierPositionEncoding
from .prompts import BG_GROUPS, FG_GROUPS, GROUP_DUMMY

NEG_INF = float("-inf")


@dataclass
class AttentionMask:
    """Additive attention mask over {0, -inf}; rows follow the 0.5 rule.

    Foreground-group queries (semantic, object-fg, click-pos) may attend where
    the probability mask is >= 0.5; background-group queries (object-bg,
    click-neg) where it is < 0.5; dummy queries everywhere. Rows that would be
    fully -inf are replaced by all-0 rows.
    """

    values: torch.Tensor  # (..., q, h*w)
    groups: torch.Tensor  # (..., q)


def build_attention_mask(p_map: torch.Tensor, groups: torch.Tensor) -> AttentionMask:
    """Mask from per-pixel foreground probabilities and per-query group tags.

    p_map: (h, w) or (B, h, w) in [0,1]; groups: (q,) or (B, q).
    """
    squeeze = p_map.ndim == 2
    if squeeze:
        p_map = p_map[None]
        groups = groups[None]
    if p_map.ndim != 3 or groups.ndim != 2 or p_map.shape[0] != groups.shape[0]:
        raise ShapeError(f"p_map {tuple(p_map.shape)} vs groups {tuple(groups.shape)}")
    b, h, w = p_map.shape
    q = groups.shape[1]
    fg_ok = (p_map >= 0.5).reshape(b, 1, h * w)
    is_fg = torch.stack([groups == g for g in FG_GROUPS]).any(dim=0)[:, :, None]
    is_bg = torch.stack([groups == g for g in BG_GROUPS]).any(dim=0)[:, :, None]
    allowed = torch.ones(b, q, h * w, dtype=torch.bool, device=p_map.device)
    allowed = torch.where(is_fg, fg_ok, allowed)
    allowed = torch.where(is_bg, ~fg_ok, allowed)
    # fallback: a query with no allowed position attends everywhere
    empty = ~allowed.any(dim=-1, keepdim=True)
    allowed = allowed | empty
    values = torch.zeros(b, q, h * w, dtype=p_map.dtype, device=p_map.device)
    values = values.masked_fill(~allowed, NEG_INF)
    if squeeze:
        return AttentionMask(values=values[0], groups=groups[0])
    return AttentionMask(values=values, groups=groups)


def transpose_attention_mask(mask: torch.Tensor, groups: torch.Tensor) -> torch.Tensor:
    """Mask for the features<-queries pass: transposed, dummy keys excluded."""
    t = mask.transpose(-1, -2).clone()  # (B, hw, q)
    dummy_cols = (groups == GROUP_DUMMY)[:, None, :]
    t = t.masked_fill(dummy_cols, NEG_INF)
    empty = torch.isinf(t).all(dim=-1, keepdim=True)
    return torch.where(empty, torch.zeros_like(t), t)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # (..., n, C) -> (..., heads, n, C/heads)
    *lead, n, c = x.shape
    return x.reshape(*lead, n, heads, c // heads).transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    # (..., heads, n, d) -> (..., n, heads*d)
    *lead, hds, n, d = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, hds * d)


class MoECrossAttention(nn.Module):
    """M parallel attention experts blended by a softmax gate over the input tokens."""

    def __init__(self, width: int, heads: int, num_experts: int):
        super().__init__()
        self.width = width
        self.heads = heads
        self.num_experts = num_experts
        scale = 1.0 / math.sqrt(width)

        def proj() -> nn.Parameter:
            return nn.Parameter(torch.randn(num_experts, width, width) * scale)

        self.w_q, self.w_k, self.w_v, self.w_o = proj(), proj(), proj(), proj()
        self.b_q = nn.Parameter(torch.zeros(num_experts, width))
        self.b_k = nn.Parameter(torch.zeros(num_experts, width))
        self.b_v = nn.Parameter(torch.zeros(num_experts, width))
        self.b_o = nn.Parameter(torch.zeros(num_experts, width))
        self.gate = nn.Linear(width, num_experts)
        self.norm = nn.LayerNorm(width)

    def forward(
        self,
        queries: torch.Tensor,  # (B, q, C)
        keys: torch.Tensor,  # (B, n, C)
        values: torch.Tensor,  # (B, n, C)
        attn_mask: torch.Tensor | None = None,  # (B, q, n) additive
        q_pos: torch.Tensor | None = None,
        k_pos: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        if torch.isnan(queries).any() or torch.isnan(keys).any() or torch.isnan(values).any():
            raise NumericError("NaN in attention inputs")
        b, q, c = queries.shape
        n = keys.shape[1]
        m, heads = self.num_experts, self.heads
        d = c // heads
        alpha = torch.softmax(self.gate(queries), dim=-1)  # (B, q, M)
        q_in = queries if q_pos is None else queries + q_pos
        k_in = keys if k_pos is None else keys + k_pos
        # all experts projected in one GEMM with fused bias: (B*T, C) @ (C, M*C)
        wq = self.w_q.permute(1, 0, 2).reshape(c, m * c)
        wk = self.w_k.permute(1, 0, 2).reshape(c, m * c)
        wv = self.w_v.permute(1, 0, 2).reshape(c, m * c)
        qm = torch.addmm(self.b_q.reshape(m * c), q_in.reshape(b * q, c), wq).view(b, q, m, c)
        km = torch.addmm(self.b_k.reshape(m * c), k_in.reshape(b * n, c), wk).view(b, n, m, c)
        vm = torch.addmm(self.b_v.reshape(m * c), values.reshape(b * n, c), wv).view(b, n, m, c)
        # expert x head fold: (B, T, M, C) -> (B, M*H, T, d)
        qh = qm.view(b, q, m * heads, d).transpose(1, 2)
        kh = km.view(b, n, m * heads, d).transpose(1, 2)
        vh = vm.view(b, n, m * heads, d).transpose(1, 2)
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(d)  # (B, M*H, q, n)
        if attn_mask is not None:
            logits = logits + attn_mask[:, None]
        weights = torch.softmax(logits, dim=-1)
        ctx = (weights @ vh).transpose(1, 2).reshape(b, q, m, c)
        # per-expert output projection via bmm over the expert dim
        expert_out = torch.baddbmm(
            self.b_o[:, None, :], ctx.permute(2, 0, 1, 3).reshape(m, b * q, c), self.w_o
        ).view(m, b, q, c)
        moe = (expert_out * alpha.permute(2, 0, 1)[..., None]).sum(dim=0)
        out = self.norm(queries + moe)
        probe = weights.view(b, m, heads, q, n) if need_weights else None
        return out, alpha, probe


class MoEFFN(nn.Module):
    """M parallel two-layer MLPs blended by a softmax gate per token."""

    def __init__(self, width: int, hidden: int, num_experts: int):
        super().__init__()
        self.num_experts = num_experts
        self.w1 = nn.Parameter(torch.randn(num_experts, width, hidden) / math.sqrt(width))
        self.b1 = nn.Parameter(torch.zeros(num_experts, hidden))
        self.w2 = nn.Parameter(torch.randn(num_experts, hidden, width) / math.sqrt(hidden))
        self.b2 = nn.Parameter(torch.zeros(num_experts, width))
        self.gate = nn.Linear(width, num_experts)
        self.norm = nn.LayerNorm(width)

    def forward(self, x: torch.Tensor):
        b, q, c = x.shape
        m = self.num_experts
        f = self.w1.shape[-1]
        alpha = torch.softmax(self.gate(x), dim=-1)  # (B, q, M)
        w1 = self.w1.permute(1, 0, 2).reshape(c, m * f)
        h = F.gelu(torch.addmm(self.b1.reshape(m * f), x.reshape(b * q, c), w1).view(b, q, m, f))
        expert_out = torch.baddbmm(
            self.b2[:, None, :], h.permute(2, 0, 1, 3).reshape(m, b * q, f), self.w2
        ).view(m, b, q, c)
        moe = (expert_out * alpha.permute(2, 0, 1)[..., None]).sum(dim=0)
        return self.norm(x + moe), alpha


class SelfAttention(nn.Module):
    """Plain multi-head self-attention with residual + layer norm."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.o_proj = nn.Linear(width, width)
        self.norm = nn.LayerNorm(width)

    def forward(self, x: torch.Tensor, pos: torch.Tensor | None = None, key_mask: torch.Tensor | None = None):
        # key_mask: (B, q) True where the token may be attended to
        xin = x if pos is None else x + pos
        q = _split_heads(self.q_proj(xin), self.heads)
        k = _split_heads(self.k_proj(xin), self.heads)
        v = _split_heads(self.v_proj(x), self.heads)
        logits = torch.einsum("bhqd,bhnd->bhqn", q, k) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            bias = torch.zeros_like(key_mask, dtype=x.dtype).masked_fill(~key_mask, NEG_INF)
            # a row with no attendable key falls back to uniform attention
            if (~key_mask).all(dim=-1).any():
                bias = torch.where(key_mask.any(dim=-1, keepdim=True), bias, torch.zeros_like(bias))
            logits = logits + bias[:, None, None, :]
        weights = torch.softmax(logits, dim=-1)
        ctx = _merge_heads(torch.einsum("bhqn,bhnd->bhqd", weights, v))
        return self.norm(x + self.o_proj(ctx))


class MoEDecoderLayer(nn.Module):
    def __init__(self, width: int, heads: int, experts_ca: int, experts_ffn: int, ffn_dim: int):
        super().__init__()
        self.queries_from_features = MoECrossAttention(width, heads, experts_ca)
        self.self_attn = SelfAttention(width, heads)
        self.ffn = MoEFFN(width, ffn_dim, experts_ffn)
        self.features_from_queries = MoECrossAttention(width, heads, experts_ca)


@dataclass
class DecoderOutput:
    logits: torch.Tensor  # (B, H, W) at the original resolution
    aux_logits: list[torch.Tensor]  # per layer, at that layer's level resolution
    gate_trace: list[dict[str, torch.Tensor]]  # per layer: ca / ffn / ca_features
    layer_levels: tuple[int, ...]
    attn_probe: tuple[torch.Tensor, torch.Tensor] | None = None  # (weights, mask) at probed layer


class MoEDecoder(nn.Module):
    def __init__(self, config: MoEDecoderConfig, num_experts_ca: int | None = None, num_experts_ffn: int | None = None):
        super().__init__()
        self.config = config
        m_ca = config.num_experts if num_experts_ca is None else num_experts_ca
        m_ffn = config.num_experts if num_experts_ffn is None else num_experts_ffn
        w, h = config.width, config.heads
        self.layers = nn.ModuleList(
            [MoEDecoderLayer(w, h, m_ca, m_ffn, config.hidden_dim) for _ in range(config.num_layers)]
        )
        self.bridges = nn.ModuleList(
            [nn.Conv2d(w, w, 3, padding=1) for _ in range(max(config.num_layers - 1, 0))]
        )
        self.group_embed = nn.Embedding(6, w)
        self.mask_head = nn.Conv2d(w, 1, 1)
        self.pos_enc = FourierPositionEncoding(w)

    def head_logits(self, features: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        """Shared 1x1 mask head followed by bilinear upsampling to out_hw."""
        logits = self.mask_head(features)
        if tuple(features.shape[-2:]) != tuple(out_hw):
            logits = F.interpolate(logits, size=out_hw, mode="bilinear", align_corners=False)
        return logits[:, 0]

    def forward(
        self,
        dense: list[torch.Tensor],
        queries: torch.Tensor,
        groups: torch.Tensor,
        mask_seed: torch.Tensor | None,
        input_hw: tuple[int, int],
        pad: tuple[int, int, int, int],
        capture_attn_layer: int | None = None,
    ) -> DecoderOutput:
        if queries.ndim == 2:
            queries = queries[None]
            groups = groups[None]
        b = dense[0].shape[0]
        if queries.shape[0] != b or queries.shape[-1] != self.config.width:
            raise ShapeError(
                f"queries {tuple(queries.shape)} incompatible with batch {b} width {self.config.width}"
            )
        dtype = dense[0].dtype
        levels = list(dense)
        layer_levels = self.config.layer_levels()
        nondummy = (groups != GROUP_DUMMY)[..., None].to(dtype)
        q_pos = self.group_embed(groups) * nondummy
        queries = queries * nondummy
        grid_cache: dict[int, torch.Tensor] = {}

        def grid(lvl: int) -> torch.Tensor:
            if lvl not in grid_cache:
                h, w = levels[lvl].shape[-2:]
                g = self.pos_enc.grid(h, w, device=levels[lvl].device, dtype=dtype)
                grid_cache[lvl] = g[None].expand(b, -1, -1)
            return grid_cache[lvl]

        gate_trace: list[dict[str, torch.Tensor]] = []
        aux_logits: list[torch.Tensor] = []
        attn_probe = None
        for li, lvl in enumerate(layer_levels):
            feat = levels[lvl]
            h, w = feat.shape[-2:]
            if li == 0:
                if mask_seed is None:
                    p_map = torch.full((b, h, w), 0.5, dtype=dtype, device=feat.device)
                else:
                    seed = mask_seed[None, None] if mask_seed.ndim == 2 else mask_seed[:, None]
                    p_map = F.interpolate(seed.to(dtype), size=(h, w), mode="area")[:, 0]
            else:
                prev = levels[layer_levels[li - 1]]
                prev_logits = self.mask_head(prev)
                p_map = torch.sigmoid(
                    F.interpolate(prev_logits, size=(h, w), mode="bilinear", align_corners=False)
                )[:, 0]
            mask = build_attention_mask(p_map, groups).values
            tokens = feat.flatten(2).transpose(1, 2)  # (B, hw, C)
            k_pos = grid(lvl)
            layer = self.layers[li]

            need_w = capture_attn_layer == li
            queries, alpha_ca, attn_w = layer.queries_from_features(
                queries, tokens, tokens, attn_mask=mask, q_pos=q_pos, k_pos=k_pos, need_weights=need_w
            )
            if need_w:
                attn_probe = (attn_w, mask)
            queries = queries * nondummy
            queries = layer.self_attn(queries, pos=q_pos, key_mask=(groups != GROUP_DUMMY)) * nondummy
            queries, alpha_ffn = layer.ffn(queries)
            queries = queries * nondummy

            t_mask = transpose_attention_mask(mask, groups)
            new_tokens, alpha_fq, _ = layer.features_from_queries(
                tokens, queries, queries, attn_mask=t_mask, q_pos=k_pos, k_pos=q_pos
            )
            levels[lvl] = new_tokens.transpose(1, 2).reshape(b, -1, h, w)
            aux_logits.append(self.mask_head(levels[lvl])[:, 0])
            gate_trace.append({"ca": alpha_ca, "ffn": alpha_ffn, "ca_features": alpha_fq})

            if li < len(layer_levels) - 1:
                nxt = layer_levels[li + 1]
                src = levels[lvl]
                if levels[nxt].shape[-2:] != src.shape[-2:]:
                    src = F.interpolate(src, size=levels[nxt].shape[-2:], mode="bilinear", align_corners=False)
                levels[nxt] = levels[nxt] + self.bridges[li](src)

        left, right, top, bottom = pad
        ph, pw = input_hw[0] + top + bottom, input_hw[1] + left + right
        logits = self.head_logits(levels[layer_levels[-1]], (ph, pw))
        logits = logits[:, top : top + input_hw[0], left : left + input_hw[1]]
        if not torch.isfinite(logits).all():
            raise NumericError("decoder produced non-finite logits")
        return DecoderOutput(
            logits=logits,
            aux_logits=aux_logits,
            gate_trace=gate_trace,
            layer_levels=layer_levels,
            attn_probe=attn_probe,
        )
