"""Shared image encoder plus mask / click-map encoders.

All three emit spatially aligned three-level pyramids at strides 16, 8, 4
(coarse to fine). The image encoder is a small U-Net: a stride-2 stem, three
stride-2 down stages, and a two-step up path with skip connections; the level
outputs are the bottleneck (1/16) and the two up-path maps (1/8, 1/4). The
mask and click encoders are plain down paths with the same widths, which keeps
them cheap while matching the image pyramid level-for-level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .configs import EncoderConfig
from .errors import ShapeError

MAX_STRIDE = 16


@dataclass
class FeaturePyramid:
    """Multi-scale dense features, coarse to fine: strides (16, 8, 4)."""

    levels: list[torch.Tensor]  # each (B, C_s, h_s, w_s)
    strides: tuple[int, ...]
    input_hw: tuple[int, int]  # original (unpadded) spatial size
    pad: tuple[int, int, int, int]  # (left, right, top, bottom)

    @property
    def channel_dims(self) -> tuple[int, ...]:
        return tuple(lvl.shape[1] for lvl in self.levels)

    @property
    def padded_hw(self) -> tuple[int, int]:
        h, w = self.input_hw
        left, right, top, bottom = self.pad
        return (h + top + bottom, w + left + right)

    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [tuple(lvl.shape[-2:]) for lvl in self.levels]


def pad_to_stride(x: torch.Tensor, stride: int = MAX_STRIDE) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    """Symmetric zero-pad (B,C,H,W) so H and W are multiples of stride."""
    h, w = x.shape[-2:]
    ph = (-h) % stride
    pw = (-w) % stride
    pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
    if any(pad):
        x = F.pad(x, pad)
    return x, pad


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ConvBlock(nn.Module):
    """conv3x3-groupnorm-gelu, twice."""

    def __init__(self, cin: int, cout: int, padding_mode: str = "zeros"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, padding_mode=padding_mode),
            _norm(cout),
            nn.GELU(),
            nn.Conv2d(cout, cout, 3, padding=1, padding_mode=padding_mode),
            _norm(cout),
            nn.GELU(),
        )

    def forward(self, x):
        return self.body(x)


class Down(nn.Module):
    """Stride-2 conv followed by a ConvBlock."""

    def __init__(self, cin: int, cout: int, padding_mode: str = "zeros"):
        super().__init__()
        self.reduce = nn.Conv2d(cin, cout, 3, stride=2, padding=1, padding_mode=padding_mode)
        self.block = ConvBlock(cout, cout, padding_mode)

    def forward(self, x):
        return self.block(self.reduce(x))


class ImageEncoder(nn.Module):
    """U-Net-style backbone emitting levels at strides (16, 8, 4)."""

    def __init__(self, config: EncoderConfig, in_channels: int = 3):
        super().__init__()
        self.config = config
        c16, c8, c4 = config.channel_dims
        c_stem = max(config.base_channels // 2, 4)
        self.stem = nn.Sequential(nn.Conv2d(in_channels, c_stem, 3, stride=2, padding=1), _norm(c_stem), nn.GELU())
        self.down4 = Down(c_stem, c4)
        self.down8 = Down(c4, c8)
        self.down16 = Down(c8, c16)
        self.lat8 = nn.Conv2d(c16, c8, 1)
        self.up8 = ConvBlock(2 * c8, c8)
        self.lat4 = nn.Conv2d(c8, c4, 1)
        self.up4 = ConvBlock(2 * c4, c4)

    def forward(
        self, image: torch.Tensor, allow_pad: bool = True, coarse_only: bool = False
    ) -> FeaturePyramid:
        if image.ndim != 4:
            raise ShapeError(f"expected (B,C,H,W) input, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if not allow_pad and (h % MAX_STRIDE or w % MAX_STRIDE):
            raise ShapeError(f"spatial dims {h}x{w} not divisible by stride {MAX_STRIDE}")
        x, pad = pad_to_stride(image)
        s = self.stem(x)  # 1/2
        f4 = self.down4(s)  # 1/4
        f8 = self.down8(f4)  # 1/8
        f16 = self.down16(f8)  # 1/16
        if coarse_only:  # reference images only feed the stride-16 affinity level
            return FeaturePyramid(levels=[f16], strides=(16,), input_hw=(h, w), pad=pad)
        u8 = self.up8(torch.cat([self.lat8(F.interpolate(f16, scale_factor=2, mode="bilinear", align_corners=False)), f8], dim=1))
        u4 = self.up4(torch.cat([self.lat4(F.interpolate(u8, scale_factor=2, mode="bilinear", align_corners=False)), f4], dim=1))
        return FeaturePyramid(levels=[f16, u8, u4], strides=(16, 8, 4), input_hw=(h, w), pad=pad)


class MapEncoder(nn.Module):
    """Consecutive conv blocks for dense prompt maps (reference mask / clicks).

    Shares the image encoder's level widths so the pyramids can be combined
    elementwise. Convolutions use replicate padding so a spatially constant
    input (in particular an all-zero click map) yields a spatially constant,
    input-independent (bias-only) pyramid.
    """

    def __init__(self, config: EncoderConfig, in_channels: int):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        c16, c8, c4 = config.channel_dims
        c_stem = max(config.base_channels // 2, 4)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c_stem, 3, stride=2, padding=1, padding_mode="replicate"),
            _norm(c_stem),
            nn.GELU(),
        )
        self.down4 = Down(c_stem, c4, "replicate")
        self.down8 = Down(c4, c8, "replicate")
        self.down16 = Down(c8, c16, "replicate")

    def forward(self, prompt_map: torch.Tensor, allow_pad: bool = True) -> FeaturePyramid:
        if prompt_map.ndim != 4 or prompt_map.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B,{self.in_channels},H,W) input, got {tuple(prompt_map.shape)}"
            )
        h, w = prompt_map.shape[-2:]
        if not allow_pad and (h % MAX_STRIDE or w % MAX_STRIDE):
            raise ShapeError(f"spatial dims {h}x{w} not divisible by stride {MAX_STRIDE}")
        x, pad = pad_to_stride(prompt_map)
        f4 = self.down4(self.stem(x))
        f8 = self.down8(f4)
        f16 = self.down16(f8)
        return FeaturePyramid(levels=[f16, f8, f4], strides=(16, 8, 4), input_hw=(h, w), pad=pad)


def encode_mask_pair(encoder: MapEncoder, ref_image: torch.Tensor, ref_mask: torch.Tensor) -> FeaturePyramid:
    """Encode a reference image/mask pair (mask concatenated as a 4th channel)."""
    if ref_image.shape[-2:] != ref_mask.shape[-2:]:
        raise ShapeError(
            f"reference image {tuple(ref_image.shape)} and mask {tuple(ref_mask.shape)} are misaligned"
        )
    if ref_mask.ndim == 3:
        ref_mask = ref_mask[:, None]
    return encoder(torch.cat([ref_image, ref_mask.to(ref_image.dtype)], dim=1))
