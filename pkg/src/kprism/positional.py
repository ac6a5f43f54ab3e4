"""Frozen random-Fourier positional features for clicks and feature grids."""

from __future__ import annotations

import math

import torch
from torch import nn

FOURIER_SEED = 20240601


class FourierPositionEncoding(nn.Module):
    """Maps normalized (x, y) in [0,1]^2 to a `width`-dim embedding.

    Coordinates are rescaled to [-1, 1], projected through a fixed Gaussian
    frequency matrix (width // 2 frequencies), and expanded with sin/cos. The
    frequency matrix is a frozen buffer drawn from a dedicated seed so that
    embeddings are identical across runs and independent of model init.
    """

    def __init__(self, width: int, scale: float = 1.0, seed: int = FOURIER_SEED):
        super().__init__()
        if width % 2 != 0:
            raise ValueError("positional width must be even")
        gen = torch.Generator().manual_seed(seed)
        freq = torch.randn((2, width // 2), generator=gen) * scale
        self.register_buffer("freq", freq)
        self.width = width

    def encode(self, xy: torch.Tensor) -> torch.Tensor:
        """xy: (..., 2) normalized to [0,1]; returns (..., width)."""
        t = (2.0 * xy - 1.0) @ self.freq.to(xy.dtype) * (2.0 * math.pi)
        return torch.cat([torch.sin(t), torch.cos(t)], dim=-1)

    def grid(self, h: int, w: int, device=None, dtype=None) -> torch.Tensor:
        """Per-pixel-center embeddings for an h x w grid, shape (h*w, width)."""
        dtype = dtype or self.freq.dtype
        ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        xy = torch.stack([gx, gy], dim=-1).reshape(-1, 2)  # (h*w, 2), x first
        return self.encode(xy)
