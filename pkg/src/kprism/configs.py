"""Dataclass configs for data generation, model construction, and training."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

QUERY_GROUPS = ("semantic", "object-fg", "object-bg", "click-pos", "click-neg", "dummy")
MODES = ("semantic", "incontext", "interactive", "refine-semantic", "refine-incontext")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic-shapes dataset generator settings."""

    n_samples: int
    height: int = 64
    width: int = 64
    n_classes: int = 3
    seed: int = 0
    n_val: int = 0
    n_test: int = 0

    def __post_init__(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"image dims must be >= 32, got {self.height}x{self.width}")
        if not 1 <= self.n_classes <= 5:
            raise ConfigError(f"n_classes must be in 1..5, got {self.n_classes}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.n_val < 0 or self.n_test < 0 or self.n_val + self.n_test >= self.n_samples:
            raise ConfigError("n_val + n_test must leave at least one training sample")


@dataclass(frozen=True)
class EncoderConfig:
    """Multi-scale CNN encoder widths; levels are ordered coarse to fine (1/16, 1/8, 1/4)."""

    base_channels: int = 16
    channel_multipliers: tuple[int, int, int] = (1, 2, 4)
    input_size: int = 64

    def __post_init__(self) -> None:
        m4, m8, m16 = self.channel_multipliers
        if not m4 < m8 < m16:
            raise ConfigError("channel dims must strictly increase with depth")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be >= 2")

    @property
    def strides(self) -> tuple[int, int, int]:
        return (16, 8, 4)

    @property
    def channel_dims(self) -> tuple[int, int, int]:
        m4, m8, m16 = self.channel_multipliers
        b = self.base_channels
        return (b * m16, b * m8, b * m4)  # coarse-to-fine, matching strides


@dataclass(frozen=True)
class MoEDecoderConfig:
    """Mixture-of-experts decoder shape: L layers cycling over pyramid levels."""

    num_layers: int = 6
    num_experts: int = 5
    heads: int = 8
    width: int = 256
    scale_order: tuple[int, ...] = (0, 1, 2)
    ffn_dim: int | None = None

    def __post_init__(self) -> None:
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if self.num_layers % len(self.scale_order) != 0:
            raise ConfigError(
                f"num_layers ({self.num_layers}) must be divisible by the "
                f"scale schedule length ({len(self.scale_order)})"
            )
        if self.width % self.heads != 0:
            raise ConfigError("width must be divisible by heads")

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.width

    def layer_levels(self) -> tuple[int, ...]:
        """Round-robin layer -> pyramid-level assignment."""
        order = self.scale_order
        return tuple(order[i % len(order)] for i in range(self.num_layers))


@dataclass(frozen=True)
class AblationFlags:
    no_moe_ca: bool = False
    no_moe_ffn: bool = False
    no_dense_fusion: bool = False
    no_sparse_queries: bool = False
    single_mode: str | None = None

    def __post_init__(self) -> None:
        if self.single_mode is not None and self.single_mode not in (
            "semantic",
            "incontext",
            "interactive",
        ):
            raise ConfigError(f"single_mode must name a base mode, got {self.single_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Joint three-mode training settings (desk-scale defaults)."""

    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    warmup_epochs: int = 3
    min_lr_factor: float = 1e-5
    weight_decay: float = 1e-4
    input_size: int = 64
    mode_probs: tuple[float, float, float] = (0.3, 0.3, 0.4)
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    moe: MoEDecoderConfig = field(default_factory=lambda: MoEDecoderConfig(width=64, heads=2))
    ablations: AblationFlags = field(default_factory=AblationFlags)
    queries_per_class: int = 2
    object_queries: int = 6
    click_window_radius: int = 1
    click_disk_radius: int = 1
    refine_clicks: int = 2
    interactive_clicks: int = 3
    augment: bool = True
    aux_loss_weight: float = 0.4  # deep supervision of per-layer mask logits

    def __post_init__(self) -> None:
        if abs(sum(self.mode_probs) - 1.0) > 1e-9 or any(p < 0 for p in self.mode_probs):
            raise ConfigError(f"mode_probs must be nonnegative and sum to 1, got {self.mode_probs}")
        if self.object_queries % 2 != 0:
            raise ConfigError("object_queries must be even (half foreground, half background)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Full-size settings; not exercised by the desk-scale test suite."""
        base = dict(
            epochs=75,
            batch_size=16,
            lr=1e-4,
            warmup_epochs=10,
            input_size=512,
            encoder=EncoderConfig(base_channels=96, input_size=512),
            moe=MoEDecoderConfig(width=256),
        )
        base.update(overrides)
        return cls(**base)


def _as_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return _as_dict(cfg)


def _filter_fields(data: dict, cls, strict: bool) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown and strict:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return {k: v for k, v in data.items() if k in known}


def train_config_from_dict(data: dict, strict: bool = True) -> TrainConfig:
    """Rebuild a TrainConfig; strict=False tolerates fields from older versions."""
    data = dict(data)
    if "encoder" in data and isinstance(data["encoder"], dict):
        enc = _filter_fields(data["encoder"], EncoderConfig, strict)
        if "channel_multipliers" in enc:
            enc["channel_multipliers"] = tuple(enc["channel_multipliers"])
        data["encoder"] = EncoderConfig(**enc)
    if "moe" in data and isinstance(data["moe"], dict):
        moe = _filter_fields(data["moe"], MoEDecoderConfig, strict)
        if "scale_order" in moe:
            moe["scale_order"] = tuple(moe["scale_order"])
        data["moe"] = MoEDecoderConfig(**moe)
    if "ablations" in data and isinstance(data["ablations"], dict):
        data["ablations"] = AblationFlags(**_filter_fields(data["ablations"], AblationFlags, strict))
    if "mode_probs" in data:
        data["mode_probs"] = tuple(data["mode_probs"])
    return TrainConfig(**_filter_fields(data, TrainConfig, strict))


def load_train_config(path: str | Path) -> TrainConfig:
    """Read a TrainConfig from a JSON document."""
    raw = json.loads(Path(path).read_text())
    return train_config_from_dict(raw)
