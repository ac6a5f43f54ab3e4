"""Unified semantic / in-context / interactive segmentation package."""

import numpy as _np
import torch as _torch

# warm numpy's float-limit caches before enabling flush-to-zero, then disable
# denormals: they cripple CPU throughput in sigmoid/softmax tails
_ = _np.finfo(_np.float32).smallest_subnormal, _np.finfo(_np.float64).smallest_subnormal
_torch.set_flush_denormal(True)

from .configs import (
    AblationFlags,
    EncoderConfig,
    MoEDecoderConfig,
    SynthConfig,
    TrainConfig,
)
from .model import ModeRequest, SegModel, build_model, compute_loss
from .prompts import Click, ClickSet

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "Click",
    "ClickSet",
    "EncoderConfig",
    "ModeRequest",
    "MoEDecoderConfig",
    "SegModel",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "compute_loss",
    "__version__",
]
