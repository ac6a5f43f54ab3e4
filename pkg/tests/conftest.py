import numpy as np
import pytest
import torch

from kprism.configs import EncoderConfig, MoEDecoderConfig, SynthConfig, TrainConfig
from kprism.data import generate_synthetic
from kprism.model import build_model

TINY_ENCODER = EncoderConfig(base_channels=4, input_size=32)
TINY_MOE = MoEDecoderConfig(num_layers=3, num_experts=2, heads=2, width=16)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=2,
        batch_size=2,
        lr=1e-3,
        warmup_epochs=1,
        input_size=32,
        encoder=TINY_ENCODER,
        moe=TINY_MOE,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_train_config()


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    model = build_model(tiny_cfg, n_classes=3, seed=1)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinydata")
    return generate_synthetic(SynthConfig(n_samples=14, height=32, width=32, seed=5, n_test=4), out)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(1234)
