import numpy as np
import pytest

from kprism.ablation import PRESETS, parameter_count, preset_config
from kprism.errors import ConfigError
from kprism.model import build_model
from kprism.training import build_training_batch, class_carriers, load_split_samples, train_step
from tests.conftest import tiny_train_config


def test_preset_mapping():
    base = tiny_train_config()
    assert preset_config("no_moe_ca", base).ablations.no_moe_ca
    assert preset_config("no_moe_ffn", base).ablations.no_moe_ffn
    both = preset_config("no_moe_both", base).ablations
    assert both.no_moe_ca and both.no_moe_ffn
    assert preset_config("no_dense", base).ablations.no_dense_fusion
    assert preset_config("no_sparse", base).ablations.no_sparse_queries
    assert preset_config("experts_3", base).moe.num_experts == 3
    assert preset_config("single_mode_incontext", base).ablations.single_mode == "incontext"
    with pytest.raises(ConfigError):
        preset_config("nonsense", base)
    assert "experts_5" in PRESETS


def test_parameter_count_increases_with_expert_count():
    base = tiny_train_config()
    counts = [parameter_count(preset_config(f"experts_{m}", base), 3) for m in (2, 3, 4, 5)]
    assert counts == sorted(counts)
    assert len(set(counts)) == 4  # strictly increasing


def test_removing_moe_components_drops_parameters():
    base = tiny_train_config()
    full = parameter_count(base, 3)
    no_ca = parameter_count(preset_config("no_moe_ca", base), 3)
    no_ffn = parameter_count(preset_config("no_moe_ffn", base), 3)
    no_both = parameter_count(preset_config("no_moe_both", base), 3)
    assert no_ca < full
    assert no_ffn < full
    assert no_both < no_ca and no_both < no_ffn


def test_no_dense_variant_trains_without_error(tiny_manifest):
    cfg = preset_config("no_dense", tiny_train_config(augment=False))
    samples = load_split_samples(tiny_manifest, "train", 32)
    model = build_model(cfg, tiny_manifest.n_cls, seed=0)
    rng = np.random.default_rng(0)
    carriers = class_carriers(samples)
    for mode in ("semantic", "incontext", "interactive"):
        items = build_training_batch(mode, samples, [0, 1], rng, cfg, carriers)
        total, _, _ = train_step(model, mode, items, cfg)
        total.backward()


def test_no_sparse_variant_forwards(tiny_manifest):
    cfg = preset_config("no_sparse", tiny_train_config(augment=False))
    model = build_model(cfg, tiny_manifest.n_cls, seed=0)
    img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    from kprism.model import ModeRequest

    prob = model.predict(ModeRequest(mode="semantic", class_id=1), img)["probability"]
    assert prob.shape == (32, 32)
