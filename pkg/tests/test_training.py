import json

import numpy as np
import pytest
import torch
from scipy import stats

from kprism.configs import MoEDecoderConfig, SynthConfig, TrainConfig, load_train_config, train_config_from_dict, train_config_to_dict
from kprism.data import binarize, generate_synthetic
from kprism.errors import ConfigError
from kprism.model import ModeRequest, build_model
from kprism.training import (
    build_training_batch,
    class_carriers,
    lr_at_epoch,
    load_checkpoint,
    load_split_samples,
    sample_mode,
    save_checkpoint,
    train,
    train_step,
)
from tests.conftest import tiny_train_config

# ------------------------------------------------------------ mode sampling


def test_sample_mode_degenerate_distribution():
    rng = np.random.default_rng(0)
    assert all(sample_mode(rng, (1.0, 0.0, 0.0)) == "semantic" for _ in range(50))


def test_sample_mode_frequencies_within_tolerance():
    rng = np.random.default_rng(123)
    draws = [sample_mode(rng, (0.3, 0.3, 0.4)) for _ in range(100_000)]
    freq = {m: draws.count(m) / 100_000 for m in ("semantic", "incontext", "interactive")}
    assert abs(freq["semantic"] - 0.3) < 0.01
    assert abs(freq["incontext"] - 0.3) < 0.01
    assert abs(freq["interactive"] - 0.4) < 0.01
    counts = [draws.count(m) for m in ("semantic", "incontext", "interactive")]
    chi = stats.chisquare(counts, f_exp=[30_000, 30_000, 40_000])
    assert chi.pvalue > 0.01


def test_sample_mode_reproducible():
    a = [sample_mode(np.random.default_rng(7), (0.3, 0.3, 0.4)) for _ in range(20)]
    b = [sample_mode(np.random.default_rng(7), (0.3, 0.3, 0.4)) for _ in range(20)]
    assert a == b
    with pytest.raises(ConfigError):
        sample_mode(np.random.default_rng(0), (0.5, 0.5, 0.5))


# ------------------------------------------------------------ batches


@pytest.fixture(scope="module")
def train_samples(tmp_path_factory):
    out = tmp_path_factory.mktemp("traindata")
    manifest = generate_synthetic(SynthConfig(n_samples=12, height=32, width=32, seed=3), out)
    return load_split_samples(manifest, "train", 32)


def test_mode1_target_is_binarized_class(train_samples):
    rng = np.random.default_rng(1)
    cfg = tiny_train_config(augment=False)
    items = build_training_batch("semantic", train_samples, [0, 1, 2], rng, cfg)
    for item in items:
        sample = train_samples[item.sample_index]
        np.testing.assert_array_equal(item.target, binarize(sample.mask, item.class_id))


def test_mode2_support_differs_from_query(train_samples):
    rng = np.random.default_rng(2)
    cfg = tiny_train_config(augment=False)
    carriers = class_carriers(train_samples)
    for _ in range(5):
        items = build_training_batch("incontext", train_samples, list(range(8)), rng, cfg, carriers)
        for item in items:
            if len(carriers[item.class_id]) >= 2:
                assert item.support_index != item.sample_index
            assert item.support is not None
            assert set(np.unique(item.support[1])) <= {0.0, 1.0}


def test_training_round_protocol_spy(train_samples, monkeypatch):
    """Mode-1/2 refine with 2 simulated clicks; Mode-3 applies 3 iterative clicks."""
    import kprism.training as training_mod

    cfg = tiny_train_config(augment=False)
    model = build_model(cfg, 3, seed=0)
    sim_calls = {"n": 0}
    real_sim = training_mod.simulate_click

    def counting_sim(pred, gt):
        sim_calls["n"] += 1
        return real_sim(pred, gt)

    monkeypatch.setattr(training_mod, "simulate_click", counting_sim)
    forward_calls = {"n": 0}
    real_fwd = model.forward_batch

    def counting_fwd(*args, **kwargs):
        forward_calls["n"] += 1
        return real_fwd(*args, **kwargs)

    monkeypatch.setattr(model, "forward_batch", counting_fwd)

    rng = np.random.default_rng(3)
    for mode, expected_sims_per_item, expected_forwards in (
        ("semantic", 2, 3),
        ("incontext", 2, 3),
        ("interactive", 3, 3),
    ):
        sim_calls["n"] = 0
        forward_calls["n"] = 0
        items = build_training_batch(mode, train_samples, [0, 1], rng, cfg)
        train_step(model, mode, items, cfg)
        assert forward_calls["n"] == expected_forwards, mode
        assert sim_calls["n"] == expected_sims_per_item * len(items), mode


# ------------------------------------------------------------ schedule


def test_lr_warmup_then_cosine():
    cfg = tiny_train_config(epochs=10, warmup_epochs=3, lr=1e-3, min_lr_factor=1e-5)
    assert lr_at_epoch(cfg, 0) < lr_at_epoch(cfg, 2)
    assert lr_at_epoch(cfg, 2) == pytest.approx(1e-3)
    assert lr_at_epoch(cfg, 9) < lr_at_epoch(cfg, 3)
    assert lr_at_epoch(cfg, 9) >= 1e-3 * 1e-5


# ------------------------------------------------------------ determinism & checkpoints


def test_single_step_deterministic(train_samples):
    cfg = tiny_train_config()

    def one_step():
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        model = build_model(cfg, 3, seed=cfg.seed)
        items = build_training_batch("semantic", train_samples, [0, 1], rng, cfg)
        total, ce, dice_l = train_step(model, "semantic", items, cfg)
        return float(total)

    assert abs(one_step() - one_step()) <= 1e-6


def test_fixed_seed_training_reproduces_loss_log(tmp_path):
    manifest = generate_synthetic(SynthConfig(n_samples=8, height=32, width=32, seed=4), tmp_path / "d")
    cfg = tiny_train_config(epochs=2, batch_size=4)
    train(cfg, manifest, tmp_path / "r1", log_every=0)
    train(cfg, manifest, tmp_path / "r2", log_every=0)
    log1 = (tmp_path / "r1" / "loss_log.jsonl").read_bytes()
    log2 = (tmp_path / "r2" / "loss_log.jsonl").read_bytes()
    assert log1 == log2
    rows = [json.loads(l) for l in log1.decode().splitlines()]
    assert {r["mode"] for r in rows} <= {"semantic", "incontext", "interactive"}
    assert all(set(r) == {"epoch", "step", "mode", "loss", "ce", "dice", "lr"} for r in rows)


def test_checkpoint_roundtrip_reproduces_forward(tmp_path, tiny_manifest):
    cfg = tiny_train_config()
    model = build_model(cfg, tiny_manifest.n_cls, tiny_manifest.class_names, seed=9)
    path = save_checkpoint(tmp_path / "ckpt.pt", model, cfg, epoch=0)
    loaded, loaded_cfg, meta = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert meta["epoch"] == 0
    img = np.random.default_rng(5).random((32, 32, 3)).astype(np.float32)
    req = ModeRequest(mode="semantic", class_id=2)
    before = model.predict(req, img)["probability"]
    after = loaded.predict(req, img)["probability"]
    np.testing.assert_array_equal(before, after)


def test_train_writes_epoch_checkpoints(tmp_path):
    manifest = generate_synthetic(SynthConfig(n_samples=6, height=32, width=32, seed=5), tmp_path / "d")
    cfg = tiny_train_config(epochs=2, batch_size=3)
    final = train(cfg, manifest, tmp_path / "run", log_every=0)
    assert final.exists()
    assert (tmp_path / "run" / "ckpt_epoch000.pt").exists()
    assert (tmp_path / "run" / "ckpt_epoch001.pt").exists()
    assert (tmp_path / "run" / "loss_log.jsonl").exists()


# ------------------------------------------------------------ config plumbing


def test_train_config_json_roundtrip(tmp_path):
    cfg = tiny_train_config(lr=5e-4)
    doc = train_config_to_dict(cfg)
    assert train_config_from_dict(doc) == cfg
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    assert load_train_config(path) == cfg
    with pytest.raises(ConfigError):
        train_config_from_dict({"lr": 1e-3, "bogus": 1})


def test_mode_probs_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode_probs=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        MoEDecoderConfig(num_layers=5, scale_order=(0, 1, 2))


def test_paper_scale_preset():
    cfg = TrainConfig.paper_scale()
    assert cfg.input_size == 512
    assert cfg.encoder.channel_dims == (384, 192, 96)
    assert cfg.moe.width == 256
    assert cfg.moe.num_experts == 5
    assert cfg.epochs == 75
    assert cfg.lr == pytest.approx(1e-4)
    assert cfg.warmup_epochs == 10
