import pytest
import torch

from kprism.configs import EncoderConfig
from kprism.encoders import ImageEncoder, MapEncoder, encode_mask_pair, pad_to_stride
from kprism.errors import ShapeError


def _rand_image(h, w, seed=0, channels=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((1, channels, h, w), generator=g)


def test_image_pyramid_shapes_64():
    enc = ImageEncoder(EncoderConfig(base_channels=16, input_size=64))
    pyr = enc(_rand_image(64, 64))
    assert pyr.spatial_shapes() == [(4, 4), (8, 8), (16, 16)]
    assert pyr.channel_dims == (64, 32, 16)
    assert pyr.strides == (16, 8, 4)


def test_paper_scale_shapes_512():
    enc = ImageEncoder(EncoderConfig(base_channels=96, input_size=512))
    with torch.no_grad():
        pyr = enc(_rand_image(512, 512))
    assert pyr.spatial_shapes() == [(32, 32), (64, 64), (128, 128)]
    assert pyr.channel_dims == (384, 192, 96)


def test_forward_is_deterministic():
    enc = ImageEncoder(EncoderConfig(base_channels=8))
    x = _rand_image(32, 32, seed=3)
    a = enc(x)
    b = enc(x)
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la, lb)


def test_padding_policy():
    enc = ImageEncoder(EncoderConfig(base_channels=4))
    pyr = enc(_rand_image(50, 40, seed=1))
    assert pyr.padded_hw == (64, 48)
    assert pyr.input_hw == (50, 40)
    assert pyr.spatial_shapes()[0] == (4, 3)
    with pytest.raises(ShapeError):
        enc(_rand_image(50, 40, seed=1), allow_pad=False)


def test_channel_dims_must_increase():
    with pytest.raises(Exception):
        EncoderConfig(base_channels=8, channel_multipliers=(4, 2, 1))


def test_mask_encoder_alignment_and_sensitivity():
    cfg = EncoderConfig(base_channels=8)
    img_enc = ImageEncoder(cfg)
    ref_enc = MapEncoder(cfg, in_channels=4)
    img = _rand_image(32, 32, seed=5)
    img_pyr = img_enc(img)
    zeros = torch.zeros(1, 32, 32)
    ones = torch.ones(1, 32, 32)
    pyr0 = encode_mask_pair(ref_enc, img, zeros)
    pyr1 = encode_mask_pair(ref_enc, img, ones)
    assert pyr0.spatial_shapes() == img_pyr.spatial_shapes()
    assert not torch.allclose(pyr0.levels[0], pyr1.levels[0])
    again = encode_mask_pair(ref_enc, img, zeros)
    for la, lb in zip(pyr0.levels, again.levels):
        assert torch.equal(la, lb)


def test_mask_encoder_rejects_misaligned_shapes():
    cfg = EncoderConfig(base_channels=4)
    ref_enc = MapEncoder(cfg, in_channels=4)
    with pytest.raises(ShapeError):
        encode_mask_pair(ref_enc, _rand_image(32, 32), torch.zeros(1, 16, 16))


def test_click_encoder_zero_input_is_constant_bias_pyramid():
    cfg = EncoderConfig(base_channels=8)
    enc = MapEncoder(cfg, in_channels=3)
    z1 = enc(torch.zeros(1, 3, 32, 32))
    z2 = enc(torch.zeros(1, 3, 32, 32))
    for la, lb in zip(z1.levels, z2.levels):
        assert torch.equal(la, lb)
        # spatially constant: every position equals the first
        flat = la.flatten(2)
        assert torch.allclose(flat, flat[..., :1].expand_as(flat), atol=1e-6)


def test_click_encoder_channel_count_enforced():
    enc = MapEncoder(EncoderConfig(base_channels=4), in_channels=3)
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 2, 32, 32))


def test_click_encoder_single_pixel_sensitivity():
    enc = MapEncoder(EncoderConfig(base_channels=8), in_channels=3)
    base = torch.zeros(1, 3, 32, 32)
    poked = base.clone()
    poked[0, 0, 10, 10] = 1.0
    a = enc(base)
    b = enc(poked)
    assert not torch.allclose(a.levels[0], b.levels[0])


def test_three_encoders_align_level_shapes():
    cfg = EncoderConfig(base_channels=8)
    img_enc = ImageEncoder(cfg)
    ref_enc = MapEncoder(cfg, in_channels=4)
    click_enc = MapEncoder(cfg, in_channels=3)
    for h, w in ((32, 32), (48, 64)):
        shapes = img_enc(_rand_image(h, w)).spatial_shapes()
        assert ref_enc(torch.zeros(1, 4, h, w)).spatial_shapes() == shapes
        assert click_enc(torch.zeros(1, 3, h, w)).spatial_shapes() == shapes


def test_lipschitz_sanity_no_nan_bounded_change():
    enc = ImageEncoder(EncoderConfig(base_channels=8))
    x = _rand_image(32, 32, seed=9)
    eps = 1e-3
    a = enc(x)
    b = enc((x + eps).clamp(0, 1))
    for la, lb in zip(a.levels, b.levels):
        assert torch.isfinite(la).all() and torch.isfinite(lb).all()
        assert (la - lb).abs().max().item() < 10.0


def test_pad_to_stride_symmetric():
    x = torch.ones(1, 1, 50, 40)
    padded, pad = pad_to_stride(x)
    assert padded.shape[-2:] == (64, 48)
    assert pad == (4, 4, 7, 7)
    assert padded[0, 0, 0, 0] == 0.0 and padded[0, 0, 7, 4] == 1.0
