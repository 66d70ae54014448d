import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vilaco.config import HeadConfig
from vilaco.errors import ConfigError
from vilaco.heads import (CoarseHead, MaskDecoder, SGPool, export_mask_png,
                          similarity_map, top_k_count)


def test_top_k_count():
    assert top_k_count(16, 0.1) == 2   # ceil(1.6)
    assert top_k_count(16, 1.0) == 16
    assert top_k_count(16, 1e-9) == 1  # never below one patch


def test_coarse_head_topk_mean():
    head = CoarseHead(8, k_ratio=0.25)  # K = 4 of 16
    feats = torch.randn(2, 16, 8)
    score, probs = head(feats)
    assert score.shape == (2,)
    assert probs.shape == (2, 16)
    expected = probs.topk(4, dim=1).values.mean(1)
    assert torch.allclose(score, expected, atol=1e-7)


def test_coarse_head_k1_is_max():
    head = CoarseHead(8, k_ratio=1e-9)
    feats = torch.randn(2, 16, 8)
    score, probs = head(feats)
    assert torch.allclose(score, probs.max(1).values, atol=0)


def test_coarse_head_kn_is_mean():
    head = CoarseHead(8, k_ratio=1.0)
    feats = torch.randn(2, 16, 8)
    score, probs = head(feats)
    assert torch.allclose(score, probs.mean(1), atol=1e-7)


def test_similarity_map_contrast():
    feats = torch.zeros(1, 4, 8)
    text = torch.zeros(2, 8)
    text[1, 0] = 1.0  # fake direction = +e0
    feats[0, 0, 0] = 3.0
    feats[0, 3, 0] = -3.0
    smap = similarity_map(feats, text, grid=2)
    assert smap.shape == (1, 2, 2)
    expected = 3.0 / math.sqrt(8)
    assert abs(float(smap[0, 0, 0]) - expected) < 1e-6
    assert abs(float(smap[0, 1, 1]) + expected) < 1e-6
    assert abs(float(smap[0, 0, 1])) < 1e-7


def test_decoder_upsamples_to_pixels():
    dec = MaskDecoder(patch_size=8, channels=4)
    smap = torch.randn(2, 4, 4)
    with torch.no_grad():
        mask = dec(smap)
    assert mask.shape == (2, 32, 32)
    assert float(mask.min()) >= 0.0 and float(mask.max()) <= 1.0


def test_decoder_requires_power_of_two_patch():
    with pytest.raises(ConfigError):
        MaskDecoder(patch_size=12, channels=4)


def test_decoder_zeroed_is_half():
    dec = MaskDecoder(patch_size=8, channels=4)
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
    mask = dec(torch.randn(1, 4, 4))
    assert torch.allclose(mask, torch.full_like(mask, 0.5))


def test_decoder_monotone_for_nonnegative_weights():
    # with nonnegative conv weights and inputs, GELU stays in its increasing
    # region, so raising one logit cannot lower any mask pixel
    dec = MaskDecoder(patch_size=4, channels=4)
    with torch.no_grad():
        for p in dec.parameters():
            p.abs_()
    base = torch.rand(1, 4, 4)
    bumped = base.clone()
    bumped[0, 2, 2] += 0.5
    with torch.no_grad():
        diff = dec(bumped) - dec(base)
    assert float(diff.min()) >= -1e-7
    assert float(diff.max()) > 0


def test_sg_pool_temperature_floor():
    pool = SGPool(theta_init=0.5, temp_init=0.1)
    assert abs(float(pool.temperature.detach()) - 0.1) < 1e-6
    with torch.no_grad():
        pool.raw_temp.fill_(-100.0)
    assert float(pool.temperature.detach()) >= 1e-3


def test_sg_pool_constant_mask():
    pool = SGPool()
    for value in (0.2, 0.5, 0.9):
        mask = torch.full((2, 16, 16), value)
        out = pool(mask)
        assert torch.allclose(out, torch.full((2,), value), atol=1e-6)


def test_sg_pool_favors_high_region_when_sharp():
    pool = SGPool(theta_init=0.5, temp_init=0.01)
    mask = torch.full((1, 16, 16), 0.1)
    mask[0, :4, :4] = 0.9
    out = pool(mask)
    assert float(out.detach()) > 0.85


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(0, 10_000))
def test_sg_pool_output_within_mask_range(value, seed):
    g = torch.Generator().manual_seed(seed)
    mask = torch.rand(1, 8, 8, generator=g) * 0.5 + value * 0.5
    out = SGPool()(mask).detach()
    assert float(mask.min()) - 1e-6 <= float(out) <= float(mask.max()) + 1e-6


def test_export_mask_png(tmp_path):
    from PIL import Image
    import numpy as np

    mask = torch.zeros(16, 16)
    mask[4:8, 4:8] = 1.0
    mask[0, 0] = 0.4
    img_path = tmp_path / "photo.png"
    img_path.write_bytes(b"")  # only the stem matters
    out = export_mask_png(mask, img_path, tmp_path)
    assert out.name == "photo_mask.png"
    arr = np.asarray(Image.open(out))
    assert arr.dtype == np.uint8
    assert arr.shape == (16, 16)
    assert arr[5, 5] == 255 and arr[12, 12] == 0
    assert arr[0, 0] == round(0.4 * 255)
