"""Encoders: shapes, normalization, determinism, mask pooling, and the
shared-pathway invariant (full-mask region == global embedding)."""

import numpy as np
import pytest

from volalign.encoders import (AlignmentModel, TextEncoder, TextEncoderConfig,
                               VisionEncoder, VisionEncoderConfig,
                               downsample_mask)
from volalign.errors import (ConfigError, EmptyRegionError,
                             ShapeMismatchError)


def make_vision(seed=0, **kw):
    cfg = VisionEncoderConfig(**kw)
    return cfg, VisionEncoder(cfg, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ConfigError):
        VisionEncoderConfig(volume_shape=(15, 32, 32))
    with pytest.raises(ConfigError):
        VisionEncoderConfig(depth=1)
    with pytest.raises(ConfigError):
        VisionEncoderConfig(embed_dim=50, heads=4)
    with pytest.raises(ConfigError):
        TextEncoderConfig(embed_dim=50, heads=4)


def test_grid_and_token_count():
    cfg = VisionEncoderConfig()
    assert cfg.grid == (2, 4, 4)
    assert cfg.num_tokens == 32


def test_downsample_mask_threshold_inclusive():
    cfg = VisionEncoderConfig()
    mask = np.zeros(cfg.volume_shape, dtype=bool)
    # exactly half the voxels of patch (0,0,0): mean == 0.5 -> active
    mask[:4, :8, :8] = True
    grid = downsample_mask(mask, cfg)
    assert grid[0, 0, 0]
    assert grid.sum() == 1
    # one voxel short of half -> inactive
    mask[0, 0, 0] = False
    assert not downsample_mask(mask, cfg)[0, 0, 0]


def test_downsample_mask_shape_error():
    cfg = VisionEncoderConfig()
    with pytest.raises(ShapeMismatchError):
        downsample_mask(np.zeros((8, 8, 8), dtype=bool), cfg)


def test_global_embedding_unit_norm_and_deterministic():
    cfg, enc = make_vision()
    rng = np.random.default_rng(1)
    vols = rng.standard_normal((3,) + cfg.volume_shape).astype(np.float32)
    a = enc.encode_global(vols).data
    b = enc.encode_global(vols).data
    np.testing.assert_allclose(np.linalg.norm(a, axis=-1), 1.0, atol=1e-5)
    assert np.array_equal(a, b)


def test_patch_embed_shape_error():
    cfg, enc = make_vision()
    with pytest.raises(ShapeMismatchError):
        enc.patch_embed(np.zeros((1, 8, 8, 8), dtype=np.float32))


def test_full_mask_region_equals_global():
    rng = np.random.default_rng(2)
    for seed in range(5):
        cfg, enc = make_vision(seed=seed)
        vol = rng.standard_normal(cfg.volume_shape).astype(np.float32)
        g = enc.encode_global(vol[None]).data[0]
        r = enc.encode_region(vol, np.ones(cfg.volume_shape, dtype=bool)).data
        assert np.abs(g - r).max() < 1e-5


def test_empty_region_raises():
    cfg, enc = make_vision()
    vol = np.zeros(cfg.volume_shape, dtype=np.float32)
    with pytest.raises(EmptyRegionError):
        enc.encode_region(vol, np.zeros(cfg.volume_shape, dtype=bool))


def test_batched_regions_match_single_region_calls():
    cfg, enc = make_vision(seed=3)
    rng = np.random.default_rng(4)
    vols = rng.standard_normal((2,) + cfg.volume_shape).astype(np.float32)
    masks = np.zeros((2,) + cfg.volume_shape, dtype=bool)
    masks[0, :, :16, :] = True
    masks[1, :, :, 16:] = True
    latent = enc.latent(vols)
    active = np.stack([downsample_mask(m, cfg).reshape(-1) for m in masks])
    batched = enc.encode_regions(latent, np.array([0, 1]), active).data
    for i in range(2):
        single = enc.encode_region(vols[i], masks[i]).data
        np.testing.assert_allclose(batched[i], single, atol=1e-6)


def test_region_embedding_differs_between_regions():
    cfg, enc = make_vision(seed=5)
    rng = np.random.default_rng(6)
    vol = rng.standard_normal(cfg.volume_shape).astype(np.float32)
    left = np.zeros(cfg.volume_shape, dtype=bool)
    left[:, :16, :] = True
    right = ~left
    a = enc.encode_region(vol, left).data
    b = enc.encode_region(vol, right).data
    assert np.abs(a - b).max() > 1e-3


def test_text_encoder_padding_and_truncation():
    cfg = TextEncoderConfig(vocab_size=20, max_len=8)
    enc = TextEncoder(cfg, np.random.default_rng(0))
    ids, mask = enc.pad_batch([[5, 6], [7, 8, 9, 10, 11, 12, 13, 14, 15, 16]])
    assert ids.shape == (2, 9)  # CLS + truncated to max_len
    assert ids[0, 0] == 0 and ids[1, 0] == 0
    assert ids[0, 3] == 1  # padding id
    assert mask[0].sum() == 3 and mask[1].sum() == 9
    with pytest.raises(ConfigError):
        enc.pad_batch([[25]])


def test_text_embedding_ignores_other_rows_padding():
    """A sequence's embedding does not depend on batch neighbors."""
    cfg = TextEncoderConfig(vocab_size=20)
    enc = TextEncoder(cfg, np.random.default_rng(1))
    alone = enc.encode([[2, 3, 4]]).data[0]
    together = enc.encode([[2, 3, 4], list(range(2, 16))]).data[0]
    np.testing.assert_allclose(alone, together, atol=1e-5)


def test_alignment_model_param_names_and_proj_match():
    v_cfg = VisionEncoderConfig()
    t_cfg = TextEncoderConfig()
    model = AlignmentModel(v_cfg, t_cfg, np.random.default_rng(0))
    names = model.named_params()
    assert "temp.logit" in names
    assert any(k.startswith("vision.") for k in names)
    assert any(k.startswith("text.") for k in names)
    with pytest.raises(ConfigError):
        AlignmentModel(v_cfg, TextEncoderConfig(proj_dim=16),
                       np.random.default_rng(0))
