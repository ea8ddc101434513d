"""Decoder: output geometry, BN update rule, gradient flow into tokens."""

import numpy as np
import pytest

from maskdistill.autodiff import Tensor, parameter
from maskdistill.data import derive_rng
from maskdistill.decoder import DecoderConfig, default_channels, init_decoder_params, reconstruct


def make(cfg, seed=0, dtype=np.float32):
    return init_decoder_params(cfg, derive_rng(seed), dtype=dtype)


def tokens(B, n, d, seed=0, dtype=np.float32):
    return Tensor(derive_rng(seed).random((B, n, d)).astype(dtype))


def test_output_shape_desk_scale():
    cfg = DecoderConfig(stages=2, in_dim=16)
    params, buffers = make(cfg)
    out = reconstruct(tokens(2, 64, 16), (8, 8), params, cfg, buffers)
    assert out.shape == (2, 3, 32, 32)


def test_output_shape_full_scale_grid():
    # 14x14 grid with 4 doubling stages reaches 224x224
    cfg = DecoderConfig(stages=4, in_dim=8, channels=(8, 8, 4, 4))
    params, buffers = make(cfg)
    out = reconstruct(tokens(1, 196, 8), (14, 14), params, cfg, buffers)
    assert out.shape == (1, 3, 224, 224)


def test_zero_final_conv_gives_zero_image():
    cfg = DecoderConfig(stages=2, in_dim=16)
    params, buffers = make(cfg)
    params["out/w"].data[:] = 0.0
    params["out/b"].data[:] = 0.0
    out = reconstruct(tokens(1, 16, 16), (4, 4), params, cfg, buffers)
    np.testing.assert_array_equal(out.data, np.zeros((1, 3, 16, 16), dtype=np.float32))


def test_grid_mismatch_rejected():
    cfg = DecoderConfig(stages=2, in_dim=16)
    params, buffers = make(cfg)
    with pytest.raises(ValueError, match="grid"):
        reconstruct(tokens(1, 64, 16), (7, 8), params, cfg, buffers)
    with pytest.raises(ValueError, match="in_dim"):
        reconstruct(tokens(1, 64, 8), (8, 8), params, cfg, buffers)


def test_channel_schedule_default():
    assert default_channels(64, 2) == (32, 16)
    assert default_channels(8, 3) == (4, 4, 4)
    cfg = DecoderConfig(stages=3, in_dim=64)
    assert cfg.channels == (32, 16, 8)


def test_bn_buffers_follow_update_flag():
    cfg = DecoderConfig(stages=2, in_dim=16)
    params, buffers = make(cfg)
    toks = tokens(3, 16, 16, seed=1)
    before = {k: v.tobytes() for k, v in buffers.items()}
    reconstruct(toks, (4, 4), params, cfg, buffers, update_bn_stats=False)
    assert all(buffers[k].tobytes() == before[k] for k in buffers)
    reconstruct(toks, (4, 4), params, cfg, buffers, update_bn_stats=True)
    assert any(buffers[k].tobytes() != before[k] for k in buffers)


def test_gradients_flow_to_tokens_and_params():
    cfg = DecoderConfig(stages=2, in_dim=8)
    params, buffers = make(cfg, dtype=np.float64)
    toks = parameter(derive_rng(2).random((2, 16, 8)))
    out = reconstruct(toks, (4, 4), params, cfg, buffers)
    (out * derive_rng(3).random(out.shape)).sum().backward()
    assert toks.grad is not None and np.any(toks.grad != 0.0)
    for k in ("stage0/conv/w", "stage1/bn/g", "out/w"):
        assert params[k].grad is not None and np.any(params[k].grad != 0.0), k


def test_single_sequence_input():
    cfg = DecoderConfig(stages=2, in_dim=16)
    params, buffers = make(cfg)
    out = reconstruct(tokens(1, 64, 16)[0], (8, 8), params, cfg, buffers)
    assert out.shape == (3, 32, 32)
