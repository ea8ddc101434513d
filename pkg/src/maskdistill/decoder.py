"""Convolutional decoder rebuilding full-resolution images from patch tokens.

Each stage is Conv3x3 -> BN -> ReLU -> 2x nearest-neighbor upsample;
a final 1x1 convolution maps to 3 channels. Upsampling is restricted to
2x per stage, so stages = log2(patch_size) recovers the input resolution
from an H/patch x W/patch token grid. No output activation: the L1 loss
compares raw outputs against [0,1] targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def default_channels(in_dim: int, stages: int) -> tuple[int, ...]:
    """Halving channel schedule from the token dim, floored at 4."""
    chans = []
    c = in_dim
    for _ in range(stages):
        c = max(c // 2, 4)
        chans.append(c)
    return tuple(chans)


@dataclass
class DecoderConfig:
    stages: int = 2
    in_dim: int = 64
    channels: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.channels:
            self.channels = default_channels(self.in_dim, self.stages)

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError("decoder needs at least one upsampling stage")
        if len(self.channels) != self.stages:
            raise ValueError(
                f"channel list length {len(self.channels)} != stages {self.stages}")


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator,
                        dtype=np.float32):
    """Parameter dict + BN running buffers for the decoder stack."""
    cfg.validate()
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    cin = cfg.in_dim
    for i, cout in enumerate(cfg.channels):
        fan = cin * 9
        params[f"stage{i}/conv/w"] = ad.parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan), size=(cout, cin, 3, 3)).astype(dtype))
        params[f"stage{i}/conv/b"] = ad.parameter(np.zeros(cout, dtype=dtype))
        params[f"stage{i}/bn/g"] = ad.parameter(np.ones(cout, dtype=dtype))
        params[f"stage{i}/bn/b"] = ad.parameter(np.zeros(cout, dtype=dtype))
        buffers[f"stage{i}/bn/mean"] = np.zeros(cout, dtype=dtype)
        buffers[f"stage{i}/bn/var"] = np.ones(cout, dtype=dtype)
        cin = cout
    params["out/w"] = ad.parameter(
        rng.normal(0.0, np.sqrt(2.0 / cin), size=(3, cin, 1, 1)).astype(dtype))
    params["out/b"] = ad.parameter(np.zeros(3, dtype=dtype))
    return params, buffers


def reconstruct(patch_tokens: Tensor, grid: tuple[int, int], params,
                cfg: DecoderConfig, buffers=None, update_bn_stats: bool = False,
                bn_batch_stats: bool = True) -> Tensor:
    """Decode [B, n, d] (or [n, d]) tokens into [B, 3, 2^s*r, 2^s*c] images.

    BN running buffers move only when update_bn_stats is set — the trainer
    sets it exactly for global-view passes.
    """
    cfg.validate()
    squeeze = patch_tokens.ndim == 2
    x = ad.reshape(patch_tokens, (1,) + patch_tokens.shape) if squeeze else patch_tokens
    B, n, d = x.shape
    r, c = grid
    if r * c != n:
        raise ValueError(f"grid {grid} does not match token count {n}")
    if d != cfg.in_dim:
        raise ValueError(f"token dim {d} != decoder in_dim {cfg.in_dim}")
    x = ad.swapaxes(x, 1, 2)  # [B, d, n]
    x = ad.reshape(x, (B, d, r, c))
    for i in range(cfg.stages):
        x = ad.conv2d(x, params[f"stage{i}/conv/w"], params[f"stage{i}/conv/b"],
                      padding=1)
        running = {"mean": buffers[f"stage{i}/bn/mean"],
                   "var": buffers[f"stage{i}/bn/var"]}
        x = ad.batch_norm(x, params[f"stage{i}/bn/g"], params[f"stage{i}/bn/b"],
                          running, update_stats=update_bn_stats,
                          use_batch_stats=bn_batch_stats)
        if update_bn_stats:
            buffers[f"stage{i}/bn/mean"] = running["mean"]
            buffers[f"stage{i}/bn/var"] = running["var"]
        x = ad.relu(x)
        x = ad.upsample2x(x)
    x = ad.conv2d(x, params["out/w"], params["out/b"], padding=0)
    return x[0] if squeeze else x
