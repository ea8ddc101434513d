"""Token masking: random and attention-guided strategies plus mask substitution.

The attention-guided strategy sorts a view's class-token attention map
ascending, takes the value at index floor(n/num) as threshold tau, and
masks token i iff an independent uniform draw falls below p AND the
token's attention is strictly below tau. Ties at tau are never
candidates, so the highest-attention token can never be masked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, parameter


@dataclass
class MaskConfig:
    strategy: str = "attention_guided"  # none | random | attention_guided
    p: float = 0.15
    num: int = 8

    def validate(self) -> None:
        if self.strategy not in ("none", "random", "attention_guided"):
            raise ValueError(f"unknown mask strategy: {self.strategy!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("mask probability p must lie in [0, 1]")
        if self.num < 1:
            raise ValueError("num must be >= 1")


class MaskEmbedding:
    """Single learnable vector substituted for masked patch tokens."""

    def __init__(self, dim: int, dtype=np.float32):
        # zero init keeps the no-mask limit exact at step 0
        self.vector: Tensor = parameter(np.zeros(dim, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.vector.data.shape[0]


def random_mask(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p) bits over n tokens."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (rng.random(n) < p).astype(np.uint8)


def attention_threshold(attention: np.ndarray, num: int) -> float:
    """Sorted-attention value marking the low-attention candidate region.

    tau = ascending_sorted(attention)[floor(n/num)], clamped to the last
    index so num=1 yields the maximum entry. Candidates are exactly the
    entries strictly below tau.
    """
    attention = np.asarray(attention)
    n = attention.shape[-1]
    if n < num:
        raise ValueError(f"attention length {n} < num {num}")
    idx = min(n // num, n - 1)
    return float(np.sort(attention)[idx])


def attention_guided_mask(attention: np.ndarray, cfg: MaskConfig,
                          rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p) masking restricted to tokens with attention below tau."""
    attention = np.asarray(attention)
    tau = attention_threshold(attention, cfg.num)
    probs = rng.random(attention.shape[-1])
    return ((probs < cfg.p) & (attention < tau)).astype(np.uint8)


def batched_attention_guided_mask(attention: np.ndarray, cfg: MaskConfig,
                                  rng: np.random.Generator) -> np.ndarray:
    """Row-wise attention-guided masks for a [B, n] attention batch."""
    B, n = attention.shape
    if n < cfg.num:
        raise ValueError(f"attention length {n} < num {cfg.num}")
    idx = min(n // cfg.num, n - 1)
    tau = np.sort(attention, axis=1)[:, idx:idx + 1]
    probs = rng.random((B, n))
    return ((probs < cfg.p) & (attention < tau)).astype(np.uint8)


def generate_mask(attention: np.ndarray, cfg: MaskConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Dispatch on strategy; `none` returns all zeros."""
    n = np.asarray(attention).shape[-1]
    if cfg.strategy == "none":
        return np.zeros(n, dtype=np.uint8)
    if cfg.strategy == "random":
        return random_mask(n, cfg.p, rng)
    return attention_guided_mask(attention, cfg, rng)


def apply_mask(tokens, mask: np.ndarray, emb: MaskEmbedding, pos=None):
    """Replace masked patch tokens with the learnable embedding.

    `tokens` are patch tokens [..., n, d] (class token excluded by the
    caller). When `pos` carries the positional encodings already folded
    into `tokens`, the substituted slots become emb + pos so position
    information survives masking.

    Pure function: masked slots already equal to the substitute are
    unchanged by a second application.
    """
    mask = np.asarray(mask)
    if mask.shape[-1] != tokens.shape[-2]:
        raise ValueError(
            f"mask length {mask.shape[-1]} != patch token count {tokens.shape[-2]}")
    m = mask.astype(tokens.dtype)[..., :, None]
    substitute = emb.vector if pos is None else emb.vector + pos
    return tokens * (1.0 - m) + substitute * m
