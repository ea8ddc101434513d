"""Masking: threshold rule, guided masks, substitution. Oracles are
hand-enumeration and exact Bernoulli statistics over the candidate set."""

import numpy as np
import pytest
from scipy import stats

from maskdistill.autodiff import Tensor
from maskdistill.data import derive_rng
from maskdistill.masking import (
    MaskConfig,
    MaskEmbedding,
    apply_mask,
    attention_guided_mask,
    attention_threshold,
    batched_attention_guided_mask,
    generate_mask,
    random_mask,
)


def candidate_oracle(attn, num):
    """Brute-force re-derivation of the candidate set from its definition."""
    n = len(attn)
    tau = sorted(attn)[min(n // num, n - 1)]
    return {i for i in range(n) if attn[i] < tau}, tau


def random_attention(n, rng):
    a = rng.random(n)
    return a / a.sum()


def test_random_mask_endpoints():
    rng = derive_rng(0)
    assert random_mask(16, 0.0, rng).sum() == 0
    assert random_mask(16, 1.0, rng).sum() == 16


def test_random_mask_fraction_monte_carlo():
    # [DERIVED] Bernoulli(0.15) over 1e5 tokens: fraction 0.15 +/- 0.005
    frac = random_mask(10**5, 0.15, derive_rng(1)).mean()
    assert abs(frac - 0.15) < 0.005


def test_threshold_hand_enumeration():
    # [DERIVED] sorted [0.1,0.2,0.3,0.4], floor(4/2)=2 -> tau=0.3
    assert attention_threshold(np.array([0.4, 0.3, 0.2, 0.1]), 2) == pytest.approx(0.3)


def test_threshold_uniform_gives_no_candidates():
    attn = np.full(8, 1.0 / 8.0)
    tau = attention_threshold(attn, 2)
    assert tau == pytest.approx(1.0 / 8.0)
    assert not np.any(attn < tau)


def test_threshold_num_one_is_max():
    rng = derive_rng(2)
    attn = random_attention(32, rng)
    tau = attention_threshold(attn, 1)
    assert tau == pytest.approx(attn.max())
    cands, _ = candidate_oracle(list(attn), 1)
    assert cands == {i for i in range(32) if attn[i] < attn.max()}


def test_threshold_rejects_short_input():
    with pytest.raises(ValueError):
        attention_threshold(np.array([0.5, 0.5]), 3)


def test_guided_mask_hand_case():
    # [DERIVED] p=1 masks exactly the candidates {0.2, 0.1}
    attn = np.array([0.4, 0.3, 0.2, 0.1])
    m = attention_guided_mask(attn, MaskConfig(p=1.0, num=2), derive_rng(0))
    np.testing.assert_array_equal(m, [0, 0, 1, 1])


def test_guided_mask_p_zero():
    attn = random_attention(64, derive_rng(3))
    m = attention_guided_mask(attn, MaskConfig(p=0.0, num=2), derive_rng(4))
    assert m.sum() == 0


def test_guided_mask_fraction_monte_carlo():
    # [DERIVED] E[fraction] = p * floor(n/num) / n = 0.10 * 1250 / 10000
    attn = random_attention(10**4, derive_rng(5))
    m = attention_guided_mask(attn, MaskConfig(p=0.10, num=8), derive_rng(6))
    assert abs(m.mean() - 0.0125) < 0.003


def test_guided_mask_never_hits_high_attention():
    cfg_grid = [(num, p) for num in (1, 2, 4, 8) for p in (0.05, 0.1, 0.15, 1.0)]
    rng = derive_rng(7)
    for trial in range(200):
        n = int(rng.integers(8, 257))
        attn = random_attention(n, rng)
        for num, p in cfg_grid:
            tau = attention_threshold(attn, num)
            m = attention_guided_mask(attn, MaskConfig(p=p, num=num), rng)
            assert not np.any(m[attn >= tau]), (trial, num, p)
            assert m[np.argmax(attn)] == 0


def test_guided_mask_expected_count_3sigma():
    rng = derive_rng(8)
    attn = random_attention(128, rng)
    cfg = MaskConfig(p=0.3, num=4)
    cands, _ = candidate_oracle(list(attn), 4)
    trials = 4000
    counts = [attention_guided_mask(attn, cfg, rng).sum() for _ in range(trials)]
    expected = cfg.p * len(cands)
    sigma = np.sqrt(len(cands) * cfg.p * (1 - cfg.p) / trials)
    assert abs(np.mean(counts) - expected) < 3 * sigma


def test_guided_mask_distribution_chi_square():
    # exact-enumeration oracle: restricted to candidates the mask is a
    # product of independent Bernoulli(p) bits
    rng = derive_rng(9)
    attn = random_attention(8, rng)
    cfg = MaskConfig(p=0.3, num=2)
    cands, _ = candidate_oracle(list(attn), 2)
    cand_idx = sorted(cands)
    k = len(cand_idx)
    assert 2 <= k <= 4
    trials = 20000
    observed = np.zeros(2 ** k)
    for _ in range(trials):
        m = attention_guided_mask(attn, cfg, rng)
        assert not np.any(np.delete(m, cand_idx))
        code = int("".join(str(b) for b in m[cand_idx]), 2)
        observed[code] += 1
    expected = np.empty(2 ** k)
    for code in range(2 ** k):
        ones = bin(code).count("1")
        expected[code] = trials * cfg.p ** ones * (1 - cfg.p) ** (k - ones)
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    assert chi2 < stats.chi2.ppf(0.99, 2 ** k - 1)


def test_batched_matches_single():
    rng = derive_rng(10)
    attn = np.stack([random_attention(32, rng) for _ in range(6)])
    cfg = MaskConfig(p=0.4, num=4)
    m = batched_attention_guided_mask(attn, cfg, derive_rng(11))
    assert m.shape == (6, 32)
    for b in range(6):
        tau = attention_threshold(attn[b], 4)
        assert not np.any(m[b][attn[b] >= tau])


def test_generate_mask_dispatch():
    attn = random_attention(16, derive_rng(12))
    assert generate_mask(attn, MaskConfig(strategy="none"), derive_rng(0)).sum() == 0
    r = generate_mask(attn, MaskConfig(strategy="random", p=1.0), derive_rng(0))
    assert r.sum() == 16
    cfg = MaskConfig(strategy="attention_guided", p=1.0, num=4)
    g = generate_mask(attn, cfg, derive_rng(0))
    tau = attention_threshold(attn, 4)
    np.testing.assert_array_equal(g, (attn < tau).astype(np.uint8))


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(strategy="blockwise").validate()
    with pytest.raises(ValueError):
        MaskConfig(p=1.2).validate()
    with pytest.raises(ValueError):
        MaskConfig(num=0).validate()


def test_apply_mask_identity_and_full():
    rng = np.random.default_rng(0)
    tokens = Tensor(rng.standard_normal((5, 8)).astype(np.float32))
    emb = MaskEmbedding(8)
    emb.vector.data[:] = rng.standard_normal(8).astype(np.float32)

    out = apply_mask(tokens, np.zeros(5, dtype=np.uint8), emb)
    np.testing.assert_array_equal(out.data, tokens.data)

    out = apply_mask(tokens, np.ones(5, dtype=np.uint8), emb)
    np.testing.assert_array_equal(out.data, np.tile(emb.vector.data, (5, 1)))


def test_apply_mask_single_token_and_idempotence():
    rng = np.random.default_rng(1)
    tokens = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
    emb = MaskEmbedding(6)
    emb.vector.data[:] = 0.5
    mask = np.array([1, 0, 0, 0], dtype=np.uint8)
    once = apply_mask(tokens, mask, emb)
    np.testing.assert_array_equal(once.data[1:], tokens.data[1:])
    np.testing.assert_array_equal(once.data[0], np.full(6, 0.5, dtype=np.float32))
    twice = apply_mask(once, mask, emb)
    np.testing.assert_array_equal(twice.data, once.data)


def test_apply_mask_keeps_positional_encoding():
    rng = np.random.default_rng(2)
    pos = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    tokens = Tensor(rng.standard_normal((3, 4)).astype(np.float32)) + pos
    emb = MaskEmbedding(4)
    emb.vector.data[:] = 1.0
    out = apply_mask(tokens, np.array([0, 1, 0], dtype=np.uint8), emb, pos=pos)
    np.testing.assert_allclose(out.data[1], 1.0 + pos.data[1], rtol=1e-6)


def test_apply_mask_length_mismatch():
    tokens = Tensor(np.zeros((4, 6), dtype=np.float32))
    with pytest.raises(ValueError, match="mask length"):
        apply_mask(tokens, np.zeros(5, dtype=np.uint8), MaskEmbedding(6))


def test_mask_embedding_gets_gradient():
    tokens = Tensor(np.ones((4, 3), dtype=np.float64))
    emb = MaskEmbedding(3, dtype=np.float64)
    out = apply_mask(tokens, np.array([1, 1, 0, 0], dtype=np.uint8), emb)
    out.sum().backward()
    np.testing.assert_allclose(emb.vector.grad, [2.0, 2.0, 2.0])
