"""Vision-transformer encoder with a class-token attention map output.

Pre-norm transformer blocks over patch tokens plus a learnable class
token; the projection head is a 3-layer MLP with optional BatchNorm. The
exported attention map is the last layer's class-token query softmaxed
over patch keys only (class-token key excluded), averaged over heads.

No dropout or stochastic depth anywhere: forwards are deterministic and
gradient checks stay exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    head_output_dim: int = 256  # K, projection-head output classes
    mlp_hidden: int = 128  # hidden width of both the block MLPs and the head
    use_bn_in_head: bool = True

    def validate(self) -> None:
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.head_output_dim < 2:
            raise ValueError("head_output_dim must be >= 2")


@dataclass
class TokenSequence:
    """Embedded tokens [B, n+1, d] (class token at index 0) plus their grid.

    `pos_patch` is the positional table slice already folded into the patch
    tokens; masking re-adds it to substituted embeddings.
    """

    tokens: Tensor
    grid: tuple[int, int]
    pos_patch: Tensor

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class EncoderOutput:
    cls_logits: Tensor | None
    patch_tokens: Tensor
    attention: np.ndarray
    attention_all: list[np.ndarray] | None = None


class EncodeError(RuntimeError):
    pass


# -- parameter construction ------------------------------------------------------


def init_encoder_params(cfg: EncoderConfig, global_grid: tuple[int, int],
                        rng: np.random.Generator, dtype=np.float32):
    """Fresh parameter dict + BN running buffers for one encoder."""
    cfg.validate()
    d, hidden, K = cfg.embed_dim, cfg.mlp_hidden, cfg.head_output_dim
    n = global_grid[0] * global_grid[1]
    patch_dim = 3 * cfg.patch_size * cfg.patch_size

    def w(*shape):
        return ad.parameter((rng.normal(0.0, 0.02, size=shape)).astype(dtype))

    def zeros(*shape):
        return ad.parameter(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return ad.parameter(np.ones(shape, dtype=dtype))

    params: dict[str, Tensor] = {
        "patch/w": w(patch_dim, d),
        "patch/b": zeros(d),
        "cls": w(1, d),
        "pos": w(n + 1, d),
    }
    for i in range(cfg.depth):
        p = f"blk{i}"
        params[f"{p}/ln1/g"] = ones(d)
        params[f"{p}/ln1/b"] = zeros(d)
        for name in ("q", "k", "v"):
            params[f"{p}/{name}/w"] = w(d, d)
            params[f"{p}/{name}/b"] = zeros(d)
        params[f"{p}/proj/w"] = w(d, d)
        params[f"{p}/proj/b"] = zeros(d)
        params[f"{p}/ln2/g"] = ones(d)
        params[f"{p}/ln2/b"] = zeros(d)
        params[f"{p}/mlp/w1"] = w(d, hidden)
        params[f"{p}/mlp/b1"] = zeros(hidden)
        params[f"{p}/mlp/w2"] = w(hidden, d)
        params[f"{p}/mlp/b2"] = zeros(d)
    params["ln_f/g"] = ones(d)
    params["ln_f/b"] = zeros(d)

    params["head/fc1/w"] = w(d, hidden)
    params["head/fc1/b"] = zeros(hidden)
    params["head/fc2/w"] = w(hidden, hidden)
    params["head/fc2/b"] = zeros(hidden)
    params["head/fc3/w"] = w(hidden, K)
    params["head/fc3/b"] = zeros(K)

    buffers: dict[str, np.ndarray] = {}
    if cfg.use_bn_in_head:
        for j in (1, 2):
            params[f"head/bn{j}/g"] = ones(hidden)
            params[f"head/bn{j}/b"] = zeros(hidden)
            buffers[f"head/bn{j}/mean"] = np.zeros(hidden, dtype=dtype)
            buffers[f"head/bn{j}/var"] = np.ones(hidden, dtype=dtype)
    return params, buffers


# -- positional table interpolation ------------------------------------------------

_interp_cache: dict = {}


def _cubic_weight(t: np.ndarray, a: float = -0.75) -> np.ndarray:
    at = np.abs(t)
    w1 = (a + 2.0) * at**3 - (a + 3.0) * at**2 + 1.0
    w2 = a * at**3 - 5.0 * a * at**2 + 8.0 * a * at - 4.0 * a
    return np.where(at <= 1.0, w1, np.where(at < 2.0, w2, 0.0))


def _cubic_interp_1d(src: int, dst: int) -> np.ndarray:
    """Row-interpolation matrix [dst, src] with border replication."""
    M = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        base = math.floor(x)
        t = x - base
        for k in range(-1, 3):
            j = min(max(base + k, 0), src - 1)
            M[i, j] += _cubic_weight(np.array(k - t))
    return M


def interp_matrix(src_side: int, dst_side: int, dtype=np.float32) -> np.ndarray:
    """Bicubic grid-resampling matrix [dst^2, src^2] (separable, cached)."""
    key = (src_side, dst_side, np.dtype(dtype).name)
    if key not in _interp_cache:
        m1 = _cubic_interp_1d(src_side, dst_side)
        full = np.einsum("ai,bj->abij", m1, m1).reshape(dst_side**2, src_side**2)
        _interp_cache[key] = full.astype(dtype)
    return _interp_cache[key]


def positional_tables(params, cfg: EncoderConfig, global_grid, grid):
    """(pos_cls [1,d], pos_patch [n,d]) for the requested grid."""
    pos = params["pos"]
    pos_cls = pos[0:1]
    if tuple(grid) == tuple(global_grid):
        return pos_cls, pos[1:]
    if grid[0] != grid[1] or global_grid[0] != global_grid[1]:
        raise ValueError("position interpolation requires square grids")
    M = interp_matrix(global_grid[0], grid[0], dtype=pos.data.dtype)
    return pos_cls, Tensor(M) @ pos[1:]


# -- forward ops -----------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """[B,3,H,W] -> ([B, n, 3*ps*ps], grid); raises on indivisible dims."""
    B, C, H, W = images.shape
    ps = patch_size
    if H % ps or W % ps:
        raise ValueError(f"image dims {H}x{W} not divisible by patch size {ps}")
    r, c = H // ps, W // ps
    x = images.reshape(B, C, r, ps, c, ps).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(B, r * c, C * ps * ps), (r, c)


def patch_embed(images, params, cfg: EncoderConfig,
                global_grid: tuple[int, int]) -> TokenSequence:
    """Project non-overlapping patches to tokens, prepend the class token,
    and add positional encodings. Masking happens after this, never inside."""
    arr = images.pixels if hasattr(images, "pixels") else np.asarray(images)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    patches, grid = patchify(arr, cfg.patch_size)
    B = patches.shape[0]
    pos_cls, pos_patch = positional_tables(params, cfg, global_grid, grid)
    toks = Tensor(patches.astype(params["patch/w"].data.dtype)) @ params["patch/w"]
    toks = toks + params["patch/b"] + pos_patch
    cls_row = ad.broadcast_rows(ad.reshape(params["cls"] + pos_cls, (1, 1, -1)), B)
    tokens = ad.concat([cls_row, toks], axis=1)
    if squeeze:
        tokens = tokens[0]
    return TokenSequence(tokens, grid, pos_patch)


def _attention_map_from_scores(scores: np.ndarray) -> np.ndarray:
    """Head-averaged softmax of the class-token query over patch keys only."""
    logits = scores[:, :, 0, 1:]
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs.mean(axis=1)


def encode(tokens: TokenSequence, params, cfg: EncoderConfig, buffers=None,
           update_bn_stats: bool = False, want_logits: bool = True,
           want_all_attention: bool = False,
           bn_batch_stats: bool = True) -> EncoderOutput:
    """Run the transformer blocks and projection head.

    BN running buffers (projection head) mutate only when update_bn_stats.
    """
    x = tokens.tokens
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    H = cfg.heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)

    attn_maps: list[np.ndarray] = []
    last_scores = None
    for i in range(cfg.depth):
        p = f"blk{i}"
        h = ad.layer_norm(x, params[f"{p}/ln1/g"], params[f"{p}/ln1/b"])

        def heads_of(t):
            return ad.swapaxes(ad.reshape(t, (B, T, H, dh)), 1, 2)

        q = heads_of(h @ params[f"{p}/q/w"] + params[f"{p}/q/b"])
        k = heads_of(h @ params[f"{p}/k/w"] + params[f"{p}/k/b"])
        v = heads_of(h @ params[f"{p}/v/w"] + params[f"{p}/v/b"])
        scores = (q @ ad.swapaxes(k, -1, -2)) * scale
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.swapaxes(attn @ v, 1, 2), (B, T, d))
        x = x + (ctx @ params[f"{p}/proj/w"] + params[f"{p}/proj/b"])

        h2 = ad.layer_norm(x, params[f"{p}/ln2/g"], params[f"{p}/ln2/b"])
        m = ad.gelu(h2 @ params[f"{p}/mlp/w1"] + params[f"{p}/mlp/b1"])
        x = x + (m @ params[f"{p}/mlp/w2"] + params[f"{p}/mlp/b2"])

        if not np.all(np.isfinite(x.data)):
            raise EncodeError(f"non-finite activations after block {i}")
        last_scores = scores.data
        if want_all_attention:
            attn_maps.append(_attention_map_from_scores(scores.data))

    x = ad.layer_norm(x, params["ln_f/g"], params["ln_f/b"])
    attention = _attention_map_from_scores(last_scores)
    cls_out = x[:, 0, :]
    patch_tokens = x[:, 1:, :]

    logits = None
    if want_logits:
        logits = head_project(cls_out, params, cfg, buffers,
                              update_bn_stats=update_bn_stats,
                              bn_batch_stats=bn_batch_stats)
    if squeeze:
        patch_tokens = patch_tokens[0]
        attention = attention[0]
        if logits is not None:
            logits = logits[0]
        if want_all_attention:
            attn_maps = [a[0] for a in attn_maps]
    return EncoderOutput(logits, patch_tokens, attention,
                         attn_maps if want_all_attention else None)


def head_project(cls_token: Tensor, params, cfg: EncoderConfig, buffers=None,
                 update_bn_stats: bool = False,
                 bn_batch_stats: bool = True) -> Tensor:
    """3-layer MLP head: Linear(+BN)+GELU twice, then a linear map to K."""
    squeeze = cls_token.ndim == 1
    x = ad.reshape(cls_token, (1, -1)) if squeeze else cls_token
    for j, fc in ((1, "fc1"), (2, "fc2")):
        x = x @ params[f"head/{fc}/w"] + params[f"head/{fc}/b"]
        if cfg.use_bn_in_head:
            running = {"mean": buffers[f"head/bn{j}/mean"],
                       "var": buffers[f"head/bn{j}/var"]}
            x = ad.batch_norm(x, params[f"head/bn{j}/g"], params[f"head/bn{j}/b"],
                              running, update_stats=update_bn_stats,
                              use_batch_stats=bn_batch_stats)
            if update_bn_stats:
                buffers[f"head/bn{j}/mean"] = running["mean"]
                buffers[f"head/bn{j}/var"] = running["var"]
        x = ad.gelu(x)
    x = x @ params["head/fc3/w"] + params["head/fc3/b"]
    return x[0] if squeeze else x


def encoder_cls_features(images, params, cfg: EncoderConfig,
                         global_grid: tuple[int, int],
                         concat_blocks: int = 0) -> np.ndarray:
    """Pre-head class-token features [B, d] (or concat of the last few blocks).

    Pure inference: no masking, no BN involvement (the head is not applied).
    """
    arr = images if isinstance(images, np.ndarray) else np.stack(
        [s.pixels for s in images])
    with ad.no_grad():
        seq = patch_embed(arr, params, cfg, global_grid)
        outs = _forward_blocks_collect(seq, params, cfg, collect=max(1, concat_blocks))
        return outs[-1] if concat_blocks <= 1 else np.concatenate(outs, axis=-1)


def _forward_blocks_collect(tokens: TokenSequence, params, cfg: EncoderConfig,
                            collect: int) -> list[np.ndarray]:
    """Final-norm class tokens of the last `collect` blocks (inference only)."""
    x = tokens.tokens
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    H, dh = cfg.heads, d // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    collected: list[np.ndarray] = []
    with ad.no_grad():
        for i in range(cfg.depth):
            p = f"blk{i}"
            h = ad.layer_norm(x, params[f"{p}/ln1/g"], params[f"{p}/ln1/b"])
            q = ad.swapaxes(ad.reshape(h @ params[f"{p}/q/w"] + params[f"{p}/q/b"], (B, T, H, dh)), 1, 2)
            k = ad.swapaxes(ad.reshape(h @ params[f"{p}/k/w"] + params[f"{p}/k/b"], (B, T, H, dh)), 1, 2)
            v = ad.swapaxes(ad.reshape(h @ params[f"{p}/v/w"] + params[f"{p}/v/b"], (B, T, H, dh)), 1, 2)
            attn = ad.softmax((q @ ad.swapaxes(k, -1, -2)) * scale, axis=-1)
            x = x + (ad.reshape(ad.swapaxes(attn @ v, 1, 2), (B, T, d)) @ params[f"{p}/proj/w"] + params[f"{p}/proj/b"])
            h2 = ad.layer_norm(x, params[f"{p}/ln2/g"], params[f"{p}/ln2/b"])
            m = ad.gelu(h2 @ params[f"{p}/mlp/w1"] + params[f"{p}/mlp/b1"])
            x = x + (m @ params[f"{p}/mlp/w2"] + params[f"{p}/mlp/b2"])
            if i >= cfg.depth - collect:
                normed = ad.layer_norm(x, params["ln_f/g"], params["ln_f/b"])
                collected.append(normed.data[:, 0, :].copy())
    return collected
