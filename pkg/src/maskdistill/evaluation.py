"""Frozen-feature evaluation: weighted k-NN, linear probe, attention export.

Features are pre-head class tokens, L2-normalized so cosine similarity is
a dot product. The probe is a single linear layer trained by plain SGD
with zero weight decay on the frozen features.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetHandle, derive_rng, normalize_pixels, resize_bilinear
from .encoder import encoder_cls_features

_TAG_PROBE = 201


@dataclass
class FeatureMatrix:
    """L2-normalized class-token embeddings with labels."""

    features: np.ndarray  # [S, D], unit rows
    labels: np.ndarray  # [S] int
    source: str = ""

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _prepared_batch(samples, size: int, mean, std) -> np.ndarray:
    out = []
    for s in samples:
        pix = s.pixels
        if pix.shape[1] != size or pix.shape[2] != size:
            pix = resize_bilinear(pix, size, size)
        out.append(normalize_pixels(pix, mean, std))
    return np.stack(out)


def extract_features(dataset: DatasetHandle, state, cfg, branch: str = "teacher",
                     concat_blocks: bool = False,
                     chunk: int = 256) -> FeatureMatrix:
    """Deterministic features for a labeled dataset: resize + normalize only,
    no augmentation, no masking."""
    if not dataset.labeled:
        raise ValueError(
            "feature extraction needs a labeled dataset (flat layouts have no labels)")
    if branch not in ("teacher", "student"):
        raise ValueError(f"unknown branch: {branch!r}")
    params = state.teacher if branch == "teacher" else state.student
    size = cfg.augment.global_size
    blocks = 4 if concat_blocks else 0
    feats = []
    for lo in range(0, len(dataset), chunk):
        batch = dataset.samples[lo:lo + chunk]
        arr = _prepared_batch(batch, size, state.norm_mean, state.norm_std)
        f = encoder_cls_features(arr, params, cfg.encoder, cfg.global_grid,
                                 concat_blocks=blocks)
        feats.append(f.astype(np.float64))
    features = np.concatenate(feats, axis=0)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    features = features / np.maximum(norms, 1e-12)
    return FeatureMatrix(features, dataset.labels, source=dataset.source)


# -- weighted k-NN ---------------------------------------------------------------


def knn_classify(train: FeatureMatrix, query: np.ndarray, k: int = 10,
                 temp: float = 0.07) -> int:
    """Temperature-weighted cosine vote; ties resolve to the lowest class id."""
    if len(train) == 0:
        raise ValueError("empty training feature matrix")
    if k > len(train):
        raise ValueError(f"k={k} exceeds training set size {len(train)}")
    sims = train.features @ np.asarray(query, dtype=train.features.dtype)
    top = np.argsort(-sims, kind="stable")[:k]
    weights = np.exp(sims[top] / temp)
    scores = np.bincount(train.labels[top], weights=weights,
                         minlength=train.num_classes)
    return int(np.argmax(scores))


def knn_evaluate(train: FeatureMatrix, test: FeatureMatrix, k: int = 10,
                 temp: float = 0.07) -> float:
    """Top-1 accuracy of the weighted k-NN vote over the test rows."""
    if len(train) == 0 or len(test) == 0:
        raise ValueError("empty feature matrix")
    if k > len(train):
        raise ValueError(f"k={k} exceeds training set size {len(train)}")
    sims = test.features @ train.features.T  # [St, S]
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    rows = np.arange(len(test))[:, None]
    weights = np.exp(sims[rows, top] / temp)
    votes = train.labels[top]
    n_cls = max(train.num_classes, test.num_classes)
    scores = np.zeros((len(test), n_cls))
    np.add.at(scores, (rows, votes), weights)
    pred = scores.argmax(axis=1)
    return float((pred == test.labels).mean())


# -- linear probe ------------------------------------------------------------------


def linear_probe(train: FeatureMatrix, test: FeatureMatrix, lr: float = 0.01,
                 epochs: int = 100, batch_size: int = 0, seed: int = 0) -> float:
    """Single linear layer + softmax CE, plain SGD, weight decay 0."""
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes in the train set")
    X, y = train.features, train.labels
    S, D = X.shape
    C = int(max(train.labels.max(), test.labels.max())) + 1
    W = np.zeros((D, C))
    b = np.zeros(C)
    bs = batch_size if batch_size > 0 else S
    onehot = np.eye(C)[y]
    for epoch in range(epochs):
        order = derive_rng(seed, _TAG_PROBE, epoch).permutation(S)
        for lo in range(0, S, bs):
            idx = order[lo:lo + bs]
            xb, yb = X[idx], onehot[idx]
            logits = xb @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - yb) / len(idx)
            W -= lr * (xb.T @ g)
            b -= lr * g.sum(axis=0)
    pred = (test.features @ W + b).argmax(axis=1)
    return float((pred == test.labels).mean())


# -- attention export ---------------------------------------------------------------


def export_attention(image, state, cfg, out_path, branch: str = "teacher"):
    """Write the class-token attention map as a grayscale heatmap PNG plus
    the raw values as CSV (grid rows, full float precision).

    Returns (png_path, csv_path)."""
    from .encoder import encode, patch_embed  # local: avoids a heavy import chain
    from . import autodiff as ad

    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    if branch not in ("teacher", "student"):
        raise ValueError(f"unknown branch: {branch!r}")
    params = state.teacher if branch == "teacher" else state.student
    ps = cfg.encoder.patch_size
    arr = normalize_pixels(pixels, state.norm_mean, state.norm_std)
    with ad.no_grad():
        seq = patch_embed(arr, params, cfg.encoder, cfg.global_grid)
        out = encode(seq, params, cfg.encoder, want_logits=False)
    attn = out.attention
    r, c = seq.grid

    png_path = Path(out_path)
    csv_path = png_path.with_suffix(".csv")
    grid = attn.reshape(r, c)
    with open(csv_path, "w") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")

    lo, hi = float(grid.min()), float(grid.max())
    heat = np.zeros_like(grid) if hi <= lo else (grid - lo) / (hi - lo)
    up = heat.repeat(ps, axis=0).repeat(ps, axis=1)  # nearest to image size
    img8 = np.clip(up * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(img8, mode="L").save(png_path)
    return png_path, csv_path
