"""Dataset ingestion, synthetic data, and multi-crop view augmentation.

Images are float32 arrays of shape [3, H, W] in [0, 1] everywhere. All
randomness flows through numpy Generators derived from integer keys, so
a (seed, epoch, sample index) triple always reproduces the same views
no matter how samples are batched or parallelized.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


def derive_rng(*keys: int) -> np.random.Generator:
    """Deterministic generator from a tuple of non-negative integer keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


# -- core types -----------------------------------------------------------------


@dataclass
class ImageSample:
    """One image: float32 pixels [3, H, W] in [0,1], optional class label."""

    pixels: np.ndarray
    label: int | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class ViewSet:
    """Multi-crop output for one source image: 2 global + N local views."""

    global_views: list[ImageSample]
    local_views: list[ImageSample]
    source_id: int
    aug_records: list[dict] = field(default_factory=list)


@dataclass
class AugmentationConfig:
    """Multi-crop augmentation parameters.

    Blur/solarize probabilities are per-global-view pairs; the defaults are
    asymmetric between the two global views. Scale ranges are fractions of
    the source area.
    """

    global_size: int = 32
    local_size: int = 16
    global_scale_range: tuple[float, float] = (0.4, 1.0)
    local_scale_range: tuple[float, float] = (0.05, 0.4)
    n_local: int = 8
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)
    grayscale_prob: float = 0.2
    blur_probs: tuple[float, float] = (1.0, 0.1)
    blur_prob_local: float = 0.5
    solarize_probs: tuple[float, float] = (0.0, 0.2)
    solarize_threshold: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name, rng_ in (("global_scale_range", self.global_scale_range),
                           ("local_scale_range", self.local_scale_range)):
            lo, hi = rng_
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"{name} must lie within (0, 1], got {rng_}")
        probs = [self.flip_prob, self.jitter_prob, self.grayscale_prob,
                 *self.blur_probs, self.blur_prob_local, *self.solarize_probs]
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValueError("transform probabilities must lie in [0, 1]")
        if self.n_local < 0:
            raise ValueError("n_local must be >= 0")
        if self.local_size >= self.global_size:
            raise ValueError("local view resolution must be below global")


class DatasetHandle:
    """In-memory dataset with deterministic ordering."""

    def __init__(self, samples: list[ImageSample], class_names: list[str] | None,
                 source: str = ""):
        self.samples = samples
        self.class_names = class_names
        self.source = source

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]

    @property
    def labeled(self) -> bool:
        return all(s.label is not None for s in self.samples)

    @property
    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise ValueError("dataset has unlabeled samples")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else 0

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std over all samples (for input normalization)."""
        stacked = np.stack([s.pixels for s in self.samples])
        mean = stacked.mean(axis=(0, 2, 3))
        std = stacked.std(axis=(0, 2, 3))
        return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


# -- loading ----------------------------------------------------------------------


def _decode_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ValueError(f"undecodable image file: {path}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_dataset(path: str | os.PathLike, layout: str = "class-folders") -> DatasetHandle:
    """Load a PNG image directory.

    class-folders layout is `root/<class>/<img>.png` with labels from sorted
    folder names; flat layout is unlabeled images directly under root.
    Sample order is by sorted relative path.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset path does not exist: {root}")
    if layout not in ("class-folders", "flat"):
        raise ValueError(f"unknown layout: {layout!r}")

    samples: list[ImageSample] = []
    class_names: list[str] | None = None
    if layout == "class-folders":
        class_names = sorted(d.name for d in root.iterdir() if d.is_dir())
        for label, cname in enumerate(class_names):
            for f in sorted((root / cname).iterdir()):
                if f.is_file():
                    samples.append(ImageSample(_decode_png(f), label))
    else:
        for f in sorted(root.iterdir()):
            if f.is_file():
                samples.append(ImageSample(_decode_png(f), None))
    if not samples:
        raise ValueError(f"zero images found under {root}")
    return DatasetHandle(samples, class_names, source=str(root))


# -- synthetic data ----------------------------------------------------------------

_COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.15),
    "magenta": (0.85, 0.2, 0.8),
    "cyan": (0.15, 0.8, 0.85),
    "white": (0.92, 0.92, 0.92),
    "orange": (0.9, 0.55, 0.1),
}
_SHAPES = ("square", "circle", "triangle", "cross")


@dataclass
class SyntheticSpec:
    """Shape/color class generator: classes are '<color>-<shape>' strings."""

    classes: tuple[str, ...] = ("red-square", "blue-circle")
    size: int = 32
    noise: float = 0.06

    def validate(self) -> None:
        if len(set(self.classes)) < 2:
            raise ValueError("synthetic spec needs at least 2 distinct classes")
        for c in self.classes:
            color, _, shape = c.partition("-")
            if color not in _COLORS or shape not in _SHAPES:
                raise ValueError(
                    f"unknown synthetic class {c!r}; use <color>-<shape> with "
                    f"colors {sorted(_COLORS)} and shapes {_SHAPES}")


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        w = r * 0.45
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | \
               ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(shape)


def _render_class(class_name: str, size: int, noise: float,
                  rng: np.random.Generator) -> np.ndarray:
    color, _, shape = class_name.partition("-")
    bg = rng.uniform(0.05, 0.25)
    img = np.full((3, size, size), bg, dtype=np.float32)
    cy = rng.uniform(0.3, 0.7) * size
    cx = rng.uniform(0.3, 0.7) * size
    r = rng.uniform(0.18, 0.32) * size
    mask = _shape_mask(shape, size, cy, cx, r)
    tint = rng.uniform(0.85, 1.0)
    for ch, val in enumerate(_COLORS[color]):
        img[ch][mask] = val * tint
    img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, count: int, seed: int) -> DatasetHandle:
    """Deterministically generate `count` labeled images cycling over classes."""
    spec.validate()
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = []
    for i in range(count):
        label = i % len(spec.classes)
        rng = derive_rng(seed, i)
        pixels = _render_class(spec.classes[label], spec.size, spec.noise, rng)
        samples.append(ImageSample(pixels, label))
    return DatasetHandle(samples, list(spec.classes), source=f"synthetic(seed={seed})")


def write_dataset_png(handle: DatasetHandle, root: str | os.PathLike) -> int:
    """Write a labeled dataset as a class-folders PNG tree; returns file count."""
    if not handle.labeled:
        raise ValueError("cannot write class folders for an unlabeled dataset")
    rootp = Path(root)
    n = 0
    for i, s in enumerate(handle.samples):
        cname = handle.class_names[s.label]
        d = rootp / cname
        d.mkdir(parents=True, exist_ok=True)
        arr = (np.clip(s.pixels, 0, 1) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(d / f"img_{i:05d}.png")
        n += 1
    return n


# -- augmentation primitives ---------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [3, H, W]; exact identity when sizes already match."""
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * wx
    bot = bl + (br - bl) * wx
    return (top + (bot - top) * wy).astype(np.float32)


def random_resized_crop(img: np.ndarray, out_size: int,
                        scale_range: tuple[float, float],
                        rng: np.random.Generator) -> tuple[np.ndarray, tuple]:
    """Area-scaled random crop then bilinear resize to out_size."""
    _, h, w = img.shape
    area = h * w
    log_ratio = (np.log(3.0 / 4.0), np.log(4.0 / 3.0))
    box = None
    for _ in range(10):
        target = rng.uniform(*scale_range) * area
        aspect = np.exp(rng.uniform(*log_ratio))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            box = (top, left, ch, cw)
            break
    if box is None:  # degenerate aspect draws: fall back to a full center crop
        side = min(h, w)
        box = ((h - side) // 2, (w - side) // 2, side, side)
    top, left, ch, cw = box
    if ch < 1 or cw < 1:
        raise ValueError("degenerate crop window")
    crop = img[:, top:top + ch, left:left + cw]
    return resize_bilinear(crop, out_size, out_size), box


def _grayscale(img: np.ndarray) -> np.ndarray:
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.stack([lum, lum, lum])


def _rgb_to_hsv(img: np.ndarray):
    r, g, b = img[0], img[1], img[2]
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    diff = maxc - minc
    s = np.where(maxc > 0, diff / np.maximum(maxc, 1e-12), 0.0)
    dsafe = np.where(diff == 0, 1.0, diff)
    rc, gc, bc = (maxc - r) / dsafe, (maxc - g) / dsafe, (maxc - b) / dsafe
    hcand = np.where(maxc == r, bc - gc,
                     np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    hval = np.where(diff == 0, 0.0, (hcand / 6.0) % 1.0)
    return hval, s, v


def _hsv_to_rgb(hval, s, v) -> np.ndarray:
    i = np.floor(hval * 6.0)
    f = hval * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(np.float32)


def _adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hval, s, v = _rgb_to_hsv(img)
    return _hsv_to_rgb((hval + shift) % 1.0, s, v)


def _color_jitter(img: np.ndarray, strength, rng: np.random.Generator) -> np.ndarray:
    bs, cs, ss, hs = strength
    ops = rng.permutation(4)
    for op in ops:
        if op == 0 and bs > 0:
            f = rng.uniform(max(0.0, 1.0 - bs), 1.0 + bs)
            img = img * f
        elif op == 1 and cs > 0:
            f = rng.uniform(max(0.0, 1.0 - cs), 1.0 + cs)
            img = f * img + (1.0 - f) * _grayscale(img).mean()
        elif op == 2 and ss > 0:
            f = rng.uniform(max(0.0, 1.0 - ss), 1.0 + ss)
            img = f * img + (1.0 - f) * _grayscale(img)
        elif op == 3 and hs > 0:
            img = _adjust_hue(np.clip(img, 0.0, 1.0), rng.uniform(-hs, hs))
        img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(3):
        out[c] = ndimage.gaussian_filter(img[c], sigma=sigma, mode="reflect")
    return out


def _solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img).astype(np.float32)


def _augment_view(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator,
                  out_size: int, scale_range, blur_p: float,
                  solarize_p: float) -> tuple[np.ndarray, dict]:
    view, box = random_resized_crop(img, out_size, scale_range, rng)
    record = {"crop": box, "flip": False, "jitter": False, "gray": False,
              "blur": None, "solarize": False}
    if rng.random() < cfg.flip_prob:
        view = view[:, :, ::-1].copy()
        record["flip"] = True
    if rng.random() < cfg.jitter_prob:
        view = _color_jitter(view, cfg.jitter_strength, rng)
        record["jitter"] = True
    if rng.random() < cfg.grayscale_prob:
        view = _grayscale(view)
        record["gray"] = True
    if rng.random() < blur_p:
        sigma = rng.uniform(0.1, 2.0)
        view = _gaussian_blur(view, sigma)
        record["blur"] = sigma
    if rng.random() < solarize_p:
        view = _solarize(view, cfg.solarize_threshold)
        record["solarize"] = True
    return np.clip(view, 0.0, 1.0).astype(np.float32), record


def multi_crop(sample: ImageSample, cfg: AugmentationConfig,
               rng: np.random.Generator, source_id: int = 0) -> ViewSet:
    """Produce 2 independently-augmented global views and N local views."""
    cfg.validate()
    if min(sample.pixels.shape[1:]) < 2:
        raise ValueError("source image too small to crop")
    globals_, locals_, records = [], [], []
    for v in range(2):
        pix, rec = _augment_view(sample.pixels, cfg, rng, cfg.global_size,
                                 cfg.global_scale_range, cfg.blur_probs[v],
                                 cfg.solarize_probs[v])
        globals_.append(ImageSample(pix, sample.label))
        records.append(rec)
    for _ in range(cfg.n_local):
        pix, rec = _augment_view(sample.pixels, cfg, rng, cfg.local_size,
                                 cfg.local_scale_range, cfg.blur_prob_local, 0.0)
        locals_.append(ImageSample(pix, sample.label))
        records.append(rec)
    return ViewSet(globals_, locals_, source_id, records)


def normalize_pixels(pixels: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((pixels - mean[:, None, None]) / std[:, None, None]).astype(np.float32)
