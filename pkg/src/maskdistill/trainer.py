"""Training loop: EMA teacher, attention-guided student masking, decoder
restoration, AdamW with decoupled weight decay, schedules, checkpoints.

All randomness is derived statelessly from (seed, purpose tag, epoch/step
indices), so two runs with the same config are byte-identical and a
resumed run replays an unbroken one exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetHandle, ViewSet, derive_rng, multi_crop, normalize_pixels
from .decoder import init_decoder_params, reconstruct
from .encoder import encode, init_encoder_params, patch_embed
from .masking import MaskEmbedding, apply_mask, batched_attention_guided_mask
from .objectives import distillation_loss, restoration_loss, total_loss, update_center

if TYPE_CHECKING:
    from .config import RunConfig

CHECKPOINT_MAGIC = b"MDCKPT01"
CHECKPOINT_VERSION = 1

# rng purpose tags (stateless stream derivation)
_TAG_INIT, _TAG_ORDER, _TAG_AUG, _TAG_MASK = 101, 102, 103, 104


class TrainingError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    base_lr: float = 2e-3
    warmup_epochs: int = 10
    total_epochs: int = 100
    weight_decay: float = 0.04
    momentum_base: float = 0.996
    momentum_final: float = 1.0
    batch_size: int = 50
    clip_norm: float = 3.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not (0.0 <= self.momentum_base <= self.momentum_final <= 1.0):
            raise ValueError("need 0 <= momentum_base <= momentum_final <= 1")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs must not exceed total_epochs")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ValueError("batch_size and total_epochs must be >= 1")


class TrainState:
    """Everything a training run owns; see checkpoint_save for the layout."""

    def __init__(self, student, student_buffers, teacher, teacher_buffers,
                 decoder_params, decoder_buffers, mask_emb, norm_mean, norm_std,
                 seed, center=None):
        self.student = student
        self.student_buffers = student_buffers
        self.teacher = teacher
        self.teacher_buffers = teacher_buffers
        self.decoder = decoder_params
        self.decoder_buffers = decoder_buffers
        self.mask_emb: MaskEmbedding = mask_emb
        self.norm_mean = norm_mean
        self.norm_std = norm_std
        self.seed = int(seed)
        self.center = center
        self.step = 0
        self.epoch = 0
        self.opt_m: dict[str, np.ndarray] = {}
        self.opt_v: dict[str, np.ndarray] = {}

    def trainable(self) -> dict[str, Tensor]:
        out = {f"student/{k}": v for k, v in self.student.items()}
        out.update({f"decoder/{k}": v for k, v in self.decoder.items()})
        out["mask_emb"] = self.mask_emb.vector
        # canonical order: float reductions over this dict (gradient-norm
        # clipping) must not depend on construction vs checkpoint-load order
        return dict(sorted(out.items()))

    @staticmethod
    def decays(key: str) -> bool:
        """Weight decay excludes BN parameters and the mask embedding."""
        return "/bn" not in key and key != "mask_emb"


def init_train_state(cfg: "RunConfig", norm_mean, norm_std) -> TrainState:
    dtype = np.dtype(cfg.run.dtype)
    grid = cfg.global_grid
    rng = derive_rng(cfg.run.seed, _TAG_INIT)
    student, student_buffers = init_encoder_params(cfg.encoder, grid, rng, dtype)
    # teacher starts as an exact copy; afterwards it changes only via EMA
    teacher = {k: Tensor(v.data.copy()) for k, v in student.items()}
    teacher_buffers = {k: v.copy() for k, v in student_buffers.items()}
    dec_params, dec_buffers = init_decoder_params(cfg.decoder, rng, dtype)
    emb = MaskEmbedding(cfg.encoder.embed_dim, dtype=dtype)
    center = (np.zeros(cfg.encoder.head_output_dim, dtype=dtype)
              if cfg.loss.centering else None)
    return TrainState(student, student_buffers, teacher, teacher_buffers,
                      dec_params, dec_buffers, emb,
                      np.asarray(norm_mean, dtype=np.float32),
                      np.asarray(norm_std, dtype=np.float32),
                      cfg.run.seed, center)


# -- schedules --------------------------------------------------------------------


def ema_update(teacher, student, m: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s, elementwise, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if set(teacher) != set(student):
        raise ValueError("teacher/student parameter sets differ")
    for k in teacher:
        t = teacher[k].data if isinstance(teacher[k], Tensor) else teacher[k]
        s = student[k].data if isinstance(student[k], Tensor) else student[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        t *= m
        t += (1.0 - m) * s


def momentum_schedule(step: int, total_steps: int, m0: float, m1: float) -> float:
    """Cosine ramp from m0 at step 0 to m1 at the final step."""
    if total_steps <= 0:
        return m1
    frac = min(max(step / total_steps, 0.0), 1.0)
    return m1 - (m1 - m0) * (math.cos(math.pi * frac) + 1.0) / 2.0


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear 0 -> base_lr over warmup, then cosine decay to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * (math.cos(math.pi * min(frac, 1.0)) + 1.0) / 2.0


# -- forward passes ----------------------------------------------------------------


def _views_to_arrays(batch: list[ViewSet], norm_mean, norm_std):
    """Per view index: normalized [B,3,h,w] inputs plus raw global targets."""
    n_local = len(batch[0].local_views)
    views = []
    for g in range(2):
        views.append(np.stack([vs.global_views[g].pixels for vs in batch]))
    for l in range(n_local):
        views.append(np.stack([vs.local_views[l].pixels for vs in batch]))
    raw_globals = views[:2]
    normed = [np.stack([normalize_pixels(img, norm_mean, norm_std) for img in v])
              for v in views]
    return normed, raw_globals


def teacher_pass(state: TrainState, cfg: "RunConfig", norm_views):
    """Teacher forward: logits for the 2 globals, attention maps for all
    views (each view's mask is guided by the teacher map of that view).

    Local-view passes are skipped when the mask strategy needs no
    attention; those views then get a uniform placeholder map."""
    need_local_attention = cfg.mask.strategy == "attention_guided"
    logits, attention = [], []
    with ad.no_grad():
        for v, arr in enumerate(norm_views):
            if v >= 2 and not need_local_attention:
                B = arr.shape[0]
                n = (arr.shape[2] // cfg.encoder.patch_size) * \
                    (arr.shape[3] // cfg.encoder.patch_size)
                attention.append(np.full((B, n), 1.0 / n, dtype=arr.dtype))
                continue
            seq = patch_embed(arr, state.teacher, cfg.encoder, cfg.global_grid)
            out = encode(seq, state.teacher, cfg.encoder, state.teacher_buffers,
                         update_bn_stats=False, want_logits=(v < 2))
            attention.append(out.attention)
            if v < 2:
                logits.append(out.cls_logits.data)
    return logits, attention


def make_masks(state: TrainState, cfg: "RunConfig", attention, step: int):
    """Per-view mask bits [B, n] following the configured strategy."""
    rng = derive_rng(state.seed, _TAG_MASK, step)
    masks = []
    for attn in attention:
        B, n = attn.shape
        if cfg.mask.strategy == "none":
            masks.append(np.zeros((B, n), dtype=np.uint8))
        elif cfg.mask.strategy == "random":
            masks.append((rng.random((B, n)) < cfg.mask.p).astype(np.uint8))
        else:
            masks.append(batched_attention_guided_mask(attn, cfg.mask, rng))
    return masks


def student_loss(state: TrainState, cfg: "RunConfig", norm_views, raw_globals,
                 masks, teacher_logits, update_bn: bool = True):
    """Differentiable student forward: masked encodes on every view, decoder
    restoration on the globals, Eq-style weighted total loss."""
    student_logits = []
    recon_pairs = []
    for v, arr in enumerate(norm_views):
        is_global = v < 2
        seq = patch_embed(arr, state.student, cfg.encoder, cfg.global_grid)
        if masks[v].any():
            B = arr.shape[0]
            padded = np.concatenate(
                [np.zeros((B, 1), dtype=np.uint8), masks[v]], axis=1)
            pos_full = ad.concat(
                [Tensor(np.zeros((1, cfg.encoder.embed_dim),
                                 dtype=seq.pos_patch.data.dtype)), seq.pos_patch],
                axis=0)
            seq.tokens = apply_mask(seq.tokens, padded, state.mask_emb, pos=pos_full)
        out = encode(seq, state.student, cfg.encoder, state.student_buffers,
                     update_bn_stats=update_bn and is_global, want_logits=True)
        student_logits.append(out.cls_logits)
        if is_global and cfg.loss.lambda2 > 0:
            recon = reconstruct(out.patch_tokens, seq.grid, state.decoder,
                                cfg.decoder, state.decoder_buffers,
                                update_bn_stats=update_bn)
            recon_pairs.append((recon, raw_globals[v]))

    ce = distillation_loss(teacher_logits, student_logits, cfg.loss,
                           center=state.center)
    if cfg.loss.lambda2 > 0:
        restore = restoration_loss(recon_pairs)
    else:  # decoder skipped entirely: pure distillation
        restore = Tensor(np.zeros((), dtype=np.dtype(cfg.run.dtype)))
    return total_loss(ce, restore, cfg.loss), ce, restore


# -- optimizer ----------------------------------------------------------------------


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    norm = ad.global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


def adamw_step(state: TrainState, lr: float, sched: ScheduleConfig) -> None:
    """Decoupled-weight-decay Adam on student + decoder + mask embedding."""
    b1, b2, eps = sched.adam_beta1, sched.adam_beta2, sched.adam_eps
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for key, p in state.trainable().items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if key not in state.opt_m:
            state.opt_m[key] = np.zeros_like(p.data)
            state.opt_v[key] = np.zeros_like(p.data)
        m = state.opt_m[key]
        v = state.opt_v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if sched.weight_decay and TrainState.decays(key):
            update = update + sched.weight_decay * p.data
        p.data -= lr * update


# -- the step ------------------------------------------------------------------------


def train_step(batch: list[ViewSet], state: TrainState, cfg: "RunConfig",
               total_steps: int, steps_per_epoch: int):
    """One optimization step; returns the metrics row."""
    if not batch:
        raise ValueError("empty batch")
    sched = cfg.schedule
    norm_views, raw_globals = _views_to_arrays(batch, state.norm_mean, state.norm_std)
    teacher_logits, attention = teacher_pass(state, cfg, norm_views)
    masks = make_masks(state, cfg, attention, state.step)

    ad.zero_grads(state.trainable())
    loss, ce, restore = student_loss(state, cfg, norm_views, raw_globals,
                                     masks, teacher_logits)
    if not np.isfinite(loss.data):
        raise TrainingError(
            f"non-finite loss at step {state.step}: "
            f"ce={float(ce.data)!r} restore={float(restore.data)!r}")
    loss.backward()

    trainable = state.trainable()
    clip_global_norm(trainable, sched.clip_norm)
    lr = lr_schedule(state.step, total_steps, sched.warmup_epochs * steps_per_epoch,
                     sched.base_lr)
    adamw_step(state, lr, sched)

    m = momentum_schedule(state.step, total_steps, sched.momentum_base,
                          sched.momentum_final)
    ema_update(state.teacher, state.student, m)
    ema_update(state.teacher_buffers, state.student_buffers, m)
    if state.center is not None:
        state.center = update_center(state.center, teacher_logits,
                                     cfg.loss.center_momentum)
    state.step += 1

    masked = sum(int(mk.sum()) for mk in masks)
    bits = sum(mk.size for mk in masks)
    return {
        "step": state.step,
        "ce": float(ce.data),
        "restore": float(restore.data),
        "total": float(loss.data),
        "lr": lr,
        "m": m,
        "masked_fraction": masked / bits if bits else 0.0,
    }


# -- training loop -------------------------------------------------------------------

METRIC_FIELDS = ["step", "ce", "restore", "total", "lr", "m", "masked_fraction"]


def build_batch(dataset: DatasetHandle, indices, cfg: "RunConfig",
                epoch: int) -> list[ViewSet]:
    batch = []
    for idx in indices:
        rng = derive_rng(cfg.run.seed, _TAG_AUG, epoch, int(idx))
        batch.append(multi_crop(dataset[int(idx)], cfg.augment, rng, source_id=int(idx)))
    return batch


def run_pretraining(cfg: "RunConfig", dataset: DatasetHandle,
                    out_dir: str | Path | None = None,
                    state: TrainState | None = None,
                    epoch_callback=None):
    """Full pre-training; optionally resumes from a provided state.

    Writes metrics.csv, periodic checkpoints, and final.ckpt when out_dir
    is given. Returns (state, metrics_rows).
    """
    sched = cfg.schedule
    if state is None:
        mean, std = dataset.channel_stats()
        state = init_train_state(cfg, mean, std)
    steps_per_epoch = math.ceil(len(dataset) / sched.batch_size)
    total_steps = sched.total_epochs * steps_per_epoch

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if state.step == 0 or not metrics_path.exists():
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    rows = []
    for epoch in range(state.epoch, sched.total_epochs):
        order = derive_rng(cfg.run.seed, _TAG_ORDER, epoch).permutation(len(dataset))
        for s in range(steps_per_epoch):
            idxs = order[s * sched.batch_size:(s + 1) * sched.batch_size]
            batch = build_batch(dataset, idxs, cfg, epoch)
            row = train_step(batch, state, cfg, total_steps, steps_per_epoch)
            rows.append(row)
            if metrics_path is not None:
                with open(metrics_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float)
                                             else row[k] for k in METRIC_FIELDS])
        state.epoch = epoch + 1
        if out is not None and cfg.run.checkpoint_every > 0 \
                and (epoch + 1) % cfg.run.checkpoint_every == 0 \
                and epoch + 1 < sched.total_epochs:
            checkpoint_save(state, cfg, out / f"checkpoint_e{epoch + 1:04d}.ckpt")
        if epoch_callback is not None:
            epoch_callback(epoch, state, rows)
    if out is not None:
        checkpoint_save(state, cfg, out / "final.ckpt")
    return state, rows


# -- checkpointing -------------------------------------------------------------------


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for k, v in state.student.items():
        arrays[f"param/student/{k}"] = v.data
    for k, v in state.teacher.items():
        arrays[f"param/teacher/{k}"] = v.data
    for k, v in state.decoder.items():
        arrays[f"param/decoder/{k}"] = v.data
    arrays["param/mask_emb"] = state.mask_emb.vector.data
    for k, v in state.student_buffers.items():
        arrays[f"buf/student/{k}"] = v
    for k, v in state.teacher_buffers.items():
        arrays[f"buf/teacher/{k}"] = v
    for k, v in state.decoder_buffers.items():
        arrays[f"buf/decoder/{k}"] = v
    for k, v in state.opt_m.items():
        arrays[f"optm/{k}"] = v
    for k, v in state.opt_v.items():
        arrays[f"optv/{k}"] = v
    if state.center is not None:
        arrays["center"] = state.center
    arrays["norm/mean"] = state.norm_mean
    arrays["norm/std"] = state.norm_std
    return arrays


def checkpoint_save(state: TrainState, cfg: "RunConfig", path: str | Path) -> None:
    """Binary checkpoint: magic, json header (config text, step, shapes,
    payload sha256), then raw array bytes. Byte-exact round trips."""
    arrays = _state_arrays(state)
    names = sorted(arrays)
    payload = b"".join(np.ascontiguousarray(arrays[n]).tobytes() for n in names)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_text(),
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.seed,
        "arrays": [{"name": n, "dtype": arrays[n].dtype.name,
                    "shape": list(arrays[n].shape)} for n in names],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)


def checkpoint_load(path: str | Path):
    """Returns (state, run_config). Raises on version or checksum mismatch."""
    from .config import RunConfig  # local import to avoid a cycle

    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: file has {header.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"checkpoint checksum mismatch (corrupt file): {path}")

    cfg = RunConfig.from_text(header["config"])
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = count * dt.itemsize
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=dt).reshape(
            meta["shape"]).copy()
        arrays[meta["name"]] = arr
        offset += nbytes

    def group(prefix, as_tensor=False, grad=False):
        out = {}
        for name, arr in arrays.items():
            if name.startswith(prefix):
                key = name[len(prefix):]
                out[key] = ad.Tensor(arr, requires_grad=grad) if as_tensor else arr
        return out

    student = group("param/student/", as_tensor=True, grad=True)
    teacher = group("param/teacher/", as_tensor=True)
    dec = group("param/decoder/", as_tensor=True, grad=True)
    emb = MaskEmbedding(cfg.encoder.embed_dim, dtype=arrays["param/mask_emb"].dtype)
    emb.vector = ad.Tensor(arrays["param/mask_emb"], requires_grad=True)
    state = TrainState(
        student, group("buf/student/"), teacher, group("buf/teacher/"),
        dec, group("buf/decoder/"), emb,
        arrays["norm/mean"], arrays["norm/std"], header["seed"],
        center=arrays.get("center"))
    state.step = header["step"]
    state.epoch = header["epoch"]
    state.opt_m = group("optm/")
    state.opt_v = group("optv/")
    return state, cfg
