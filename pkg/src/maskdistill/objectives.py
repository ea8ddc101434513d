"""Distillation cross-entropy, pixel restoration loss, and their weighted sum.

Teacher distributions are computed outside the autodiff graph, so no
gradient can reach teacher parameters through any loss. Pair losses are
normalized by pair count (not summed) so the loss weights stay comparable
when the number of local views changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    lambda1: float = 1.0  # distillation
    lambda2: float = 0.6  # restoration
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    centering: bool = False
    center_momentum: float = 0.9

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ValueError("temperatures must be > 0")


def _teacher_probs(logits: np.ndarray, temp: float,
                   center: np.ndarray | None = None) -> np.ndarray:
    z = logits.astype(np.float64, copy=True)
    if center is not None:
        z = z - center
    z /= temp
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype)


def ce_pair_loss(teacher_logits, student_logits: Tensor, w: LossWeights,
                 center: np.ndarray | None = None) -> Tensor:
    """Cross-entropy of the student against one teacher view.

    Accepts [K] vectors or [B, K] batches (mean over the batch). The
    teacher side is plain numpy: it is a constant of the graph.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite teacher logits")
    if not np.all(np.isfinite(student_logits.data)):
        raise ValueError("non-finite student logits")
    if t.shape[-1] != student_logits.shape[-1]:
        raise ValueError("teacher/student output dims differ")
    pt = _teacher_probs(t, w.teacher_temp, center)
    log_ps = ad.log_softmax(student_logits * (1.0 / w.student_temp), axis=-1)
    ce = -(Tensor(pt) * log_ps).sum(axis=-1)
    return ce.mean() if ce.ndim else ce


def distillation_loss(teacher_outputs, student_outputs, w: LossWeights,
                      center: np.ndarray | None = None) -> Tensor:
    """Mean pair loss between the 2 teacher global views and every other
    student view: pairs (i, j) with i in {1,2}, j in {1..N+2}, j != i."""
    if len(teacher_outputs) != 2:
        raise ValueError("teacher must provide exactly 2 global-view outputs")
    if len(student_outputs) < 2:
        raise ValueError("need at least the 2 global student views")
    terms = []
    for i, t_out in enumerate(teacher_outputs):
        for j, s_out in enumerate(student_outputs):
            if j == i:
                continue
            terms.append(ce_pair_loss(t_out, s_out, w, center))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def restoration_loss(pairs) -> Tensor:
    """Mean absolute error per pixel, averaged over (reconstruction, target)
    pairs — the two global views."""
    if not pairs:
        raise ValueError("restoration loss needs at least one pair")
    terms = []
    for recon, target in pairs:
        tgt = target.pixels if hasattr(target, "pixels") else np.asarray(target)
        if recon.shape != tgt.shape:
            raise ValueError(f"shape mismatch: {recon.shape} vs {tgt.shape}")
        terms.append(ad.tabs(recon - Tensor(tgt.astype(recon.data.dtype))).mean())
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def total_loss(ce, restore, w: LossWeights):
    """lambda1 * distillation + lambda2 * restoration."""
    ce_t = ce if isinstance(ce, Tensor) else Tensor(np.asarray(ce))
    rest_t = restore if isinstance(restore, Tensor) else Tensor(np.asarray(restore))
    return ce_t * w.lambda1 + rest_t * w.lambda2


def update_center(center: np.ndarray, teacher_logits: list[np.ndarray],
                  momentum: float) -> np.ndarray:
    """EMA center over the teacher's global-view logits (optional path)."""
    batch_mean = np.concatenate(teacher_logits, axis=0).mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean
