"""Shared micro-model fixture: a full float64 training configuration small
enough to finite-difference (d=8, depth=2, n=4 tokens, K=4)."""

import numpy as np

from maskdistill.config import RunConfig
from maskdistill.data import derive_rng
from maskdistill.trainer import init_train_state, make_masks, student_loss, teacher_pass

MICRO_INI = """
[run]
seed = 5
dtype = float64

[augment]
global_size = 8
local_size = 4
n_local = 1

[encoder]
patch_size = 4
embed_dim = 8
depth = 2
heads = 2
head_output_dim = 4
mlp_hidden = 8

[mask]
strategy = attention_guided
p = 0.5
num = 1

[schedule]
total_epochs = 4
warmup_epochs = 1
batch_size = 2
"""


def micro_config(**set_overrides):
    overrides = [f"{k}={v}" for k, v in set_overrides.items()]
    return RunConfig.from_text(MICRO_INI, overrides)


def micro_setup(cfg=None, seed=7, batch=2):
    """Returns (state, cfg, norm_views, raw_globals, masks, teacher_logits)."""
    cfg = cfg or micro_config()
    rng = derive_rng(seed)
    raw_globals = [rng.random((batch, 3, 8, 8)) for _ in range(2)]
    locals_ = [rng.random((batch, 3, 4, 4)) for _ in range(cfg.augment.n_local)]
    norm_views = [(v - 0.5) * 2.0 for v in raw_globals + locals_]
    state = init_train_state(cfg, np.zeros(3), np.ones(3))
    teacher_logits, attention = teacher_pass(state, cfg, norm_views)
    masks = make_masks(state, cfg, attention, step=0)
    # guarantee the mask embedding participates
    if not any(m.any() for m in masks):
        masks[0][:, 0] = 1
    return state, cfg, norm_views, raw_globals, masks, teacher_logits


def micro_loss_fn(state, cfg, norm_views, raw_globals, masks, teacher_logits):
    """Pure scalar loss of the trainable parameters (BN buffers frozen)."""
    def f():
        total, _, _ = student_loss(state, cfg, norm_views, raw_globals, masks,
                                   teacher_logits, update_bn=False)
        return total
    return f
