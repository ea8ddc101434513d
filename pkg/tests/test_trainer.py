"""Trainer: schedules, EMA semantics, optimizer isolation, determinism,
checkpoint round trips, resume equivalence."""

import numpy as np
import pytest

from maskdistill.autodiff import Tensor
from maskdistill.data import generate_synthetic
from maskdistill.trainer import (
    TrainState,
    TrainingError,
    build_batch,
    checkpoint_load,
    checkpoint_save,
    ema_update,
    init_train_state,
    lr_schedule,
    momentum_schedule,
    run_pretraining,
    train_step,
)
from micro import micro_config, micro_setup

# -- schedules ------------------------------------------------------------------


def test_ema_endpoint_cases():
    t = {"w": Tensor(np.array([2.0]))}
    s = {"w": Tensor(np.array([4.0]))}
    ema_update(t, s, 1.0)
    assert t["w"].data[0] == 2.0
    ema_update(t, s, 0.0)
    assert t["w"].data[0] == 4.0
    t = {"w": Tensor(np.array([2.0]))}
    ema_update(t, s, 0.5)
    assert t["w"].data[0] == pytest.approx(3.0)


def test_ema_shape_and_key_mismatch():
    with pytest.raises(ValueError):
        ema_update({"a": Tensor(np.zeros(2))}, {"b": Tensor(np.zeros(2))}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": Tensor(np.zeros(2))}, {"a": Tensor(np.zeros(3))}, 0.5)


def test_momentum_schedule_endpoints_and_midpoint():
    assert momentum_schedule(0, 100, 0.996, 1.0) == pytest.approx(0.996)
    assert momentum_schedule(100, 100, 0.996, 1.0) == pytest.approx(1.0)
    assert momentum_schedule(50, 100, 0.996, 1.0) == pytest.approx(0.998)


def test_lr_schedule_warmup_and_decay():
    base = 2e-3
    assert lr_schedule(0, 1000, 100, base) == 0.0
    assert lr_schedule(100, 1000, 100, base) == pytest.approx(base)
    assert lr_schedule(1000, 1000, 100, base) == pytest.approx(0.0, abs=1e-18)
    assert 0 < lr_schedule(50, 1000, 100, base) < base


def test_teacher_contracts_geometrically_with_frozen_student():
    rng = np.random.default_rng(0)
    s = {"w": Tensor(rng.standard_normal(16))}
    t = {"w": Tensor(rng.standard_normal(16))}
    m = 0.97
    d0 = np.linalg.norm(t["w"].data - s["w"].data)
    for _ in range(100):
        ema_update(t, s, m)
    d100 = np.linalg.norm(t["w"].data - s["w"].data)
    assert d100 == pytest.approx(d0 * m**100, rel=1e-6)


# -- train_step ------------------------------------------------------------------


def micro_dataset(cfg, count=8, seed=1):
    spec = cfg.synth.spec()
    spec.size = cfg.augment.global_size
    return generate_synthetic(spec, count, seed)


def run_steps(cfg, n_steps=3, seed=1):
    ds = micro_dataset(cfg, count=2 * cfg.schedule.batch_size, seed=seed)
    mean, std = ds.channel_stats()
    state = init_train_state(cfg, mean, std)
    rows = []
    steps_per_epoch = len(ds) // cfg.schedule.batch_size
    total = cfg.schedule.total_epochs * steps_per_epoch
    for step in range(n_steps):
        idxs = list(range(cfg.schedule.batch_size))
        batch = build_batch(ds, idxs, cfg, epoch=0)
        rows.append(train_step(batch, state, cfg, total, steps_per_epoch))
    return state, rows


def test_train_step_metrics_contract():
    cfg = micro_config()
    state, rows = run_steps(cfg, n_steps=2)
    row = rows[-1]
    assert set(row) == {"step", "ce", "restore", "total", "lr", "m", "masked_fraction"}
    assert row["step"] == 2
    assert 0.0 <= row["masked_fraction"] <= cfg.mask.p
    assert np.isfinite(row["total"])
    assert row["total"] == pytest.approx(
        cfg.loss.lambda1 * row["ce"] + cfg.loss.lambda2 * row["restore"])


def test_lambda2_zero_and_no_mask_reduces_to_distillation():
    cfg = micro_config(**{"loss.lambda2": 0.0, "mask.strategy": "none"})
    state, rows = run_steps(cfg, n_steps=1)
    assert rows[0]["restore"] == 0.0
    assert rows[0]["masked_fraction"] == 0.0
    assert rows[0]["total"] == pytest.approx(rows[0]["ce"])
    # decoder untouched: no gradient moments were created for it
    assert not any(k.startswith("decoder/") and np.any(state.opt_m[k] != 0)
                   for k in state.opt_m)


def test_ema_replay_oracle():
    cfg = micro_config()
    ds = micro_dataset(cfg)
    mean, std = ds.channel_stats()
    state = init_train_state(cfg, mean, std)
    before = {k: v.data.copy() for k, v in state.teacher.items()}
    before_buf = {k: v.copy() for k, v in state.teacher_buffers.items()}
    batch = build_batch(ds, [0, 1], cfg, epoch=0)
    row = train_step(batch, state, cfg, total_steps=16, steps_per_epoch=4)
    m = row["m"]
    for k in state.teacher:
        expected = m * before[k] + (1.0 - m) * state.student[k].data
        np.testing.assert_allclose(state.teacher[k].data, expected, rtol=1e-12,
                                   atol=1e-15)
    for k in state.teacher_buffers:
        expected = m * before_buf[k] + (1.0 - m) * state.student_buffers[k]
        np.testing.assert_allclose(state.teacher_buffers[k], expected, rtol=1e-12,
                                   atol=1e-15)


def test_teacher_gradients_stay_empty_and_unoptimized():
    cfg = micro_config()
    state, _ = run_steps(cfg, n_steps=2)
    for k, p in state.teacher.items():
        assert p.grad is None, k
    # optimizer moments exist only for trainable params, never teacher keys
    assert all(not k.startswith("teacher") for k in state.opt_m)
    assert set(state.opt_m) <= set(state.trainable())


def test_weight_decay_group_audit():
    cfg = micro_config()
    state, _ = run_steps(cfg, n_steps=1)
    keys = set(state.trainable())
    no_decay = {k for k in keys if not TrainState.decays(k)}
    assert "mask_emb" in no_decay
    assert all("/bn" in k for k in no_decay - {"mask_emb"})
    bn_keys = {k for k in keys if "/bn" in k}
    assert bn_keys and bn_keys <= no_decay


def test_two_runs_identical():
    cfg = micro_config()
    s1, r1 = run_steps(cfg, n_steps=3)
    s2, r2 = run_steps(cfg, n_steps=3)
    assert r1 == r2
    for k in s1.student:
        assert s1.student[k].data.tobytes() == s2.student[k].data.tobytes(), k
    for k in s1.teacher:
        assert s1.teacher[k].data.tobytes() == s2.teacher[k].data.tobytes(), k


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_nonfinite_loss_raises_with_step():
    cfg = micro_config(**{"mask.p": 1.0})
    ds = micro_dataset(cfg)
    mean, std = ds.channel_stats()
    state = init_train_state(cfg, mean, std)
    state.mask_emb.vector.data[:] = np.nan  # poisons every masked token
    batch = build_batch(ds, [0, 1], cfg, epoch=0)
    with pytest.raises((TrainingError, RuntimeError, ValueError)):
        train_step(batch, state, cfg, 16, 4)


def test_empty_batch_rejected():
    cfg = micro_config()
    ds = micro_dataset(cfg)
    state = init_train_state(cfg, *ds.channel_stats())
    with pytest.raises(ValueError):
        train_step([], state, cfg, 16, 4)


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_byte_exact(tmp_path):
    cfg = micro_config()
    state, _ = run_steps(cfg, n_steps=2)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    checkpoint_save(state, cfg, p1)
    loaded, cfg2 = checkpoint_load(p1)
    checkpoint_save(loaded, cfg2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.step == state.step and loaded.epoch == state.epoch
    assert cfg2.to_text() == cfg.to_text()


def test_checkpoint_version_mismatch(tmp_path):
    import json

    cfg = micro_config()
    state, _ = run_steps(cfg, n_steps=1)
    p = tmp_path / "c.ckpt"
    checkpoint_save(state, cfg, p)
    blob = bytearray(p.read_bytes())
    hlen = int.from_bytes(blob[8:16], "little")
    header = json.loads(bytes(blob[16:16 + hlen]))
    header["version"] = 99
    new_header = json.dumps(header, sort_keys=True).encode()
    out = blob[:8] + len(new_header).to_bytes(8, "little") + new_header + blob[16 + hlen:]
    p.write_bytes(bytes(out))
    with pytest.raises(ValueError, match="version"):
        checkpoint_load(p)


def test_checkpoint_corruption_detected(tmp_path):
    cfg = micro_config()
    state, _ = run_steps(cfg, n_steps=1)
    p = tmp_path / "d.ckpt"
    checkpoint_save(state, cfg, p)
    blob = bytearray(p.read_bytes())
    blob[-5] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        checkpoint_load(p)


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(ValueError, match="not a checkpoint"):
        checkpoint_load(p)


# -- full loop + resume ---------------------------------------------------------------


def test_run_pretraining_and_resume_match(tmp_path):
    cfg = micro_config(**{"run.checkpoint_every": 2, "schedule.total_epochs": 4,
                          "schedule.warmup_epochs": 1})
    ds = micro_dataset(cfg, count=4)

    out_a = tmp_path / "full"
    state_a, rows_a = run_pretraining(cfg, ds, out_dir=out_a)
    assert (out_a / "final.ckpt").exists()
    assert (out_a / "checkpoint_e0002.ckpt").exists()
    steps_per_epoch = 2
    assert len(rows_a) == 4 * steps_per_epoch
    lines_a = (out_a / "metrics.csv").read_text().strip().splitlines()
    assert lines_a[0] == "step,ce,restore,total,lr,m,masked_fraction"
    assert len(lines_a) == 1 + len(rows_a)

    # resume from the midpoint checkpoint and retrain the remaining epochs
    mid_state, mid_cfg = checkpoint_load(out_a / "checkpoint_e0002.ckpt")
    assert mid_state.epoch == 2
    out_b = tmp_path / "resumed"
    state_b, rows_b = run_pretraining(mid_cfg, ds, out_dir=out_b, state=mid_state)
    assert [r["total"] for r in rows_b] == [r["total"] for r in rows_a[4:]]
    assert (out_a / "final.ckpt").read_bytes() == (out_b / "final.ckpt").read_bytes()
