import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config, tiny_models
from mtpverify.backbone import Backbone
from mtpverify.errors import ParameterError, TrainingError
from mtpverify.mtp import MTPCascade
from mtpverify.nn_core import RngStream
from mtpverify.trainer import (
    AdamW,
    TrainConfig,
    frozen_gradients,
    gradient_check,
    lr_schedule,
    make_batch,
    make_optimizer,
    mtp_loss,
    mtp_loss_and_grads,
    train_mtp,
    train_step,
)


def random_batch(bb, b=3, t=9, seed=0, lengths=None):
    gen = np.random.default_rng(seed)
    toks = gen.integers(0, bb.cfg.n_regular, (b, t))
    for i, n in enumerate(lengths or []):
        toks[i, n:] = bb.cfg.pad_id
    return toks


def test_train_config_invariants():
    with pytest.raises(ParameterError):
        TrainConfig(beta1=0.999, beta2=0.9)
    with pytest.raises(ParameterError):
        TrainConfig(warmup_steps=10, total_steps=5)
    cfg = TrainConfig()
    assert (cfg.max_lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.grad_clip) == (1e-4, 0.9, 0.999, 0.01, None)


def test_lr_schedule_points():
    cfg = TrainConfig(max_lr=1e-3, warmup_steps=100, total_steps=1100)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(100, cfg) == pytest.approx(1e-3, rel=1e-15)
    mid = (100 + 1100) // 2
    assert lr_schedule(mid, cfg) == pytest.approx(1e-3 * (1 + math.cos(math.pi / 2)) / 2, rel=1e-12)
    assert lr_schedule(50, cfg) == pytest.approx(5e-4)
    assert lr_schedule(1100, cfg) == pytest.approx(0.0, abs=1e-20)
    assert lr_schedule(5000, cfg) == 0.0


@given(st.integers(0, 3000))
def test_lr_schedule_bounded(step):
    cfg = TrainConfig(max_lr=2e-3, warmup_steps=200, total_steps=2000)
    assert 0.0 <= lr_schedule(step, cfg) <= 2e-3


def test_uniform_logits_give_log_vocab():
    cfg = tiny_config()
    bb = Backbone.init(cfg, seed=0, dtype=np.float64)
    bb.params["lm_head"][:] = 0.0
    bb.freeze()
    cas = MTPCascade.init(bb, seed=1, dtype=np.float64)
    toks = random_batch(bb)
    loss = mtp_loss(cas, bb.hidden_batch(toks), toks)
    for v in loss.per_module:
        assert v == pytest.approx(math.log(cfg.vocab_size), rel=1e-12)


def test_boundary_lengths_score_one_position():
    bb, cas1 = tiny_models(n_mtp_modules=1)
    toks = random_batch(bb, b=1, t=6, lengths=[3])
    assert mtp_loss(cas1, bb.hidden_batch(toks), toks).scored == [1]
    bb2, cas2 = tiny_models()
    toks = random_batch(bb2, b=1, t=6, lengths=[4])
    assert mtp_loss(cas2, bb2.hidden_batch(toks), toks).scored == [2, 1]
    short = random_batch(bb2, b=1, t=6, lengths=[3])
    loss = mtp_loss(cas2, bb2.hidden_batch(short), short)
    assert loss.skipped == 1 and loss.scored == [0, 0]


def test_loss_matches_explicit_shift_oracle(models64):
    bb, cas = models64
    toks = random_batch(bb, b=4, t=9, seed=3, lengths=[9, 7, 5, 9])
    toks[3, 8] = bb.cfg.eos_id
    loss = mtp_loss(cas, bb.hidden_batch(toks), toks)
    per_module = []
    for k in (1, 2):
        total, n = 0.0, 0
        for row in toks:
            seq = [int(t) for t in row if t != bb.cfg.pad_id]
            if len(seq) < 4:
                continue
            _, h0 = bb.forward_full(seq)
            logits = cas.lm_head(cas.cascade_full(h0)[k - 1].values)
            targets = seq[k + 1 :]
            for t, g in enumerate(targets):
                z = logits[t]
                lse = max(z) + math.log(sum(math.exp(v - max(z)) for v in z))
                total += lse - z[g]
                n += 1
        per_module.append(total / n)
    assert np.max(np.abs(np.array(loss.per_module) - per_module) / np.abs(per_module)) < 1e-10
    assert abs(loss.total - sum(loss.per_module)) < 1e-12


def test_eos_target_included_pad_excluded(models64):
    bb, cas = models64
    toks = random_batch(bb, b=1, t=8, lengths=[6])
    toks[0, 5] = bb.cfg.eos_id
    loss = mtp_loss(cas, bb.hidden_batch(toks), toks)
    # six real tokens: module 1 scores targets 2..5 (EOS included), module 2 targets 3..5
    assert loss.scored == [4, 3]


def test_zero_gradients_without_decay_leave_weights():
    w = {"a": np.ones((3, 3)), "b": np.ones(3)}
    opt = AdamW(w, weight_decay=0.0)
    opt.step({"a": np.zeros((3, 3)), "b": np.zeros(3)}, lr=0.1)
    assert np.array_equal(w["a"], np.ones((3, 3))) and np.array_equal(w["b"], np.ones(3))


def test_one_step_matches_hand_rolled_adamw(models64):
    bb, cas = models64
    cfg = TrainConfig(max_lr=1e-2, warmup_steps=0, total_steps=10, weight_decay=0.1)
    toks = random_batch(bb, b=2, t=8, seed=4)
    before = {k: v.copy() for k, v in cas.params.items()}
    _, grads = mtp_loss_and_grads(cas, bb.hidden_batch(toks), toks)
    opt = make_optimizer(cas.params, cfg)
    train_step(cas, toks, opt, cfg)
    lr = lr_schedule(1, cfg)
    for name, w0 in before.items():
        g = grads[name]
        m_hat = (1 - 0.9) * g / (1 - 0.9)
        v_hat = (1 - 0.999) * g * g / (1 - 0.999)
        decay = (1 - lr * 0.1) if w0.ndim == 2 else 1.0
        expect = w0 * decay - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        err = np.max(np.abs(cas.params[name] - expect)) / max(np.max(np.abs(expect)), 1e-30)
        assert err < 1e-8, name


def test_freeze_contract_over_training():
    bb, cas = tiny_models()
    before = bb.content_hash()
    seqs = [list(np.random.default_rng(i).integers(0, 8, 12)) + [bb.cfg.eos_id] for i in range(20)]
    cfg = TrainConfig(max_lr=1e-3, warmup_steps=10, total_steps=100, batch_size=4, seq_len=12, log_every=50)
    mtp_before = cas.content_hash()
    train_mtp(cas, seqs, cfg)
    assert bb.content_hash() == before
    assert cas.content_hash() != mtp_before
    assert all(np.all(g == 0) for g in frozen_gradients(bb).values())


def test_unfrozen_backbone_and_nan_loss_abort():
    cfg = tiny_config()
    bb = Backbone.init(cfg, seed=0, dtype=np.float64)
    cas = MTPCascade.init(bb, seed=1, dtype=np.float64)
    toks = random_batch(bb, b=2, t=8)
    tc = TrainConfig(warmup_steps=0, total_steps=5)
    with pytest.raises(TrainingError):
        train_step(cas, toks, make_optimizer(cas.params, tc), tc)
    bb.freeze()
    cas.params["mtp.1.proj"][0, 0] = np.nan
    with pytest.raises(TrainingError, match="step 1, batch 7"):
        train_step(cas, toks, make_optimizer(cas.params, tc), tc, batch_id=7)


def test_gradient_check_linear_model():
    gen = np.random.default_rng(0)
    c = {"w": gen.standard_normal((20, 15))}
    w = {"w": gen.standard_normal((20, 15))}
    loss = lambda: float(np.sum(c["w"] * w["w"]))  # noqa: E731
    # central differences are exact on a linear loss, so a wide step only shrinks roundoff
    assert gradient_check(loss, w, c, epsilon=1e-2, n_samples=200) < 1e-9


def test_gradient_check_full_cascade():
    bb, cas = tiny_models(dim=16, n_heads=2, ffn_dim=24)
    toks = random_batch(bb, b=2, t=8, seed=5, lengths=[8, 6])
    h0 = bb.hidden_batch(toks)
    _, grads = mtp_loss_and_grads(cas, h0, toks)
    err = gradient_check(lambda: mtp_loss(cas, h0, toks).total, cas.params, grads, n_samples=200)
    assert err < 1e-4


def test_training_log_columns(tmp_path):
    bb, cas = tiny_models()
    seqs = [list(np.random.default_rng(i).integers(0, 8, 10)) for i in range(10)]
    cfg = TrainConfig(max_lr=1e-3, warmup_steps=2, total_steps=6, batch_size=2, seq_len=8, log_every=3, checkpoint_every=3)
    train_mtp(cas, seqs, cfg, log_path=tmp_path / "log.csv", checkpoint_dir=tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert list(rows[0]) == ["step", "lr", "loss_total", "loss_mtp1", "loss_mtp2", "wall_ms"]
    assert [r["step"] for r in rows] == ["3", "6"]
    assert (tmp_path / "mtp_step3.ckpt").exists() and (tmp_path / "mtp_step6.ckpt").exists()


def test_make_batch_shapes_and_padding():
    seqs = [[1, 2, 3], list(range(20))]
    b = make_batch(seqs, 6, 8, 99, RngStream(0))
    assert b.shape == (6, 8)
    for row in b:
        real = row[row != 99]
        assert len(real) in (3, 8)
