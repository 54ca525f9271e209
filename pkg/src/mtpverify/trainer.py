"""Offset cross-entropy training of the MTP heads against a frozen backbone.

Head ``k`` reads position ``t`` and is scored on the ground-truth token at
``t + k + 1``. Each head's loss is the mean over its scored positions and the
total is the sum over heads. Only MTP weights receive updates; the backbone,
its embedding and its LM head are read-only arrays throughout.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import Backbone
from .blocks import block_backward, block_forward
from .errors import ParameterError, TrainingError
from .mtp import MTPCascade
from .nn_core import RngStream, log_softmax

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_lr: float = 1e-4
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_size: int = 32
    seq_len: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float | None = None
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ParameterError("need 0 < beta1 < beta2 < 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ParameterError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ParameterError("batch_size must be >= 1 and seq_len >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``max_lr``, then cosine decay to zero at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.max_lr if step <= cfg.total_steps else 0.0
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay, updating parameter arrays in place.

    Decay applies only to 2-D (matrix) parameters.
    """

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            w = p.astype(np.float64)
            if self.weight_decay and p.ndim == 2:
                w *= 1.0 - lr * self.weight_decay
            w -= upd
            p[...] = w


@dataclass
class MTPLoss:
    total: float
    per_module: list[float]
    scored: list[int]
    skipped: int = 0


def _targets(tokens: np.ndarray, k: int, shift: int, pad_id: int, keep: np.ndarray):
    """Target ids and validity mask for head ``k`` at every input position."""
    b, t = tokens.shape
    off = k + shift
    tgt = np.full((b, t), pad_id, dtype=np.int64)
    if off < t:
        tgt[:, : t - off] = tokens[:, off:]
    valid = (tgt != pad_id) & keep[:, None]
    return tgt, valid


def _ce(logits: np.ndarray, tgt: np.ndarray, valid: np.ndarray):
    """Mean CE over valid positions and its gradient w.r.t. the logits."""
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits), 0
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked[valid])) / n
    d = np.exp(lp)
    np.put_along_axis(d, tgt[..., None], np.take_along_axis(d, tgt[..., None], axis=-1) - 1.0, axis=-1)
    d *= valid[..., None] / n
    return loss, d, n


def _sample_mask(tokens: np.ndarray, pad_id: int, n_modules: int) -> np.ndarray:
    lengths = np.sum(tokens != pad_id, axis=1)
    return lengths >= n_modules + 2


def mtp_loss_and_grads(
    cascade: MTPCascade,
    h0: np.ndarray,
    tokens: np.ndarray,
    *,
    shift: int = 1,
    need_grads: bool = True,
):
    """Offset CE over all heads and (optionally) gradients for the MTP weights.

    ``h0`` is the frozen backbone's level-0 output for ``tokens`` (``(B, T, D)``).
    Head ``k`` at position ``t`` is scored against ``tokens[t + k + shift]``.
    ``shift=1`` is the correct offset; other values exist for regression tests.
    """
    cfg = cascade.cfg
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens, h0 = tokens[None], np.asarray(h0)[None]
    keep = _sample_mask(tokens, cfg.pad_id, cascade.n_modules)
    skipped = int((~keep).sum())
    head = cascade.backbone.head_weight
    positions = np.arange(tokens.shape[1])

    h_prev = np.asarray(h0, dtype=np.float64)
    inputs, caches, d_hidden = [], [], []
    losses, scored = [], []
    for k in range(1, cascade.n_modules + 1):
        x = h_prev @ cascade.proj(k)
        out = block_forward(cascade.block(k), x, cfg.n_heads, positions, keep=need_grads)
        if need_grads:
            out, c = out
            caches.append(c)
        inputs.append(h_prev)
        tgt, valid = _targets(tokens, k, shift, cfg.pad_id, keep)
        loss, dlogits, n = _ce(out @ head.T, tgt, valid)
        losses.append(loss)
        scored.append(n)
        if need_grads:
            d_hidden.append(dlogits @ head)
        h_prev = out
    result = MTPLoss(float(sum(losses)), losses, scored, skipped)
    if not need_grads:
        return result, None

    grads = {}
    carry = 0.0
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    for k in range(cascade.n_modules, 0, -1):
        dout = d_hidden[k - 1] + carry
        dx, g = block_backward(cascade.block(k), caches[k - 1], dout, cfg.n_heads)
        for name, val in g.items():
            grads[f"mtp.{k}.block.{name}"] = val
        grads[f"mtp.{k}.proj"] = flat(inputs[k - 1]).T @ flat(dx)
        carry = dx @ cascade.proj(k).T
    return result, grads


def mtp_loss(cascade: MTPCascade, h0: np.ndarray, tokens: np.ndarray, *, shift: int = 1) -> MTPLoss:
    return mtp_loss_and_grads(cascade, h0, tokens, shift=shift, need_grads=False)[0]


def frozen_gradients(backbone: Backbone) -> dict[str, np.ndarray]:
    """Gradients of the MTP loss w.r.t. backbone weights: zero by construction (stop-gradient)."""
    return {name: np.zeros(p.shape) for name, p in backbone.params.items()}


def mtp_accuracy(cascade: MTPCascade, h0: np.ndarray, tokens: np.ndarray, k: int = 1, *, target_shift: int = 1) -> float:
    """Top-1 accuracy of head ``k`` against the token ``k + target_shift`` steps ahead."""
    tokens = np.asarray(tokens)
    keep = _sample_mask(tokens, cascade.cfg.pad_id, cascade.n_modules)
    h = np.asarray(h0, dtype=np.float64)
    for j in range(1, k + 1):
        h = block_forward(cascade.block(j), h @ cascade.proj(j), cascade.cfg.n_heads)
    pred = np.argmax(cascade.lm_head(h), axis=-1)
    tgt, valid = _targets(tokens, k, target_shift, cascade.cfg.pad_id, keep)
    n = int(valid.sum())
    return float(np.sum((pred == tgt) & valid)) / n if n else float("nan")


# -- batching -----------------------------------------------------------------


def make_batch(sequences: Sequence[Sequence[int]], batch_size: int, seq_len: int, pad_id: int, rng: RngStream) -> np.ndarray:
    """Draw ``batch_size`` windows of at most ``seq_len`` tokens, right-padded."""
    gen = rng.generator
    out = np.full((batch_size, seq_len), pad_id, dtype=np.int64)
    idx = gen.integers(0, len(sequences), size=batch_size)
    for row, i in enumerate(idx):
        seq = sequences[i]
        start = int(gen.integers(0, len(seq) - seq_len + 1)) if len(seq) > seq_len else 0
        window = seq[start : start + seq_len]
        out[row, : len(window)] = window
    return out


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def train_step(
    cascade: MTPCascade,
    batch: np.ndarray,
    opt: AdamW,
    cfg: TrainConfig,
    *,
    shift: int = 1,
    batch_id: int | None = None,
) -> MTPLoss:
    """One optimizer step on ``batch``; the backbone is evaluated without gradients."""
    if not cascade.backbone.frozen:
        raise TrainingError("backbone must be frozen before MTP training")
    h0 = cascade.backbone.hidden_batch(batch)
    loss, grads = mtp_loss_and_grads(cascade, h0, batch, shift=shift)
    step = opt.t + 1
    if not np.isfinite(loss.total):
        raise TrainingError(f"non-finite loss {loss.total} at step {step}, batch {batch_id}")
    if cfg.grad_clip:
        clip_gradients(grads, cfg.grad_clip)
    opt.step(grads, lr_schedule(step, cfg))
    return loss


def make_optimizer(params: dict[str, np.ndarray], cfg: TrainConfig) -> AdamW:
    return AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def train_mtp(
    cascade: MTPCascade,
    sequences: Sequence[Sequence[int]],
    cfg: TrainConfig,
    *,
    shift: int = 1,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    callback: Callable[[int, MTPLoss], None] | None = None,
) -> TrainLog:
    """Run ``cfg.total_steps`` MTP updates; writes a CSV log and periodic checkpoints."""
    rng = RngStream(cfg.seed, 1)
    opt = make_optimizer(cascade.params, cfg)
    history = TrainLog()
    pad = cascade.cfg.pad_id
    t0 = time.perf_counter()
    for step in range(1, cfg.total_steps + 1):
        batch = make_batch(sequences, cfg.batch_size, cfg.seq_len, pad, rng)
        loss = train_step(cascade, batch, opt, cfg, shift=shift, batch_id=step)
        if callback:
            callback(step, loss)
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            row = {"step": step, "lr": lr_schedule(step, cfg), "loss_total": loss.total}
            for k, v in enumerate(loss.per_module, start=1):
                row[f"loss_mtp{k}"] = v
            row["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
            history.rows.append(row)
            log.info("mtp step %d loss %.4f", step, loss.total)
        if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            cascade.save(Path(checkpoint_dir) / f"mtp_step{step}.ckpt")
    if log_path:
        history.write_csv(log_path)
    return history


def pretrain_backbone(
    backbone: Backbone,
    sequences: Sequence[Sequence[int]],
    cfg: TrainConfig,
    *,
    log_path: str | Path | None = None,
) -> TrainLog:
    """Standard next-token training used to obtain a backbone; freezes it afterwards."""
    rng = RngStream(cfg.seed, 2)
    opt = make_optimizer(backbone.params, cfg)
    pad = backbone.cfg.pad_id
    history = TrainLog()
    t0 = time.perf_counter()
    for step in range(1, cfg.total_steps + 1):
        batch = make_batch(sequences, cfg.batch_size, cfg.seq_len, pad, rng)
        logits, ctx = backbone.train_forward(batch)
        tgt = np.full_like(batch, pad)
        tgt[:, :-1] = batch[:, 1:]
        loss, dlogits, _ = _ce(logits, tgt, tgt != pad)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite backbone loss at step {step}")
        grads = backbone.train_backward(ctx, dlogits)
        if cfg.grad_clip:
            clip_gradients(grads, cfg.grad_clip)
        opt.step(grads, lr_schedule(step, cfg))
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            history.rows.append({"step": step, "lr": lr_schedule(step, cfg), "loss": loss,
                                 "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
            log.info("backbone step %d loss %.4f", step, loss)
    backbone.freeze()
    if log_path:
        history.write_csv(log_path)
    return history


def gradient_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    epsilon: float = 1e-6,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between ``grads`` and central finite differences.

    ``loss_fn`` must read the current contents of ``params``; entries are
    perturbed in place and restored. Parameters are sampled uniformly over all
    scalar entries. Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    gen = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    flat_idx = gen.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for fi in flat_idx:
        j = int(np.searchsorted(bounds, fi, side="right"))
        name = names[j]
        local = int(fi - (bounds[j - 1] if j else 0))
        arr = params[name].reshape(-1)
        old = arr[local]
        arr[local] = old + epsilon
        up = loss_fn()
        arr[local] = old - epsilon
        down = loss_fn()
        arr[local] = old
        numeric = (up - down) / (2 * epsilon)
        analytic = float(grads[name].reshape(-1)[local])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
