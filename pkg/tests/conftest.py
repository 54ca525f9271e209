import json
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtpverify import harness
from mtpverify.backbone import Backbone, ModelConfig, backbone_shapes
from mtpverify.corpus import CorpusSpec, gen_corpus
from mtpverify.mtp import MTPCascade, mtp_shapes
from mtpverify.trainer import TrainConfig, pretrain_backbone, train_mtp

settings.register_profile("repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.json"


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=10, dim=16, n_layers=2, n_heads=2, ffn_dim=24, max_seq_len=48, n_mtp_modules=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_models(seed=0, dtype=np.float64, **kw):
    """Random 64-bit backbone and cascade, small enough for exhaustive checks."""
    cfg = tiny_config(**kw)
    bb = Backbone.init(cfg, seed=seed, dtype=dtype).freeze()
    cas = MTPCascade.init(bb, seed=seed + 1, dtype=dtype)
    return bb, cas


def cycle_models(n_regular=3, dim=8, n_mtp=2, margin=10.0, mtp2_correct=False, eos_after=None):
    """Hand-built deterministic models over a tiny vocabulary.

    Every attention and FFN weight is zero, so each block is the identity and
    the backbone hidden at a position is ``sqrt(dim) * e_token`` (up to the
    norm epsilon). The LM head then reads off a transition table: token ``i``
    is followed by ``(i + 1) % n_regular``. MTP-1 projects ``e_i`` to
    ``e_{i+1}``, so it drafts the correct token two steps ahead. MTP-2 uses
    the identity projector (wrong: it repeats MTP-1's guess) unless
    ``mtp2_correct``. ``eos_after`` makes that token's successor EOS.
    """
    vocab = n_regular + 2
    cfg = ModelConfig(vocab_size=vocab, dim=dim, n_layers=1, n_heads=2, ffn_dim=8, max_seq_len=64, n_mtp_modules=n_mtp)
    eos = cfg.eos_id
    succ = {i: (i + 1) % n_regular for i in range(n_regular)}
    if eos_after is not None:
        succ[eos_after] = eos
    succ[eos] = 0
    params = {name: np.zeros(shape) for name, shape in backbone_shapes(cfg).items()}
    params["embed"][:, :] = 0.0
    for i in range(vocab):
        params["embed"][i, i] = 1.0
    params["layers.0.attn_norm"][:] = 1.0
    params["layers.0.ffn_norm"][:] = 1.0
    params["final_norm"][:] = 1.0
    head = np.zeros((vocab, dim))
    for i, j in succ.items():
        head[j, i] = margin / np.sqrt(dim)
    params["lm_head"] = head
    bb = Backbone(cfg, params).freeze()
    mp = {name: np.zeros(shape) for name, shape in mtp_shapes(cfg).items()}
    for k in range(1, n_mtp + 1):
        mp[f"mtp.{k}.block.attn_norm"][:] = 1.0
        mp[f"mtp.{k}.block.ffn_norm"][:] = 1.0
        proj = np.zeros((dim, dim))
        for i in range(vocab):
            target = succ.get(i, i) if (k == 1 or mtp2_correct) else i
            proj[i, target] = 1.0
        mp[f"mtp.{k}.proj"] = proj
    return bb, MTPCascade(bb, mp), succ


@pytest.fixture
def models64():
    return tiny_models()


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The shipped toy pipeline (corpus, pretraining, MTP training) in a temp dir."""
    raw = json.loads(TOY_CONFIG.read_text())
    raw["work_dir"] = str(tmp_path_factory.mktemp("toy"))
    cfg = harness.parse_config(raw)
    t0 = time.perf_counter()
    corpus = harness.stage_gen_data(cfg)
    harness.stage_pretrain(cfg)
    cascade, hashes = harness.stage_train_mtp(cfg)
    backbone, cascade = harness.load_models(cfg)
    return SimpleNamespace(cfg=cfg, raw=raw, corpus=corpus, backbone=backbone, cascade=cascade,
                           hashes=hashes, train_seconds=time.perf_counter() - t0)


# seed 3 keeps the chain out of fixed points (x x x ...), where t+1 and t+2
# targets coincide and a mis-offset head would look correct
OFFSET_CORPUS = CorpusSpec(seed=3, vocab_size=16, order=2, n_sequences=1000, min_len=48, max_len=48,
                           eos_schedule="fixed", sharpness=2.0, deterministic=True)
OFFSET_MODEL = ModelConfig(vocab_size=18, dim=32, n_layers=1, n_heads=4, ffn_dim=128, max_seq_len=128, n_mtp_modules=2)
OFFSET_PRETRAIN = TrainConfig(max_lr=3e-3, warmup_steps=100, total_steps=300, batch_size=16, seq_len=64, log_every=100)
OFFSET_TRAIN = TrainConfig(max_lr=3e-3, warmup_steps=100, total_steps=600, batch_size=16, seq_len=64, log_every=100)


@pytest.fixture(scope="session")
def offset_run():
    """Backbone plus two cascades on a deterministic order-2 chain: correct and mis-offset."""
    t0 = time.perf_counter()
    corpus = gen_corpus(OFFSET_CORPUS)
    bb = Backbone.init(OFFSET_MODEL, seed=0)
    pretrain_backbone(bb, corpus.train, OFFSET_PRETRAIN)
    good = MTPCascade.init(bb, seed=1)
    train_mtp(good, corpus.train, OFFSET_TRAIN, shift=1)
    bad = MTPCascade.init(bb, seed=1)
    train_mtp(bad, corpus.train, OFFSET_TRAIN, shift=0)
    return SimpleNamespace(corpus=corpus, backbone=bb, good=good, bad=bad, seconds=time.perf_counter() - t0)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Remember a one-line verdict for the terminal summary, then assert it."""
    ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    print(ACCEPTANCE_LINES[number])
    assert ok, ACCEPTANCE_LINES[number]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
