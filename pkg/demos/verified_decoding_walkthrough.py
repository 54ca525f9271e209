"""
Draft, verify, roll back
========================

Train a very small backbone and MTP cascade on a synthetic Markov corpus,
then decode the same held-out prompts with and without verification.
Runs in well under a minute on one CPU core.
"""

from mtpverify import (
    Backbone,
    CorpusSpec,
    MTPCascade,
    ModelConfig,
    SamplerParams,
    SpeculativeDecoder,
    TrainConfig,
    VerifyParams,
    gen_corpus,
    pretrain_backbone,
    quality_proxy,
    speedup_report,
    train_mtp,
)
from mtpverify.decoding import merge_metrics

# A sharp order-2 chain over 12 symbols. The model vocabulary adds EOS and PAD.
spec = CorpusSpec(seed=0, vocab_size=12, order=2, n_sequences=300, min_len=16, max_len=32, sharpness=3.0)
corpus = gen_corpus(spec)
print("first training sequence:", corpus.train[0])

# Pretrain the backbone, then freeze it. Only the MTP cascade learns after this.
cfg = ModelConfig(vocab_size=spec.model_vocab_size, dim=32, n_layers=2, n_heads=4, ffn_dim=64,
                  max_seq_len=64, n_mtp_modules=2)
backbone = Backbone.init(cfg, seed=0)
pretrain_backbone(backbone, corpus.train, TrainConfig(max_lr=3e-3, warmup_steps=20, total_steps=150, batch_size=16, seq_len=32))
frozen_hash = backbone.content_hash()

cascade = MTPCascade.init(backbone, seed=1)
train_mtp(cascade, corpus.train, TrainConfig(max_lr=3e-3, warmup_steps=20, total_steps=200, batch_size=16, seq_len=32))
print("backbone untouched by MTP training:", backbone.content_hash() == frozen_hash)

# %%
# One traced generation. Each event line is ``step kind token module``.
dec = SpeculativeDecoder(backbone, cascade)
prompt = corpus.heldout[0][:3]
out, metrics, events = dec.generate(prompt, 12, SamplerParams(seed=3), VerifyParams(topk_v=3), trace=True)
for e in events[:15]:
    print("  ", e.line())
print("output:", out)
print("ratio", speedup_report(metrics).formatted(), "tokens/forward", round(metrics.tokens_per_forward(), 3))

# %%
# Widening the verification top-k accepts more drafts. Top-k equal to the
# vocabulary accepts everything, which is the no-verification ablation.
prompts = [s[:3] for s in corpus.heldout[:20]]
for k in (1, 2, 4, 8, cfg.vocab_size):
    vp = VerifyParams(topk_v=k, eos_topk_v=k if k == cfg.vocab_size else 1)
    runs = [dec.generate(p, 24, SamplerParams(seed=i), vp) for i, p in enumerate(prompts)]
    m = merge_metrics(r[1] for r in runs)
    nll = quality_proxy([r[0] for r in runs], spec, start=3).nll
    print(f"topk_v={k:>2}  ratio {speedup_report(m).formatted():>22}  nll {nll:.3f}")

vanilla = [dec.generate_vanilla(p, 24, SamplerParams(seed=i))[0] for i, p in enumerate(prompts)]
print(f"vanilla      nll {quality_proxy(vanilla, spec, start=3).nll:.3f}")
