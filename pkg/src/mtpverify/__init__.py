"""Verified multi-token speculative decoding on a frozen transformer backbone.

The main pieces are a small numpy transformer (:mod:`.backbone`), a cascade
of MTP draft heads (:mod:`.mtp`) trained by :mod:`.trainer`, the draft and
verify decoder (:mod:`.decoding`), a streaming iSTFT vocoder
(:mod:`.vocoder`) and the experiment harness (:mod:`.harness`, :mod:`.cli`).
"""

from .backbone import Backbone, HiddenStates, KVCache, ModelConfig
from .corpus import CorpusSpec, MarkovSource, gen_corpus, quality_proxy
from .decoding import (
    DecodeMetrics,
    Event,
    SamplerParams,
    SpeculativeDecoder,
    VerifyParams,
    audit_trace,
    sample,
    speedup_report,
)
from .errors import *  # noqa: F401,F403
from .mtp import CascadeState, Draft, MTPCascade
from .nn_core import RngStream, matmul, rms_norm, rope, softmax
from .trainer import AdamW, TrainConfig, gradient_check, lr_schedule, mtp_loss, pretrain_backbone, train_mtp
from .vocoder import StreamConfig, VocoderWeights, istft_synthesize, offline_decode, stream_decode

__version__ = "0.1.0"
