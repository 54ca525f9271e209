"""
Streaming a token sequence to audio
===================================

Random (untrained) vocoder weights are enough to show the streaming
contract: samples pushed out frame by frame match the whole-utterance decode,
and the first samples appear once the conv lookahead is satisfied.
"""

import numpy as np

from mtpverify import StreamConfig, VocoderWeights, offline_decode
from mtpverify.vocoder import istft_synthesize, stft, stream_flush, stream_init, stream_push, write_wav

cfg = StreamConfig()
print("conv layers (kernel, lookahead):", [(c.kernel, c.lookahead) for c in cfg.conv_layers])
print("latency in frames:", cfg.total_lookahead_frames)

weights = VocoderWeights.init(cfg, seed=0)
tokens = np.random.default_rng(1).integers(0, cfg.vocab_size, 40)

# %%
# Push tokens one at a time, as a decoder would after verifying them.
state = stream_init(weights)
chunks = []
for i, tok in enumerate(tokens):
    out = stream_push(state, tok, weights)
    chunks.append(out)
    if i < 5:
        print(f"push {i + 1}: {len(out)} samples")
chunks.append(stream_flush(state, weights))
streamed = np.concatenate(chunks)

whole = offline_decode(tokens, weights)
print("samples:", len(streamed), "max |stream - offline|:", np.max(np.abs(streamed - whole)))

# %%
# The iSTFT head on its own inverts a forward STFT away from the edges.
x = np.sin(2 * np.pi * 440 * np.arange(1600) / cfg.sample_rate)
y = istft_synthesize(stft(x, cfg), cfg)
print("round trip error:", np.max(np.abs(y[48:-64] - x[48:-64])))

write_wav("streamed.wav", streamed / max(1e-9, np.max(np.abs(streamed))), cfg.sample_rate)
print("wrote streamed.wav")
