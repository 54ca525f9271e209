import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.io import wavfile

import reference
from mtpverify.errors import ConfigurationError, InputError, StateError
from mtpverify.vocoder import (
    ConvSpec,
    SpectralFrame,
    StreamConfig,
    VocoderWeights,
    cola_constant,
    conv_layer_offline,
    decode_frames,
    hann_window,
    istft_synthesize,
    offline_decode,
    stft,
    stream_decode,
    stream_flush,
    stream_init,
    stream_push,
    write_spectral_dump,
    write_wav,
)

SMALL = StreamConfig(vocab_size=12, dim=8, n_heads=2, ffn_dim=16, n_blocks=1, max_frames=256)


def random_tokens(n, vocab, seed):
    return list(np.random.default_rng(seed).integers(0, vocab, n))


def test_defaults_and_derived_fields():
    cfg = StreamConfig()
    assert (cfg.n_fft, cfg.hop, cfg.n_bins, cfg.total_lookahead_frames) == (64, 16, 33, 2)
    assert [c.left for c in cfg.conv_layers] == [6, 4, 6]
    assert cola_constant(hann_window(64), 16) == pytest.approx(1.5, abs=1e-12)
    cfg2 = StreamConfig.from_dict({"conv_layers": [[5, 3, 1], {"kernel": 3, "lookahead": 0}]})
    assert cfg2.conv_layers == (ConvSpec(5, 1), ConvSpec(3, 0))
    with pytest.raises(ConfigurationError):
        StreamConfig.from_dict({"conv_layers": [[5, 2, 1]]})


def test_cola_violation_rejected():
    with pytest.raises(ConfigurationError):
        StreamConfig(hop=32)
    with pytest.raises(ConfigurationError):
        StreamConfig(hop=80)
    with pytest.raises(ConfigurationError):
        cola_constant(np.ones(10) * np.linspace(0, 1, 10), 3)


def test_zero_network_is_silent():
    w = VocoderWeights.init(SMALL, seed=0)
    for name in w.params:
        if name.startswith(("conv.", "head.")):
            w.params[name][...] = 0.0
    out = offline_decode(random_tokens(20, 12, 1), w)
    assert out.shape == (20 * SMALL.hop,) and np.all(out == 0.0)
    wave, _ = stream_decode(random_tokens(20, 12, 1), w)
    assert np.all(wave == 0.0)


def test_single_token_gives_one_hop():
    w = VocoderWeights.init(SMALL, seed=1)
    assert offline_decode([3], w).shape == (SMALL.hop,)
    wave, sizes = stream_decode([3], w)
    assert wave.shape == (SMALL.hop,) and sizes == [0]
    with pytest.raises(InputError):
        offline_decode([12], w)


def loop_conv(x, weight, bias, spec):
    t_len, d = x.shape
    out = np.zeros_like(x)
    for t in range(t_len):
        acc = bias.copy()
        for j in range(spec.kernel):
            s = t - spec.left + j
            if 0 <= s < t_len:
                acc = acc + x[s] @ weight[j]
        out[t] = x[t] + acc / (1.0 + np.exp(-acc))
    return out


def loop_istft(mag, phase, n_fft, hop):
    win = [0.5 - 0.5 * math.cos(2 * math.pi * n / n_fft) for n in range(n_fft)]
    # the squared window overlap-adds to the same constant at every offset, so sample 0 suffices
    norm = sum(win[k * hop] ** 2 for k in range(n_fft // hop))
    out = np.zeros(len(mag) * hop + n_fft)
    nb = n_fft // 2 + 1
    for f in range(len(mag)):
        for n in range(n_fft):
            s = mag[f][0] * math.cos(phase[f][0]) + mag[f][nb - 1] * math.cos(math.pi * n + phase[f][nb - 1])
            for k in range(1, nb - 1):
                s += 2 * mag[f][k] * math.cos(2 * math.pi * k * n / n_fft + phase[f][k])
            out[f * hop + n] += s / n_fft * win[n] / norm
    return out[: len(mag) * hop]


def test_conv_layer_matches_loop():
    gen = np.random.default_rng(2)
    x = gen.standard_normal((11, 4))
    for spec in (ConvSpec(7, 0), ConvSpec(7, 2), ConvSpec(3, 2), ConvSpec(1, 0)):
        wt = gen.standard_normal((spec.kernel, 4, 4))
        b = gen.standard_normal(4)
        assert np.max(np.abs(conv_layer_offline(x, wt, b, spec) - loop_conv(x, wt, b, spec))) < 1e-12


def test_offline_matches_layer_composition_oracle():
    cfg = StreamConfig(vocab_size=20, dim=8, n_heads=2, ffn_dim=16, n_blocks=2)
    w = VocoderWeights.init(cfg, seed=3)
    toks = random_tokens(40, 20, 4)
    h = np.array([w.params["embed"][t] for t in toks])
    for b in range(cfg.n_blocks):
        h = reference.block(w.block(b), h, cfg.n_heads)
    for i, spec in enumerate(cfg.conv_layers):
        h = loop_conv(h, w.params[f"conv.{i}.weight"], w.params[f"conv.{i}.bias"], spec)
    raw = h @ w.params["head.weight"] + w.params["head.bias"]
    mag, phase = np.abs(raw[:, : cfg.n_bins]), raw[:, cfg.n_bins :]
    expect = loop_istft(mag, phase, cfg.n_fft, cfg.hop)
    assert np.max(np.abs(offline_decode(toks, w) - expect)) < 1e-6


def test_stream_equals_offline_and_first_emission():
    w = VocoderWeights.init(StreamConfig(), seed=5)
    toks = random_tokens(30, 66, 6)
    wave, sizes = stream_decode(toks, w)
    off = offline_decode(toks, w)
    assert wave.shape == off.shape and np.max(np.abs(wave - off)) < 1e-6
    assert sizes[:2] == [0, 0] and all(s == 16 for s in sizes[2:])


@given(
    st.lists(st.tuples(st.integers(1, 5), st.integers(0, 4)), min_size=0, max_size=3),
    st.integers(1, 25),
    st.integers(0, 1000),
)
def test_stream_invariants_random_configs(layers, n, seed):
    convs = tuple(ConvSpec(k, min(la, k - 1)) for k, la in layers)
    cfg = StreamConfig(vocab_size=12, dim=8, n_heads=2, ffn_dim=16, n_blocks=1, conv_layers=convs, max_frames=64)
    w = VocoderWeights.init(cfg, seed=seed)
    lat = cfg.total_lookahead_frames
    state = stream_init(w)
    parts = []
    for i, t in enumerate(random_tokens(n, 12, seed)):
        out = stream_push(state, t, w)
        assert state.samples_out == max(0, state.frames_in - lat) * cfg.hop
        assert len(out) == (cfg.hop if i >= lat else 0)
        parts.append(out)
    parts.append(stream_flush(state, w))
    wave = np.concatenate(parts)
    off = offline_decode(random_tokens(n, 12, seed), w)
    assert len(wave) == len(off) == n * cfg.hop
    assert np.max(np.abs(wave - off)) < 1e-6


def test_fully_causal_emits_every_push():
    cfg = StreamConfig(vocab_size=12, dim=8, n_heads=2, ffn_dim=16, n_blocks=1, conv_layers=((3, 0), (5, 0)))
    w = VocoderWeights.init(cfg, seed=7)
    _, sizes = stream_decode(random_tokens(10, 12, 7), w)
    assert sizes == [cfg.hop] * 10


def test_flush_boundaries():
    w = VocoderWeights.init(StreamConfig(), seed=8)
    state = stream_init(w)
    assert stream_flush(state, w).size == 0
    with pytest.raises(StateError):
        stream_flush(state, w)
    with pytest.raises(StateError):
        stream_push(state, 1, w)
    state = stream_init(w)
    for t in (4, 9):
        assert stream_push(state, t, w).size == 0
    assert stream_flush(state, w).size == 2 * 16


def test_causality_probe():
    cfg = StreamConfig()
    w = VocoderWeights.init(cfg, seed=9)
    lat, hop = cfg.total_lookahead_frames, cfg.hop
    a = random_tokens(24, 66, 10)
    for j in (3, 10, 20):
        b = list(a)
        b[j] = (b[j] + 1) % 66
        wa, _ = stream_decode(a, w)
        wb, _ = stream_decode(b, w)
        cut = (j - lat) * hop
        assert np.array_equal(wa[:cut], wb[:cut])
        assert np.any(wa[cut:] != wb[cut:])
        oa, ob = offline_decode(a, w), offline_decode(b, w)
        assert np.max(np.abs(oa[:cut] - ob[:cut])) < 1e-12


def test_single_bin_closed_form():
    cfg = StreamConfig()
    n, hop = cfg.n_fft, cfg.hop
    norm = 1.5
    for k, amp, ph in ((3, 2.0, 0.4), (0, 1.0, 0.0), (7, 0.5, -1.2)):
        mag = np.zeros(cfg.n_bins)
        phase = np.zeros(cfg.n_bins)
        mag[k], phase[k] = amp, ph
        got = istft_synthesize([SpectralFrame(mag, phase)], cfg)
        scale = (1.0 if k == 0 else 2.0) * amp / n
        expect = [scale * math.cos(2 * math.pi * k * i / n + ph) * (0.5 - 0.5 * math.cos(2 * math.pi * i / n)) / norm for i in range(hop)]
        assert np.max(np.abs(got - expect)) < 1e-14


def test_zero_magnitude_is_silent():
    cfg = StreamConfig()
    phase = np.random.default_rng(0).uniform(-3, 3, (5, cfg.n_bins))
    assert np.all(istft_synthesize((np.zeros((5, cfg.n_bins)), phase), cfg) == 0.0)
    assert istft_synthesize([], cfg).size == 0
    with pytest.raises(InputError):
        SpectralFrame(np.array([-1.0]), np.array([0.0]))


def test_stft_round_trip_interior():
    cfg = StreamConfig()
    x = np.random.default_rng(11).standard_normal(640)
    y = istft_synthesize(stft(x, cfg), cfg)
    inner = slice(cfg.n_fft - cfg.hop, len(x) - cfg.n_fft)
    assert np.max(np.abs(y[inner] - x[inner])) < 1e-8


def test_wav_and_spectral_dump(tmp_path):
    w = VocoderWeights.init(StreamConfig(), seed=12)
    toks = random_tokens(8, 66, 12)
    wave = offline_decode(toks, w)
    write_wav(tmp_path / "a.wav", wave, 22050)
    rate, data = wavfile.read(tmp_path / "a.wav")
    assert rate == 22050 and data.dtype == np.float32
    assert np.array_equal(data, wave.astype(np.float32))
    write_spectral_dump(tmp_path / "a.csv", decode_frames(toks, w))
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["frame", "bin", "magnitude", "phase"] and len(rows) == 1 + 8 * 33


def test_weights_round_trip(tmp_path):
    cfg = StreamConfig()
    w = VocoderWeights.init(cfg, seed=13)
    w.save(tmp_path / "v.npz")
    w2 = VocoderWeights.load(tmp_path / "v.npz", cfg)
    assert w2.params.keys() == w.params.keys()
    assert all(np.array_equal(w.params[k], w2.params[k]) for k in w.params)
