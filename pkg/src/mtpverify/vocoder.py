"""Streaming token-to-waveform decoder with an iSTFT overlap-add head.

Tokens are embedded, passed through causal decoder blocks, then a stack of
residual 1-D convolutions. Each conv layer has a fixed left context and an
optional right lookahead (in frames). A linear head maps every frame to STFT
magnitude and phase, and the iSTFT head turns frames into ``hop`` samples
each.

Boundary policy: conv inputs before the first frame and (at flush) after the
last frame are zeros. Output sample ``n`` of frame ``f`` is the overlap-add
sum at ``f * hop + n``, which is complete as soon as frame ``f`` exists, so
the iSTFT adds no delay. Total latency is the sum of the conv lookaheads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile

from .backbone import new_kv_cache
from .blocks import block_forward, block_step, init_block
from .errors import ConfigurationError, InputError, StateError


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    lookahead: int

    @property
    def left(self) -> int:
        return self.kernel - 1 - self.lookahead


@dataclass(frozen=True)
class StreamConfig:
    n_fft: int = 64
    hop: int = 16
    vocab_size: int = 66
    dim: int = 32
    n_heads: int = 4
    ffn_dim: int = 128
    n_blocks: int = 2
    conv_layers: tuple[ConvSpec, ...] = (ConvSpec(7, 0), ConvSpec(7, 2), ConvSpec(7, 0))
    max_frames: int = 4096
    sample_rate: int = 16000

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ConfigurationError("need 0 < hop <= n_fft")
        if self.n_fft % 2:
            raise ConfigurationError("n_fft must be even")
        # normalise lists from JSON into hashable tuples
        object.__setattr__(self, "conv_layers", tuple(c if isinstance(c, ConvSpec) else _conv_from(c) for c in self.conv_layers))
        for c in self.conv_layers:
            if c.kernel < 1 or not 0 <= c.lookahead < c.kernel:
                raise ConfigurationError(f"invalid conv layer {c}")
        cola_constant(hann_window(self.n_fft), self.hop)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def total_lookahead_frames(self) -> int:
        return sum(c.lookahead for c in self.conv_layers)

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        d = dict(d)
        if "conv_layers" in d:
            d["conv_layers"] = tuple(_conv_from(c) for c in d["conv_layers"])
        return cls(**d)


def _conv_from(c) -> ConvSpec:
    """Accept ``{kernel, lookahead}``, ``[kernel, lookahead]`` or ``[kernel, left, lookahead]``."""
    if isinstance(c, dict):
        c = dict(c)
        left = c.pop("left", None)
        spec = ConvSpec(**c)
    elif len(c) == 3:
        left = c[1]
        spec = ConvSpec(c[0], c[2])
    else:
        left = None
        spec = ConvSpec(*c)
    if left is not None and left != spec.left:
        raise ConfigurationError(f"conv layer {c}: left context must be kernel - 1 - lookahead = {spec.left}")
    return spec


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def cola_constant(window: np.ndarray, hop: int, tol: float = 1e-10) -> float:
    """Return the constant overlap-add sum of ``window**2`` at ``hop``.

    This is the synthesis normaliser, so it must be constant; otherwise
    :class:`ConfigurationError` is raised.
    """
    n = len(window)
    acc = np.zeros(hop)
    sq = window * window
    for start in range(0, n, hop):
        seg = sq[start : start + hop]
        acc[: len(seg)] += seg
    if np.max(acc) - np.min(acc) > tol * max(1.0, float(np.max(acc))):
        raise ConfigurationError(f"window/hop pair (n_fft={n}, hop={hop}) is not constant overlap-add")
    if acc.mean() <= 0:
        raise ConfigurationError("window has no energy")
    return float(acc.mean())


@dataclass
class SpectralFrame:
    magnitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise InputError("magnitude and phase lengths differ")
        if np.any(self.magnitude < 0):
            raise InputError("magnitude must be non-negative")


def _as_arrays(frames) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(frames, tuple):
        return np.asarray(frames[0], dtype=np.float64), np.asarray(frames[1], dtype=np.float64)
    if len(frames) == 0:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return np.stack([f.magnitude for f in frames]), np.stack([f.phase for f in frames])


def stft(x: np.ndarray, cfg: StreamConfig) -> list[SpectralFrame]:
    """Frames ``f`` cover ``x[f*hop : f*hop + n_fft]`` (zero padded at the end)."""
    x = np.asarray(x, dtype=np.float64)
    w = hann_window(cfg.n_fft)
    n_frames = max(1, int(np.ceil(len(x) / cfg.hop)))
    padded = np.concatenate([x, np.zeros(n_frames * cfg.hop + cfg.n_fft - len(x))])
    frames = []
    for f in range(n_frames):
        spec = np.fft.rfft(w * padded[f * cfg.hop : f * cfg.hop + cfg.n_fft])
        frames.append(SpectralFrame(np.abs(spec), np.angle(spec)))
    return frames


def _frame_segments(mag: np.ndarray, phase: np.ndarray, cfg: StreamConfig, norm: float) -> np.ndarray:
    spec = mag * np.exp(1j * phase)
    return np.fft.irfft(spec, n=cfg.n_fft, axis=-1) * (hann_window(cfg.n_fft) / norm)


def istft_synthesize(frames, cfg: StreamConfig) -> np.ndarray:
    """Inverse STFT by windowed overlap-add; returns ``len(frames) * hop`` samples."""
    mag, phase = _as_arrays(frames)
    n_frames = mag.shape[0]
    if n_frames == 0:
        return np.zeros(0)
    if mag.shape[1] != cfg.n_bins:
        raise InputError(f"frames have {mag.shape[1]} bins, config expects {cfg.n_bins}")
    norm = cola_constant(hann_window(cfg.n_fft), cfg.hop)
    segs = _frame_segments(mag, phase, cfg, norm)
    out = np.zeros((n_frames - 1) * cfg.hop + cfg.n_fft)
    for f in range(n_frames):
        out[f * cfg.hop : f * cfg.hop + cfg.n_fft] += segs[f]
    return out[: n_frames * cfg.hop]


# -- network weights ---------------------------------------------------------------


@dataclass
class VocoderWeights:
    cfg: StreamConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, cfg: StreamConfig, seed: int = 0, scale: float = 1.0) -> "VocoderWeights":
        gen = np.random.default_rng(seed)
        p = {"embed": gen.standard_normal((cfg.vocab_size, cfg.dim))}
        for b in range(cfg.n_blocks):
            for name, arr in init_block(gen, cfg.dim, cfg.ffn_dim, cfg.n_blocks, np.float64).items():
                p[f"blocks.{b}.{name}"] = arr
        for i, c in enumerate(cfg.conv_layers):
            p[f"conv.{i}.weight"] = gen.standard_normal((c.kernel, cfg.dim, cfg.dim)) * scale / np.sqrt(c.kernel * cfg.dim)
            p[f"conv.{i}.bias"] = np.zeros(cfg.dim)
        p["head.weight"] = gen.standard_normal((cfg.dim, 2 * cfg.n_bins)) * scale / np.sqrt(cfg.dim)
        p["head.bias"] = np.zeros(2 * cfg.n_bins)
        return cls(cfg, p)

    def block(self, b: int) -> dict[str, np.ndarray]:
        pre = f"blocks.{b}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.params)

    @classmethod
    def load(cls, path: str | Path, cfg: StreamConfig) -> "VocoderWeights":
        with np.load(path) as data:
            return cls(cfg, {k: data[k] for k in data.files})


def _silu(x):
    return x / (1.0 + np.exp(-x))


def conv_layer_offline(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Residual conv ``y_t = x_t + silu(sum_j W_j x_{t-left+j} + b)`` with zero padding."""
    t = x.shape[0]
    padded = np.concatenate([np.zeros((spec.left, x.shape[1])), x, np.zeros((spec.lookahead, x.shape[1]))])
    acc = np.zeros_like(x) + bias
    for j in range(spec.kernel):
        acc += padded[j : j + t] @ weight[j]
    return x + _silu(acc)


def _head(h: np.ndarray, w: VocoderWeights) -> tuple[np.ndarray, np.ndarray]:
    out = h @ w.params["head.weight"] + w.params["head.bias"]
    nb = w.cfg.n_bins
    return np.abs(out[..., :nb]), out[..., nb:]


def _check_tokens(tokens, cfg: StreamConfig) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    if toks.size > cfg.max_frames:
        raise InputError(f"{toks.size} tokens exceed max_frames={cfg.max_frames}")
    return toks


def decode_frames(tokens: Sequence[int], w: VocoderWeights) -> tuple[np.ndarray, np.ndarray]:
    """Offline spectral frames (magnitude, phase), each ``(T, n_bins)``."""
    cfg = w.cfg
    toks = _check_tokens(tokens, cfg)
    if toks.size == 0:
        return np.zeros((0, cfg.n_bins)), np.zeros((0, cfg.n_bins))
    h = w.params["embed"][toks].astype(np.float64)
    for b in range(cfg.n_blocks):
        h = block_forward(w.block(b), h, cfg.n_heads)
    for i, c in enumerate(cfg.conv_layers):
        h = conv_layer_offline(h, w.params[f"conv.{i}.weight"], w.params[f"conv.{i}.bias"], c)
    return _head(h, w)


def offline_decode(tokens: Sequence[int], w: VocoderWeights) -> np.ndarray:
    """Whole-utterance decode; ``len(tokens) * hop`` samples."""
    return istft_synthesize(decode_frames(tokens, w), w.cfg)


# -- streaming ---------------------------------------------------------------------


@dataclass
class VocoderStreamState:
    cfg: StreamConfig
    caches: list
    layer_inputs: list[list[np.ndarray]]
    layer_done: list[int]
    ola: np.ndarray
    frames_in: int = 0
    frames_out: int = 0
    samples_out: int = 0
    flushed: bool = False
    norm: float = 1.0
    spectra: list[SpectralFrame] = field(default_factory=list)


def stream_init(w: VocoderWeights) -> VocoderStreamState:
    cfg = w.cfg
    hd = cfg.dim // cfg.n_heads
    return VocoderStreamState(
        cfg=cfg,
        caches=[new_kv_cache(1, cfg.n_heads, cfg.max_frames, hd) for _ in range(cfg.n_blocks)],
        layer_inputs=[[] for _ in cfg.conv_layers],
        layer_done=[0] * len(cfg.conv_layers),
        ola=np.zeros(cfg.n_fft),
        norm=cola_constant(hann_window(cfg.n_fft), cfg.hop),
    )


def _conv_output(inputs: list[np.ndarray], o: int, weight, bias, spec: ConvSpec, dim: int, n_total: int | None) -> np.ndarray:
    acc = bias.astype(np.float64).copy()
    for j in range(spec.kernel):
        idx = o - spec.left + j
        if idx < 0 or (n_total is not None and idx >= n_total):
            continue
        acc += inputs[idx] @ weight[j]
    return inputs[o] + _silu(acc)


def _emit_frame(state: VocoderStreamState, h: np.ndarray, w: VocoderWeights) -> np.ndarray:
    cfg = state.cfg
    mag, phase = _head(h, w)
    state.spectra.append(SpectralFrame(mag, phase))
    seg = _frame_segments(mag[None], phase[None], cfg, state.norm)[0]
    state.ola += seg
    out = state.ola[: cfg.hop].copy()
    state.ola = np.concatenate([state.ola[cfg.hop :], np.zeros(cfg.hop)])
    state.frames_out += 1
    state.samples_out += cfg.hop
    return out


def _drain(state: VocoderStreamState, w: VocoderWeights, final: bool) -> list[np.ndarray]:
    cfg = state.cfg
    chunks = []
    n_layers = len(cfg.conv_layers)
    for i, spec in enumerate(cfg.conv_layers):
        inputs = state.layer_inputs[i]
        n_total = len(inputs) if final else None
        weight, bias = w.params[f"conv.{i}.weight"], w.params[f"conv.{i}.bias"]
        while state.layer_done[i] < len(inputs) and (final or state.layer_done[i] + spec.lookahead < len(inputs)):
            o = state.layer_done[i]
            y = _conv_output(inputs, o, weight, bias, spec, cfg.dim, n_total)
            state.layer_done[i] += 1
            if i + 1 < n_layers:
                state.layer_inputs[i + 1].append(y)
            else:
                chunks.append(_emit_frame(state, y, w))
    return chunks


def stream_push(state: VocoderStreamState, token: int, w: VocoderWeights) -> np.ndarray:
    """Feed one verified token; returns the samples that became final (possibly none)."""
    if state.flushed:
        raise StateError("stream already flushed")
    cfg = state.cfg
    tok = int(_check_tokens([token], cfg)[0])
    if state.frames_in >= cfg.max_frames:
        raise InputError("stream exceeds max_frames")
    h = w.params["embed"][tok][None].astype(np.float64)
    for b in range(cfg.n_blocks):
        cache = state.caches[b]
        h = block_step(w.block(b), h, cfg.n_heads, cache.keys[0], cache.values[0], state.frames_in)
        cache.current_len = state.frames_in + 1
    state.frames_in += 1
    if cfg.conv_layers:
        state.layer_inputs[0].append(h[0])
        chunks = _drain(state, w, final=False)
    else:
        chunks = [_emit_frame(state, h[0], w)]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def stream_flush(state: VocoderStreamState, w: VocoderWeights) -> np.ndarray:
    """Emit every withheld frame, treating future conv inputs as zeros."""
    if state.flushed:
        raise StateError("stream already flushed")
    state.flushed = True
    chunks = _drain(state, w, final=True) if state.cfg.conv_layers else []
    return np.concatenate(chunks) if chunks else np.zeros(0)


def stream_decode(tokens: Sequence[int], w: VocoderWeights) -> tuple[np.ndarray, list[int]]:
    """Push every token then flush; returns the waveform and per-push emission sizes."""
    state = stream_init(w)
    parts, sizes = [], []
    for t in tokens:
        out = stream_push(state, t, w)
        sizes.append(len(out))
        parts.append(out)
    parts.append(stream_flush(state, w))
    return np.concatenate(parts) if parts else np.zeros(0), sizes


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    """32-bit float mono RIFF/WAVE."""
    wavfile.write(str(path), int(sample_rate), np.asarray(samples, dtype=np.float32))


def write_spectral_dump(path: str | Path, frames) -> None:
    mag, phase = _as_arrays(frames)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "bin", "magnitude", "phase"])
        for f in range(mag.shape[0]):
            for b in range(mag.shape[1]):
                wr.writerow([f, b, repr(float(mag[f, b])), repr(float(phase[f, b]))])
