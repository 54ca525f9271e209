"""Small numeric kernels shared by every model in the package.

All kernels are pure functions of their inputs. They work on numpy arrays
and treat the last axis as the feature axis, so a 1-D vector is just the
simplest case of a batched call.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

ROPE_BASE = 10000.0
NORM_EPS = 1e-6


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax, stabilised by subtracting the max."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def rms_norm(x: np.ndarray, gain: np.ndarray, epsilon: float = NORM_EPS) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + epsilon)`` over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm: x has {x.shape[-1]} features, gain has {gain.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + epsilon)
    return gain * (x * inv)


def rotary_angles(positions: np.ndarray, dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotation angles, shape ``(len(positions), dim // 2)``."""
    inv_freq = 1.0 / base ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rope(x: np.ndarray, positions: np.ndarray, base: float = ROPE_BASE, inverse: bool = False) -> np.ndarray:
    """Rotate interleaved feature pairs of ``x`` (shape ``(..., T, d)``).

    ``positions`` has length ``T``. ``inverse=True`` applies the transpose
    rotation, which is what backpropagation needs.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotary embedding needs an even feature size, got {d}")
    ang = rotary_angles(positions, d, base)
    cos, sin = np.cos(ang), np.sin(ang)
    if inverse:
        sin = -sin
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty(x.shape, dtype=np.result_type(x, np.float64))
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rotary_apply(q: np.ndarray, k_vec: np.ndarray, position: int, base: float = ROPE_BASE) -> tuple[np.ndarray, np.ndarray]:
    """Rotate a single query/key pair for one sequence position."""
    q = np.asarray(q, dtype=np.float64)
    k_vec = np.asarray(k_vec, dtype=np.float64)
    if q.shape[-1] % 2 or k_vec.shape[-1] % 2:
        raise ShapeError("rotary_apply needs even-length vectors")
    pos = np.array([position])
    return rope(q[None], pos, base)[0], rope(k_vec[None], pos, base)[0]


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox generator, whose output depends only on the key
    and counter, so the same key gives the same draws on every platform.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self) -> float:
        return float(self._gen.random())

    def spawn(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
