"""Pre-norm causal decoder block (RMSNorm, rotary MHA, SwiGLU) with backward pass.

A block is a plain ``dict`` of arrays keyed by :data:`BLOCK_PARAMS`. Weights
are stored in whatever float dtype the owner chose; activations are always
computed in float64.

Two forward entry points exist:

* :func:`block_forward` works on a batch ``(B, T, D)`` of full sequences and
  can keep the intermediates needed by :func:`block_backward`.
* :func:`block_step` works on one sequence and reads/writes a preallocated
  key/value buffer, which is how incremental decoding runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import NORM_EPS, ROPE_BASE, rope, sigmoid

BLOCK_PARAMS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


def block_shapes(dim: int, ffn_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "attn_norm": (dim,),
        "wq": (dim, dim),
        "wk": (dim, dim),
        "wv": (dim, dim),
        "wo": (dim, dim),
        "ffn_norm": (dim,),
        "w_gate": (dim, ffn_dim),
        "w_up": (dim, ffn_dim),
        "w_down": (ffn_dim, dim),
    }


def init_block(gen: np.random.Generator, dim: int, ffn_dim: int, depth: int = 1, dtype=np.float32) -> dict[str, np.ndarray]:
    """Random block weights; output projections are shrunk by ``sqrt(2 * depth)``."""
    out_scale = 1.0 / np.sqrt(2.0 * depth)
    p = {}
    for name, shape in block_shapes(dim, ffn_dim).items():
        if len(shape) == 1:
            p[name] = np.ones(shape, dtype=dtype)
            continue
        std = 1.0 / np.sqrt(shape[0])
        if name in ("wo", "w_down"):
            std *= out_scale
        p[name] = (gen.standard_normal(shape) * std).astype(dtype)
    return p


def _rms(x: np.ndarray, gain: np.ndarray, eps: float):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xn = x * inv
    return gain * xn, xn, inv


def _rms_backward(dy: np.ndarray, xn: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    u = dy * gain
    d = xn.shape[-1]
    dx = inv * (u - xn * np.sum(u * xn, axis=-1, keepdims=True) / d)
    dgain = np.sum(dy * xn, axis=tuple(range(dy.ndim - 1)))
    return dx, dgain


def _split(x: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge(x: np.ndarray) -> np.ndarray:
    *lead, h, t, hd = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, h * hd)


@dataclass
class BlockCache:
    """Intermediates from :func:`block_forward` that the backward pass needs."""

    x: np.ndarray
    n1: np.ndarray
    xn1: np.ndarray
    inv1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn: np.ndarray
    h: np.ndarray
    n2: np.ndarray
    xn2: np.ndarray
    inv2: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    act: np.ndarray
    mid: np.ndarray
    positions: np.ndarray


def _causal_mask(t_q: int, t_k: int) -> np.ndarray:
    # query i sits at absolute position t_k - t_q + i
    offset = t_k - t_q
    return np.arange(t_k)[None, :] > (np.arange(t_q)[:, None] + offset)


def _ffn(p, h, eps):
    n2, xn2, inv2 = _rms(h, p["ffn_norm"], eps)
    gate = n2 @ p["w_gate"]
    up = n2 @ p["w_up"]
    act = gate * sigmoid(gate)
    mid = act * up
    return h + mid @ p["w_down"], (n2, xn2, inv2, gate, up, act, mid)


def block_forward(
    p: dict[str, np.ndarray],
    x: np.ndarray,
    n_heads: int,
    positions: np.ndarray | None = None,
    *,
    keep: bool = False,
    eps: float = NORM_EPS,
    base: float = ROPE_BASE,
):
    """Full-sequence causal forward of one block.

    ``x`` is ``(B, T, D)`` (a 2-D ``(T, D)`` input is treated as ``B = 1``).
    Returns the output, plus a :class:`BlockCache` when ``keep`` is set.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[1]
    if positions is None:
        positions = np.arange(t)
    hd = x.shape[-1] // n_heads

    n1, xn1, inv1 = _rms(x, p["attn_norm"], eps)
    q = rope(_split(n1 @ p["wq"], n_heads), positions, base)
    k = rope(_split(n1 @ p["wk"], n_heads), positions, base)
    v = _split(n1 @ p["wv"], n_heads)

    scores = (q @ k.swapaxes(-1, -2)) / np.sqrt(hd)
    scores = np.where(_causal_mask(t, t), -np.inf, scores)
    scores -= np.max(scores, axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= np.sum(probs, axis=-1, keepdims=True)
    attn = _merge(probs @ v)
    h = x + attn @ p["wo"]

    out, (n2, xn2, inv2, gate, up, act, mid) = _ffn(p, h, eps)
    if squeeze:
        out = out[0]
    if not keep:
        return out
    cache = BlockCache(x, n1, xn1, inv1, q, k, v, probs, attn, h, n2, xn2, inv2, gate, up, act, mid, np.asarray(positions))
    return out, cache


def block_backward(p: dict[str, np.ndarray], c: BlockCache, dout: np.ndarray, n_heads: int, base: float = ROPE_BASE):
    """Backpropagate ``dout`` (``(B, T, D)``) through one block.

    Returns ``(dx, grads)`` where ``grads`` has one entry per block weight.
    """
    g = {}
    hd = c.x.shape[-1] // n_heads
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731

    # feed-forward branch
    dmid = dout @ p["w_down"].T
    g["w_down"] = flat(c.mid).T @ flat(dout)
    dact = dmid * c.up
    dup = dmid * c.act
    sg = sigmoid(c.gate)
    dgate = dact * (sg * (1.0 + c.gate * (1.0 - sg)))
    g["w_gate"] = flat(c.n2).T @ flat(dgate)
    g["w_up"] = flat(c.n2).T @ flat(dup)
    dn2 = dgate @ p["w_gate"].T + dup @ p["w_up"].T
    dh_norm, g["ffn_norm"] = _rms_backward(dn2, c.xn2, c.inv2, p["ffn_norm"])
    dh = dout + dh_norm

    # attention branch
    g["wo"] = flat(c.attn).T @ flat(dh)
    dattn = _split(dh @ p["wo"].T, n_heads)
    dprobs = dattn @ c.v.swapaxes(-1, -2)
    dv = c.probs.swapaxes(-1, -2) @ dattn
    dscores = c.probs * (dprobs - np.sum(dprobs * c.probs, axis=-1, keepdims=True))
    dscores /= np.sqrt(hd)
    dq = rope(dscores @ c.k, c.positions, base, inverse=True)
    dk = rope(dscores.swapaxes(-1, -2) @ c.q, c.positions, base, inverse=True)
    dq, dk, dv = _merge(dq), _merge(dk), _merge(dv)
    g["wq"] = flat(c.n1).T @ flat(dq)
    g["wk"] = flat(c.n1).T @ flat(dk)
    g["wv"] = flat(c.n1).T @ flat(dv)
    dn1 = dq @ p["wq"].T + dk @ p["wk"].T + dv @ p["wv"].T
    dx_norm, g["attn_norm"] = _rms_backward(dn1, c.xn1, c.inv1, p["attn_norm"])
    return dh + dx_norm, g


def block_step(
    p: dict[str, np.ndarray],
    x: np.ndarray,
    n_heads: int,
    k_buf: np.ndarray,
    v_buf: np.ndarray,
    start: int,
    *,
    eps: float = NORM_EPS,
    base: float = ROPE_BASE,
) -> np.ndarray:
    """Incremental forward of ``x`` (``(T_new, D)``) for one sequence.

    ``k_buf``/``v_buf`` are ``(H, max_len, hd)`` buffers whose first ``start``
    rows hold the rotated keys and values of earlier positions. The new keys
    and values are written in place at ``start:start + T_new``.
    """
    x = np.asarray(x, dtype=np.float64)
    t_new = x.shape[0]
    end = start + t_new
    hd = x.shape[-1] // n_heads
    positions = np.arange(start, end)

    n1, _, _ = _rms(x, p["attn_norm"], eps)
    q = rope(_split(n1 @ p["wq"], n_heads), positions, base)
    k_buf[:, start:end] = rope(_split(n1 @ p["wk"], n_heads), positions, base)
    v_buf[:, start:end] = _split(n1 @ p["wv"], n_heads)
    keys = k_buf[:, :end]
    vals = v_buf[:, :end]

    scores = (q @ keys.swapaxes(-1, -2)) / np.sqrt(hd)
    if t_new > 1:
        scores = np.where(_causal_mask(t_new, end), -np.inf, scores)
    scores -= np.max(scores, axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= np.sum(probs, axis=-1, keepdims=True)
    h = x + _merge(probs @ vals) @ p["wo"]
    out, _ = _ffn(p, h, eps)
    return out
