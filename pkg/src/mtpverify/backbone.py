"""Frozen decoder-only transformer used as the trusted verifier."""

from __future__ import annotations

import hashlib
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .blocks import block_backward, block_forward, block_shapes, block_step, init_block, _rms, _rms_backward
from .checkpoint import read_checkpoint, unflatten, write_checkpoint
from .errors import CapacityError, CheckpointError, InputError, ParameterError, ShapeError
from .nn_core import NORM_EPS


@dataclass(frozen=True)
class ModelConfig:
    """Model dimensions. The last two vocabulary ids are reserved for EOS and PAD."""

    vocab_size: int = 66
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 512
    n_mtp_modules: int = 2

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ParameterError("vocab_size must be >= 4")
        if self.dim % self.n_heads:
            raise ParameterError("dim must be divisible by n_heads")
        if (self.dim // self.n_heads) % 2:
            raise ParameterError("head dimension must be even for rotary embeddings")
        if self.n_mtp_modules < 1:
            raise ParameterError("n_mtp_modules must be >= 1")
        if min(self.n_layers, self.ffn_dim, self.max_seq_len) < 1:
            raise ParameterError("n_layers, ffn_dim and max_seq_len must be positive")

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    @property
    def n_regular(self) -> int:
        return self.vocab_size - 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    def header(self) -> tuple[int, ...]:
        return astuple(self)

    @classmethod
    def from_header(cls, header) -> "ModelConfig":
        return cls(*(int(v) for v in header))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HiddenStates:
    """Last hidden states of one cascade level, one row per position."""

    level: int
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class KVCache:
    """Per-layer rotated keys and values for one decoding session."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    current_len: int = 0

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[1]

    def truncate(self, new_len: int) -> "KVCache":
        if new_len < 0 or new_len > self.current_len:
            raise ParameterError(f"cannot truncate cache of length {self.current_len} to {new_len}")
        self.current_len = new_len
        return self

    def snapshot(self) -> list[np.ndarray]:
        n = self.current_len
        return [k[:, :n].copy() for k in self.keys] + [v[:, :n].copy() for v in self.values]


def new_kv_cache(n_layers: int, n_heads: int, max_len: int, head_dim: int) -> KVCache:
    shape = (n_heads, max_len, head_dim)
    return KVCache([np.zeros(shape) for _ in range(n_layers)], [np.zeros(shape) for _ in range(n_layers)])


def backbone_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"embed": (cfg.vocab_size, cfg.dim)}
    for i in range(cfg.n_layers):
        for name, shape in block_shapes(cfg.dim, cfg.ffn_dim).items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_norm"] = (cfg.dim,)
    shapes["lm_head"] = (cfg.vocab_size, cfg.dim)
    return shapes


def content_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class Backbone:
    """Decoder-only transformer with a bias-free LM head.

    ``params`` is a flat name -> array mapping matching :func:`backbone_shapes`.
    After :meth:`freeze` every array is read-only, so accidental in-place
    updates raise instead of silently corrupting the verifier.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        expected = backbone_shapes(cfg)
        for name, shape in expected.items():
            if name not in params:
                raise CheckpointError(f"backbone is missing {name!r}")
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = {name: params[name] for name in expected}
        self._layers = [self._collect_layer(i) for i in range(cfg.n_layers)]
        self._frozen = False

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "Backbone":
        gen = np.random.default_rng(seed)
        params = {"embed": (gen.standard_normal((cfg.vocab_size, cfg.dim))).astype(dtype)}
        for i in range(cfg.n_layers):
            for name, arr in init_block(gen, cfg.dim, cfg.ffn_dim, cfg.n_layers, dtype).items():
                params[f"layers.{i}.{name}"] = arr
        params["final_norm"] = np.ones(cfg.dim, dtype=dtype)
        params["lm_head"] = (gen.standard_normal((cfg.vocab_size, cfg.dim)) / np.sqrt(cfg.dim)).astype(dtype)
        return cls(cfg, params)

    # -- weights -----------------------------------------------------------

    def _collect_layer(self, i: int) -> dict[str, np.ndarray]:
        pre = f"layers.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def layer(self, i: int) -> dict[str, np.ndarray]:
        return self._layers[i]

    @property
    def head_weight(self) -> np.ndarray:
        return self.params["lm_head"]

    def freeze(self) -> "Backbone":
        for arr in self.params.values():
            arr.flags.writeable = False
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def content_hash(self) -> str:
        return content_hash(self.params)

    def save(self, path: str | Path) -> None:
        write_checkpoint(path, self.cfg.header(), self.params)

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "Backbone":
        header, blocks = read_checkpoint(path)
        cfg = ModelConfig.from_header(header)
        params = unflatten(blocks, backbone_shapes(cfg))
        return cls(cfg, {k: v.astype(dtype) for k, v in params.items()}).freeze()

    # -- inference ---------------------------------------------------------

    def _check_tokens(self, tokens, allow_empty: bool = False) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64)
        if toks.ndim != 1:
            raise ShapeError("expected a 1-D token sequence")
        if toks.size == 0 and not allow_empty:
            raise InputError("empty token sequence")
        if toks.size and (toks.min() < 0 or toks.max() >= self.cfg.vocab_size):
            raise InputError(f"token id outside [0, {self.cfg.vocab_size})")
        return toks

    def lm_head(self, hidden: np.ndarray) -> np.ndarray:
        """Project hidden vectors (``(..., dim)``) to vocabulary logits."""
        hidden = np.asarray(hidden, dtype=np.float64)
        if hidden.shape[-1] != self.cfg.dim:
            raise ShapeError(f"lm_head expects {self.cfg.dim} features, got {hidden.shape[-1]}")
        return hidden @ self.params["lm_head"].T

    def hidden_batch(self, tokens: np.ndarray) -> np.ndarray:
        """Level-0 hidden states for a ``(B, T)`` batch, no gradient bookkeeping."""
        x = self.params["embed"][np.asarray(tokens)].astype(np.float64)
        t = x.shape[1]
        for i in range(self.cfg.n_layers):
            x = block_forward(self.layer(i), x, self.cfg.n_heads, np.arange(t))
        out, _, _ = _rms(x, self.params["final_norm"], NORM_EPS)
        return out

    def forward_full(self, tokens) -> tuple[np.ndarray, HiddenStates]:
        """Causal forward over a whole sequence; ``logits[i]`` predicts token ``i + 1``."""
        toks = self._check_tokens(tokens)
        if toks.size > self.cfg.max_seq_len:
            raise CapacityError(f"{toks.size} tokens exceed max_seq_len={self.cfg.max_seq_len}")
        h = self.hidden_batch(toks[None])[0]
        return self.lm_head(h), HiddenStates(0, h)

    def new_cache(self) -> KVCache:
        c = self.cfg
        return new_kv_cache(c.n_layers, c.n_heads, c.max_seq_len, c.head_dim)

    def forward_incremental(self, cache: KVCache, new_tokens) -> tuple[np.ndarray, HiddenStates]:
        """Extend ``cache`` by ``new_tokens``; returns logits and hidden states for them only."""
        toks = self._check_tokens(new_tokens, allow_empty=True)
        if toks.size == 0:
            return np.zeros((0, self.cfg.vocab_size)), HiddenStates(0, np.zeros((0, self.cfg.dim)))
        start = cache.current_len
        if start + toks.size > min(self.cfg.max_seq_len, cache.capacity):
            raise CapacityError(f"cache length {start} + {toks.size} exceeds max_seq_len={self.cfg.max_seq_len}")
        x = self.params["embed"][toks].astype(np.float64)
        for i in range(self.cfg.n_layers):
            x = block_step(self.layer(i), x, self.cfg.n_heads, cache.keys[i], cache.values[i], start)
        cache.current_len = start + toks.size
        h, _, _ = _rms(x, self.params["final_norm"], NORM_EPS)
        return self.lm_head(h), HiddenStates(0, h)

    def truncate_cache(self, cache: KVCache, new_len: int) -> KVCache:
        return cache.truncate(new_len)

    # -- training (used only to obtain a backbone before freezing) ---------

    def train_forward(self, tokens: np.ndarray):
        """Forward a ``(B, T)`` batch keeping everything :meth:`train_backward` needs."""
        if self._frozen:
            raise ParameterError("backbone is frozen")
        tokens = np.asarray(tokens)
        x = self.params["embed"][tokens].astype(np.float64)
        t = tokens.shape[1]
        caches = []
        for i in range(self.cfg.n_layers):
            x, c = block_forward(self.layer(i), x, self.cfg.n_heads, np.arange(t), keep=True)
            caches.append(c)
        h, xn, inv = _rms(x, self.params["final_norm"], NORM_EPS)
        return self.lm_head(h), (tokens, caches, h, xn, inv)

    def train_backward(self, ctx, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        tokens, caches, h, xn, inv = ctx
        grads = {}
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        grads["lm_head"] = flat(dlogits).T @ flat(h)
        dh = dlogits @ self.params["lm_head"]
        dx, grads["final_norm"] = _rms_backward(dh, xn, inv, self.params["final_norm"])
        for i in reversed(range(self.cfg.n_layers)):
            dx, g = block_backward(self.layer(i), caches[i], dx, self.cfg.n_heads)
            for name, val in g.items():
                grads[f"layers.{i}.{name}"] = val
        gembed = np.zeros(self.params["embed"].shape)
        np.add.at(gembed, tokens.ravel(), flat(dx))
        grads["embed"] = gembed
        return grads
