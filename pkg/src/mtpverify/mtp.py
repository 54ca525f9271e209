"""Cascaded multi-token-prediction heads sharing the backbone's LM head.

Module ``k`` is a bias-free ``dim -> dim`` projector followed by one decoder
block. It reads the hidden states of level ``k - 1`` (level 0 is the
backbone) over the whole causal prefix and emits level ``k``. Its logits come
from the backbone's own LM head weight, so head ``k`` drafts the token
``k + 1`` steps past the position it reads.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Backbone, HiddenStates, KVCache, ModelConfig, content_hash, new_kv_cache
from .blocks import block_forward, block_shapes, block_step, init_block
from .checkpoint import read_checkpoint, unflatten, write_checkpoint
from .errors import CheckpointError, ContractError, ParameterError


def mtp_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for k in range(1, cfg.n_mtp_modules + 1):
        shapes[f"mtp.{k}.proj"] = (cfg.dim, cfg.dim)
        for name, shape in block_shapes(cfg.dim, cfg.ffn_dim).items():
            shapes[f"mtp.{k}.block.{name}"] = shape
    return shapes


@dataclass
class CascadeState:
    """One single-layer KV cache per MTP module, all at the same length."""

    caches: list[KVCache]
    current_len: int = 0

    def truncate(self, new_len: int) -> "CascadeState":
        if new_len > self.current_len:
            raise ParameterError(f"cannot truncate cascade of length {self.current_len} to {new_len}")
        for c in self.caches:
            c.truncate(new_len)
        self.current_len = new_len
        return self


@dataclass
class Draft:
    level: int
    logits: np.ndarray
    hidden: np.ndarray


class MTPCascade:
    """The trainable draft heads attached to a frozen :class:`Backbone`."""

    def __init__(self, backbone: Backbone, params: dict[str, np.ndarray]):
        cfg = backbone.cfg
        for name, shape in mtp_shapes(cfg).items():
            if name not in params:
                raise CheckpointError(f"MTP weights missing {name!r}")
            if params[name].shape != shape:
                raise ParameterError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.backbone = backbone
        self.cfg = cfg
        self.params = {name: params[name] for name in mtp_shapes(cfg)}
        self._blocks = [None] + [
            {n[len(f"mtp.{k}.block."):]: v for n, v in self.params.items() if n.startswith(f"mtp.{k}.block.")}
            for k in range(1, cfg.n_mtp_modules + 1)
        ]

    @classmethod
    def init(cls, backbone: Backbone, seed: int = 0, dtype=np.float32) -> "MTPCascade":
        cfg = backbone.cfg
        gen = np.random.default_rng(seed)
        params = {}
        for k in range(1, cfg.n_mtp_modules + 1):
            params[f"mtp.{k}.proj"] = (gen.standard_normal((cfg.dim, cfg.dim)) / np.sqrt(cfg.dim)).astype(dtype)
            for name, arr in init_block(gen, cfg.dim, cfg.ffn_dim, 1, dtype).items():
                params[f"mtp.{k}.block.{name}"] = arr
        return cls(backbone, params)

    @property
    def n_modules(self) -> int:
        return self.cfg.n_mtp_modules

    def proj(self, k: int) -> np.ndarray:
        return self.params[f"mtp.{k}.proj"]

    def block(self, k: int) -> dict[str, np.ndarray]:
        return self._blocks[k]

    def lm_head(self, hidden: np.ndarray) -> np.ndarray:
        return self.backbone.lm_head(hidden)

    def content_hash(self) -> str:
        return content_hash(self.params)

    def save(self, path: str | Path) -> None:
        write_checkpoint(path, self.cfg.header(), self.params)

    @classmethod
    def load(cls, path: str | Path, backbone: Backbone, dtype=np.float32) -> "MTPCascade":
        header, blocks = read_checkpoint(path)
        cfg = ModelConfig.from_header(header)
        if cfg != backbone.cfg:
            raise CheckpointError(f"MTP checkpoint config {cfg} does not match backbone {backbone.cfg}")
        params = unflatten(blocks, mtp_shapes(cfg))
        return cls(backbone, {k: v.astype(dtype) for k, v in params.items()})

    # -- whole-sequence evaluation ------------------------------------------

    def mtp_forward(self, k: int, h_prev: HiddenStates) -> HiddenStates:
        """Map level ``k - 1`` hidden states of a whole sequence to level ``k``."""
        if not 1 <= k <= self.n_modules:
            raise ContractError(f"module index {k} outside 1..{self.n_modules}")
        if h_prev.level != k - 1:
            raise ContractError(f"module {k} needs level {k - 1} input, got level {h_prev.level}")
        x = np.asarray(h_prev.values, dtype=np.float64) @ self.proj(k)
        return HiddenStates(k, block_forward(self.block(k), x, self.cfg.n_heads))

    def cascade_full(self, h0: HiddenStates) -> list[HiddenStates]:
        """All levels ``1..n`` for a whole sequence."""
        out, h = [], h0
        for k in range(1, self.n_modules + 1):
            h = self.mtp_forward(k, h)
            out.append(h)
        return out

    # -- incremental drafting -------------------------------------------------

    def new_state(self) -> CascadeState:
        c = self.cfg
        return CascadeState([new_kv_cache(1, c.n_heads, c.max_seq_len, c.head_dim) for _ in range(self.n_modules)])

    def advance(self, state: CascadeState, new_hidden: np.ndarray, start_pos: int) -> list[np.ndarray]:
        """Push backbone hidden rows for positions ``start_pos...`` through every module.

        Returns the new level-``k`` rows for ``k = 1..n``.
        """
        if start_pos != state.current_len:
            raise ContractError(f"cascade is at position {state.current_len}, hidden rows start at {start_pos}")
        h = np.asarray(new_hidden, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] == 0:
            raise ContractError("advance needs at least one hidden row")
        levels = []
        for k in range(1, self.n_modules + 1):
            cache = state.caches[k - 1]
            h = block_step(self.block(k), h @ self.proj(k), self.cfg.n_heads, cache.keys[0], cache.values[0], state.current_len)
            cache.current_len = state.current_len + len(h)
            levels.append(h)
        state.current_len += len(new_hidden)
        return levels

    def speculate(self, state: CascadeState, new_hidden: np.ndarray, start_pos: int) -> list[Draft]:
        """Draft logits for every module at the last backbone position.

        ``new_hidden`` holds the backbone hidden states not yet seen by the
        cascade; its last row is the backbone's most recent position. Module 1
        reads that row, module ``k`` reads module ``k - 1``'s output at the
        same step.
        """
        levels = self.advance(state, new_hidden, start_pos)
        return [Draft(k, self.lm_head(levels[k - 1][-1]), levels[k - 1][-1]) for k in range(1, self.n_modules + 1)]
