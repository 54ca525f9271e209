"""Seeded Markov token corpora and the generator-NLL quality proxy.

Regular tokens are ``0..vocab_size-1``; ``vocab_size`` is EOS and
``vocab_size + 1`` is PAD, so a model over this corpus uses
``ModelConfig.vocab_size == spec.vocab_size + 2``.

The order-``o`` transition logits are a sum of per-lag random tables,
``sharpness * sum_j E_j[x_{n-j}]``. That keeps the chain genuinely order ``o``
while staying learnable by a small transformer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, ScoringError
from .nn_core import RngStream, softmax

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    vocab_size: int = 64
    order: int = 2
    n_sequences: int = 2000
    min_len: int = 32
    max_len: int = 128
    eos_schedule: str = "linear"
    sharpness: float = 2.0
    deterministic: bool = False
    heldout_fraction: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 2 or self.order < 0:
            raise ParameterError("need vocab_size >= 2 and order >= 0")
        if not max(self.order, 1) <= self.min_len <= self.max_len:
            raise ParameterError("need max(order, 1) <= min_len <= max_len")
        if self.eos_schedule not in ("linear", "fixed"):
            raise ParameterError(f"unknown eos_schedule {self.eos_schedule!r}")
        if self.order > 3:
            raise ParameterError("order > 3 would need an impractically large transition table")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown corpus fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def eos_id(self) -> int:
        return self.vocab_size

    @property
    def pad_id(self) -> int:
        return self.vocab_size + 1

    @property
    def model_vocab_size(self) -> int:
        return self.vocab_size + 2


class MarkovSource:
    """The reference generator described by a :class:`CorpusSpec`."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec

    @cached_property
    def table(self) -> np.ndarray:
        """Next-token probabilities, shape ``(V,) * order + (V,)``.

        ``table[a, b]`` (order 2) is the distribution after ``... a b``.
        """
        s = self.spec
        v = s.vocab_size
        gen = np.random.Generator(np.random.Philox(key=np.array([s.seed, 0x7AB1E], dtype=np.uint64)))
        if s.order == 0:
            logits = s.sharpness * gen.standard_normal(v)
        else:
            lags = [gen.standard_normal((v, v)) for _ in range(s.order)]
            logits = np.zeros((v,) * (s.order + 1))
            for j, table in enumerate(lags, start=1):
                # lag j indexes axis order - j
                shape = [1] * (s.order + 1)
                shape[s.order - j] = v
                shape[-1] = v
                logits = logits + table.reshape(shape)
            logits *= s.sharpness
        if s.deterministic:
            probs = np.zeros_like(logits)
            np.put_along_axis(probs, np.argmax(logits, axis=-1)[..., None], 1.0, axis=-1)
            return probs
        return softmax(logits)

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        o = self.spec.order
        if o == 0:
            return self.table
        return self.table[tuple(context[-o:])]

    def eos_prob(self, n: int) -> float:
        """Probability that EOS follows ``n`` regular tokens."""
        s = self.spec
        if n < s.min_len:
            return 0.0
        if n >= s.max_len:
            return 1.0
        if s.eos_schedule == "fixed":
            return 0.0
        return (n - s.min_len + 1) / (s.max_len - s.min_len + 1)

    def sample_sequence(self, gen: np.random.Generator) -> list[int]:
        s = self.spec
        seq: list[int] = []
        while True:
            n = len(seq)
            p_eos = self.eos_prob(n)
            if p_eos > 0 and gen.random() < p_eos:
                seq.append(s.eos_id)
                return seq
            if n < s.order:
                seq.append(int(gen.integers(0, s.vocab_size)))
            else:
                p = self.next_dist(seq)
                seq.append(int(min(np.searchsorted(np.cumsum(p), gen.random(), side="right"), s.vocab_size - 1)))

    def token_prob(self, prefix: Sequence[int], token: int) -> float:
        s = self.spec
        n = len(prefix)
        p_eos = self.eos_prob(n)
        if token == s.eos_id:
            return p_eos
        if n < s.order:
            return (1.0 - p_eos) / s.vocab_size
        return (1.0 - p_eos) * float(self.next_dist(prefix)[token])

    def conditional_entropy(self, prefix: Sequence[int]) -> float:
        """Entropy (nats) of the next symbol, EOS included, after ``prefix``."""
        s = self.spec
        n = len(prefix)
        p_eos = self.eos_prob(n)
        if n < s.order:
            p = np.full(s.vocab_size, 1.0 / s.vocab_size)
        else:
            p = self.next_dist(prefix)
        p = np.append((1.0 - p_eos) * p, p_eos)
        p = p[p > 0]
        return float(-np.sum(p * np.log(p)))


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list[list[int]]
    heldout: list[list[int]]


def gen_corpus(spec: CorpusSpec) -> Corpus:
    """Generate the full corpus and split it train/held-out."""
    src = MarkovSource(spec)
    gen = RngStream(spec.seed, 3).generator
    seqs = [src.sample_sequence(gen) for _ in range(spec.n_sequences)]
    n_held = int(round(spec.n_sequences * spec.heldout_fraction))
    if spec.n_sequences > 1:
        n_held = min(max(n_held, 1), spec.n_sequences - 1)
    cut = spec.n_sequences - n_held
    return Corpus(spec, seqs[:cut], seqs[cut:])


def _write_seqs(path: Path, seqs: Iterable[Sequence[int]]) -> None:
    path.write_text("".join(" ".join(map(str, s)) + "\n" for s in seqs))


def read_sequences(path: str | Path) -> list[list[int]]:
    return [[int(t) for t in line.split()] for line in Path(path).read_text().splitlines() if line.strip()]


def write_corpus(corpus: Corpus, out_dir: str | Path) -> dict[str, Path]:
    """Write ``train.txt``, ``heldout.txt`` and ``corpus.json`` (one sequence per line)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / "train.txt", "heldout": out / "heldout.txt", "spec": out / "corpus.json"}
    _write_seqs(paths["train"], corpus.train)
    _write_seqs(paths["heldout"], corpus.heldout)
    paths["spec"].write_text(json.dumps(asdict(corpus.spec), indent=2, sort_keys=True) + "\n")
    return paths


def load_corpus(out_dir: str | Path) -> Corpus:
    out = Path(out_dir)
    spec = CorpusSpec.from_dict(json.loads((out / "corpus.json").read_text()))
    return Corpus(spec, read_sequences(out / "train.txt"), read_sequences(out / "heldout.txt"))


@dataclass
class ProxyScore:
    nll: float
    n_tokens: int
    n_clipped: int

    def __float__(self) -> float:
        return self.nll


def quality_proxy(sequences: Iterable[Sequence[int]], spec: CorpusSpec, *, start: int | Sequence[int] = 0) -> ProxyScore:
    """Mean per-token NLL of ``sequences`` under the reference generator.

    Tokens before ``start`` (an int, or one offset per sequence) serve as
    context only. Zero-probability tokens are floored at ``PROB_FLOOR`` and
    counted in ``n_clipped`` rather than producing an infinite mean.
    """
    src = MarkovSource(spec)
    seqs = list(sequences)
    starts = [start] * len(seqs) if isinstance(start, int) else list(start)
    total, count, clipped = 0.0, 0, 0
    for seq, s0 in zip(seqs, starts):
        for n in range(s0, len(seq)):
            tok = int(seq[n])
            if not 0 <= tok <= spec.eos_id:
                raise ScoringError(f"token {tok} is outside the generator vocabulary")
            p = src.token_prob(seq[:n], tok)
            if p < PROB_FLOOR:
                p = PROB_FLOOR
                clipped += 1
            total -= math.log(p)
            count += 1
            if tok == spec.eos_id:
                break
    return ProxyScore(total / count if count else float("nan"), count, clipped)
