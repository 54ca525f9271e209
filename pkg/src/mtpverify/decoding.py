"""MTP-and-verification decoding loop, its vanilla baseline, and trace auditing.

Every step runs one backbone forward over the tokens the cache has not seen
(the last trusted token plus any pending drafts). Draft ``j`` is checked
against the backbone logits at the position just before it. A rejection
rolls the sequence and caches back to that position and resamples from the
same logits. If every draft survives, a fresh trusted token is sampled from
the last position and each MTP head proposes one new draft.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backbone import Backbone
from .errors import ContractError, ParameterError, SamplingError
from .mtp import MTPCascade
from .nn_core import RngStream, softmax

EVENT_KINDS = ("backbone_sample", "draft", "accept", "reject", "rollback", "eos")


@dataclass(frozen=True)
class SamplerParams:
    """Sampling controls. ``temperature == 0`` means greedy argmax."""

    temperature: float = 1.0
    top_k: int | None = None
    top_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ParameterError("temperature must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ParameterError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ParameterError("top_p must lie in (0, 1]")


@dataclass(frozen=True)
class VerifyParams:
    topk_v: int = 4
    eos_topk_v: int = 1

    def __post_init__(self):
        if not 1 <= self.eos_topk_v <= self.topk_v:
            raise ParameterError("need 1 <= eos_topk_v <= topk_v")

    def vacuous(self, vocab_size: int) -> bool:
        """True when every token would pass, so drafts can be committed immediately."""
        return self.eos_topk_v >= vocab_size


def sample(logits, params: SamplerParams, rng: RngStream | None) -> int:
    """Top-k filter, nucleus cutoff, temperature softmax, then one draw.

    Ties in logit value are ordered by lower token id, so greedy decoding
    picks the lowest-id maximiser. ``-inf`` logits are never chosen.
    """
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any() or np.isposinf(z).any():
        raise SamplingError("logits contain NaN or +inf")
    order = np.argsort(-z, kind="stable")
    if params.top_k is not None:
        order = order[: params.top_k]
    vals = z[order]
    alive = np.isfinite(vals)
    order, vals = order[alive], vals[alive]
    if order.size == 0:
        raise SamplingError("no token survives filtering")
    if params.temperature == 0 or order.size == 1:
        return int(order[0])
    if params.top_p < 1.0:
        cum = np.cumsum(softmax(vals))
        n = int(np.searchsorted(cum, params.top_p)) + 1
        order, vals = order[:n], vals[:n]
    probs = softmax(vals, params.temperature)
    if rng is None:
        raise SamplingError("stochastic sampling needs an RngStream")
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, rng.uniform() * cum[-1], side="right"))
    return int(order[min(idx, order.size - 1)])


def token_rank(logits, token: int) -> int:
    """0-based rank of ``token`` by descending logit, ties going to lower ids."""
    z = np.asarray(logits)
    v = z[token]
    return int(np.sum(z > v) + np.sum(z[:token] == v))


def verify_token(logits, candidate: int, vp: VerifyParams, is_eos: bool) -> bool:
    """Accept iff ``candidate`` is in the top-m logits (m is the EOS threshold for EOS)."""
    m = vp.eos_topk_v if is_eos else vp.topk_v
    return token_rank(logits, candidate) < m


@dataclass
class Event:
    step: int
    kind: str
    token: int
    module: int

    def line(self) -> str:
        return f"{self.step} {self.kind} {self.token} {self.module}"

    @classmethod
    def parse(cls, line: str) -> "Event":
        step, kind, token, module = line.split()
        return cls(int(step), kind, int(token), int(module))


@dataclass
class DecodeMetrics:
    n_modules: int
    backbone_forwards: int = 0
    backbone_samples: int = 0
    accepted_per_module: list[int] = field(default_factory=list)
    rejected_per_module: list[int] = field(default_factory=list)
    drafted_per_module: list[int] = field(default_factory=list)
    tokens_emitted: int = 0
    wall_ns: int = 0
    truncated: bool = False

    def __post_init__(self):
        for name in ("accepted_per_module", "rejected_per_module", "drafted_per_module"):
            if not getattr(self, name):
                setattr(self, name, [0] * self.n_modules)

    def accounting_holds(self) -> bool:
        return self.tokens_emitted == self.backbone_samples + sum(self.accepted_per_module)

    def tokens_per_forward(self) -> float:
        return self.tokens_emitted / self.backbone_forwards if self.backbone_forwards else 0.0


@dataclass
class DecodeState:
    """Mutable per-session state; ``pending`` drafts are the tail of ``sequence``."""

    sequence: list[int]
    prompt_len: int
    pending: list[tuple[int, int]]
    cache: object
    cascade_state: object
    rng: RngStream
    metrics: DecodeMetrics
    hidden_backlog: list[np.ndarray] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    step: int = 0
    eos_pos: int | None = None
    terminated: bool = False
    trace: bool = True

    def emit(self, kind: str, token: int, module: int) -> None:
        if self.trace:
            self.events.append(Event(self.step, kind, int(token), int(module)))

    @property
    def generated(self) -> list[int]:
        return self.sequence[self.prompt_len :]

    def committed_len(self) -> int:
        return len(self.sequence) - len(self.pending)


class SpeculativeDecoder:
    """Runs the draft-and-verify loop for a backbone plus MTP cascade."""

    def __init__(self, backbone: Backbone, cascade: MTPCascade | None):
        self.backbone = backbone
        self.cascade = cascade
        self.cfg = backbone.cfg

    def _masked(self, logits: np.ndarray) -> np.ndarray:
        z = np.array(logits, dtype=np.float64)
        z[self.cfg.pad_id] = -np.inf
        return z

    def start(self, prompt: Sequence[int], sp: SamplerParams, *, trace: bool = True) -> DecodeState:
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ContractError("prompt must not be empty")
        if len(prompt) > self.cfg.max_seq_len:
            raise ContractError("prompt does not fit in max_seq_len")
        n = self.cascade.n_modules if self.cascade else 0
        return DecodeState(
            sequence=list(prompt),
            prompt_len=len(prompt),
            pending=[],
            cache=self.backbone.new_cache(),
            cascade_state=self.cascade.new_state() if self.cascade else None,
            rng=RngStream(sp.seed, 0),
            metrics=DecodeMetrics(n),
            trace=trace,
        )

    # -- helpers ---------------------------------------------------------------

    def _rollback(self, state: DecodeState, pos: int) -> None:
        """Drop every token at index >= ``pos`` and rewind all caches to ``pos``."""
        first = state.committed_len()
        for idx in range(len(state.sequence) - 1, pos - 1, -1):
            level = state.pending[idx - first][1] if idx >= first else 0
            state.emit("rollback", state.sequence[idx], level)
        del state.sequence[pos:]
        if state.cache.current_len > pos:
            self.backbone.truncate_cache(state.cache, pos)
        cs = state.cascade_state
        if cs is not None:
            if cs.current_len > pos:
                cs.truncate(pos)
            keep = pos - cs.current_len
            rows = np.concatenate(state.hidden_backlog) if state.hidden_backlog else np.zeros((0, self.cfg.dim))
            state.hidden_backlog = [rows[:keep]] if keep > 0 else []

    def _commit(self, state: DecodeState, token: int, module: int) -> None:
        state.metrics.tokens_emitted += 1
        if token == self.cfg.eos_id and state.eos_pos is None:
            # index of this token in sequence: it is already appended
            idx = len(state.sequence) - 1 - len(state.pending)
            state.eos_pos = idx
            state.emit("eos", token, module)

    def _append_trusted(self, state: DecodeState, logits: np.ndarray, sp: SamplerParams) -> int:
        tok = sample(self._masked(logits), sp, state.rng)
        state.sequence.append(tok)
        state.metrics.backbone_samples += 1
        state.emit("backbone_sample", tok, 0)
        self._commit(state, tok, 0)
        return tok

    # -- one iteration -----------------------------------------------------------

    def decode_step(self, state: DecodeState, sp: SamplerParams, vp: VerifyParams) -> DecodeState:
        if state.terminated:
            raise ContractError("decode_step called on a terminated session")
        if not state.sequence:
            raise ContractError("empty sequence")
        state.step += 1
        m = state.metrics
        start = state.cache.current_len
        suffix = state.sequence[start:]
        logits, hidden = self.backbone.forward_incremental(state.cache, suffix)
        m.backbone_forwards += 1
        if state.cascade_state is not None:
            state.hidden_backlog.append(hidden.values)

        eos = self.cfg.eos_id
        n_pend = len(state.pending)
        first_pending = len(state.sequence) - n_pend
        pending = list(state.pending)
        for j, (tok, level) in enumerate(pending):
            pos = first_pending + j
            row = logits[pos - 1 - start]
            state.pending = pending[j:]
            if verify_token(row, tok, vp, tok == eos):
                m.accepted_per_module[level - 1] += 1
                state.emit("accept", tok, level)
                state.pending = pending[j + 1 :]
                self._commit(state, tok, level)
                continue
            m.rejected_per_module[level - 1] += 1
            state.emit("reject", tok, level)
            self._rollback(state, pos)
            state.pending = []
            self._append_trusted(state, row, sp)
            self._check_done(state)
            return state
        state.pending = []

        if self._check_done(state):
            return state
        return self._extend(state, logits[-1], sp, vp)

    def _check_done(self, state: DecodeState) -> bool:
        if state.eos_pos is not None and not state.pending:
            state.terminated = True
        return state.terminated

    def _extend(self, state: DecodeState, last_logits: np.ndarray, sp: SamplerParams, vp: VerifyParams) -> DecodeState:
        cap = self.cfg.max_seq_len
        if len(state.sequence) + 1 > cap:
            state.metrics.truncated = True
            state.terminated = True
            return state
        self._append_trusted(state, last_logits, sp)
        if self.cascade is None:
            self._check_done(state)
            return state
        room = cap - len(state.sequence)
        n_drafts = min(self.cascade.n_modules, room)
        if n_drafts < self.cascade.n_modules:
            state.metrics.truncated = True
        if n_drafts > 0:
            cs = state.cascade_state
            rows = np.concatenate(state.hidden_backlog)
            state.hidden_backlog = []
            drafts = self.cascade.speculate(cs, rows, cs.current_len)
            vacuous = vp.vacuous(self.cfg.vocab_size)
            for d in drafts[:n_drafts]:
                tok = sample(self._masked(d.logits), sp, state.rng)
                state.sequence.append(tok)
                state.metrics.drafted_per_module[d.level - 1] += 1
                state.emit("draft", tok, d.level)
                if vacuous:
                    state.metrics.accepted_per_module[d.level - 1] += 1
                    state.emit("accept", tok, d.level)
                    self._commit(state, tok, d.level)
                else:
                    state.pending.append((tok, d.level))
        self._check_done(state)
        return state

    # -- full generations ----------------------------------------------------------

    def generate(self, prompt: Sequence[int], max_len: int, sp: SamplerParams, vp: VerifyParams, *, trace: bool = False):
        """Decode until a trusted EOS with nothing pending, or ``max_len`` new tokens.

        Returns ``(tokens, metrics, events)``; ``tokens`` is the prompt plus the
        output, cut after the first trusted EOS and at ``max_len`` new tokens.
        """
        if self.cascade is None:
            raise ContractError("speculative generation needs an MTP cascade")
        t0 = time.perf_counter_ns()
        state = self.start(prompt, sp, trace=trace)
        while not state.terminated and state.committed_len() - state.prompt_len < max_len:
            self.decode_step(state, sp, vp)
        if state.pending:
            self._rollback(state, state.committed_len())
            state.pending = []
        state.metrics.wall_ns = time.perf_counter_ns() - t0
        return self._finish(state, max_len), state.metrics, state.events

    def _finish(self, state: DecodeState, max_len: int) -> list[int]:
        end = len(state.sequence)
        if state.eos_pos is not None:
            end = state.eos_pos + 1
        end = min(end, state.prompt_len + max_len)
        return state.sequence[:end]

    def generate_vanilla(self, prompt: Sequence[int], max_len: int, sp: SamplerParams, *, trace: bool = False):
        """Plain autoregressive decoding: one backbone forward per token."""
        t0 = time.perf_counter_ns()
        state = self.start(prompt, sp, trace=trace)
        state.metrics = DecodeMetrics(self.cascade.n_modules if self.cascade else 0)
        while not state.terminated and len(state.sequence) - state.prompt_len < max_len:
            state.step += 1
            start = state.cache.current_len
            logits, _ = self.backbone.forward_incremental(state.cache, state.sequence[start:])
            state.metrics.backbone_forwards += 1
            if len(state.sequence) + 1 > self.cfg.max_seq_len:
                state.metrics.truncated = True
                break
            self._append_trusted(state, logits[-1], sp)
            self._check_done(state)
        state.metrics.wall_ns = time.perf_counter_ns() - t0
        return self._finish(state, max_len), state.metrics, state.events


@dataclass
class SpeedupReport:
    ratios: list[float]
    total: float
    tokens_per_forward: float
    tokens_per_sec: float | None = None
    vanilla_tokens_per_sec: float | None = None

    def formatted(self) -> str:
        parts = "+".join(f"{r:.2f}" for r in self.ratios)
        return f"{parts} ({self.total:.2f})" if len(self.ratios) > 1 else f"{self.total:.2f}"


def speedup_report(m: DecodeMetrics, vanilla: DecodeMetrics | None = None) -> SpeedupReport:
    """Per-module acceptance ratio ``100 * accepted_k / backbone_forwards`` and their sum."""
    if m.backbone_forwards <= 0:
        raise ParameterError("speedup_report needs at least one backbone forward")
    ratios = [100.0 * a / m.backbone_forwards for a in m.accepted_per_module]
    tps = m.tokens_emitted / (m.wall_ns * 1e-9) if m.wall_ns else None
    vtps = None
    if vanilla is not None and vanilla.wall_ns:
        vtps = vanilla.tokens_emitted / (vanilla.wall_ns * 1e-9)
    return SpeedupReport(ratios, float(sum(ratios)), m.tokens_per_forward(), tps, vtps)


def merge_metrics(items: Iterable[DecodeMetrics]) -> DecodeMetrics:
    items = list(items)
    out = DecodeMetrics(items[0].n_modules if items else 0)
    for m in items:
        out.backbone_forwards += m.backbone_forwards
        out.backbone_samples += m.backbone_samples
        out.tokens_emitted += m.tokens_emitted
        out.wall_ns += m.wall_ns
        out.truncated |= m.truncated
        for k in range(out.n_modules):
            out.accepted_per_module[k] += m.accepted_per_module[k]
            out.rejected_per_module[k] += m.rejected_per_module[k]
            out.drafted_per_module[k] += m.drafted_per_module[k]
    return out


def write_trace(events: Iterable[Event], path) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(e.line() + "\n")


def read_trace(path) -> list[Event]:
    with open(path) as fh:
        return [Event.parse(line) for line in fh if line.strip()]


def audit_trace(
    backbone: Backbone,
    prompt: Sequence[int],
    output: Sequence[int],
    events: Sequence[Event],
    sp: SamplerParams,
    vp: VerifyParams,
) -> list[str]:
    """Replay an event trace and cross-check it against fresh backbone logits.

    Returns a list of human-readable violations (empty when the trace is clean):

    * replaying the events must reproduce ``output``;
    * every rejection must be followed by rollbacks that remove exactly the
      rejected draft and everything after it;
    * every generated token must come from a backbone sample or an accepted
      draft, and accepted drafts must rank inside the verification top-k of
      an independent full forward (EOS against the EOS threshold);
    * a final EOS must have passed that check as well.
    """
    problems: list[str] = []
    seq = list(prompt)
    origin: list[tuple[str, int]] = [("prompt", 0)] * len(prompt)
    pending: list[int] = []  # indices into seq of unjudged drafts
    rollback_due = 0
    eos = backbone.cfg.eos_id
    for e in events:
        if e.kind not in EVENT_KINDS:
            problems.append(f"unknown event kind {e.kind!r}")
            continue
        if rollback_due and e.kind != "rollback":
            problems.append(f"step {e.step}: rejection not followed by a complete rollback")
            rollback_due = 0
        if e.kind == "backbone_sample":
            seq.append(e.token)
            origin.append(("sample", 0))
        elif e.kind == "draft":
            seq.append(e.token)
            origin.append(("draft", e.module))
            pending.append(len(seq) - 1)
        elif e.kind == "accept":
            if not pending or seq[pending[0]] != e.token:
                problems.append(f"step {e.step}: accept of {e.token} does not match the oldest pending draft")
                continue
            origin[pending.pop(0)] = ("accept", e.module)
        elif e.kind == "reject":
            if not pending or seq[pending[0]] != e.token:
                problems.append(f"step {e.step}: reject of {e.token} does not match the oldest pending draft")
                continue
            rollback_due = len(seq) - pending[0]
            pending = []
        elif e.kind == "rollback":
            if not seq or seq[-1] != e.token:
                problems.append(f"step {e.step}: rollback of {e.token} does not match sequence tail")
                continue
            seq.pop()
            origin.pop()
            pending = [i for i in pending if i < len(seq)]
            rollback_due = max(0, rollback_due - 1)
    if rollback_due:
        problems.append("trace ends with an incomplete rollback")
    if pending:
        problems.append("trace ends with unjudged drafts still in the sequence")

    # cut the replay the same way generate() does
    gen_start = len(prompt)
    end = len(seq)
    for i in range(gen_start, len(seq)):
        if seq[i] == eos:
            end = i + 1
            break
    end = min(end, len(output))
    if list(seq[:end]) != list(output):
        problems.append("replayed sequence differs from the returned output")
        return problems

    if len(output) <= gen_start:
        return problems
    logits, _ = backbone.forward_full(list(output))
    vacuous = vp.vacuous(backbone.cfg.vocab_size)
    for i in range(gen_start, len(output)):
        kind, module = origin[i]
        tok = output[i]
        rank = token_rank(logits[i - 1], tok)
        if kind == "sample":
            if sp.top_k is not None and rank >= sp.top_k:
                problems.append(f"position {i}: sampled token {tok} outside sampler top-{sp.top_k}")
        elif kind == "accept":
            m = vp.eos_topk_v if tok == eos else vp.topk_v
            if not vacuous and rank >= m:
                problems.append(f"position {i}: accepted draft {tok} from module {module} has rank {rank} >= {m}")
        else:
            problems.append(f"position {i}: token {tok} was never sampled by the backbone nor verified")
    return problems
