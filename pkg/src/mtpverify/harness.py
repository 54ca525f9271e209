"""End-to-end pipeline: corpus, training, decoding runs, sweeps and reports.

A run is described by one JSON file with the sections ``model``, ``train``,
``sampler``, ``verify``, ``sweep``, ``corpus`` and ``vocoder`` plus a
``work_dir`` where artifacts live::

    work_dir/data/{train,heldout}.txt, corpus.json
    work_dir/backbone.ckpt, work_dir/mtp.ckpt
    work_dir/logs/*.csv, work_dir/reports/*
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .backbone import Backbone, ModelConfig
from .corpus import Corpus, CorpusSpec, gen_corpus, load_corpus, quality_proxy, write_corpus
from .decoding import (
    DecodeMetrics,
    SamplerParams,
    SpeculativeDecoder,
    VerifyParams,
    audit_trace,
    merge_metrics,
)
from .errors import CheckpointError, ConfigurationError, MissingArtifactError, MTPError
from .mtp import MTPCascade
from .trainer import TrainConfig, pretrain_backbone, train_mtp
from .vocoder import StreamConfig

log = logging.getLogger(__name__)

SECTIONS = ("model", "train", "sampler", "verify", "sweep", "corpus", "vocoder")
ABLATION_MODES = ("no_verification", "no_eos_topk", "baseline")


@dataclass
class SweepConfig:
    topk_values: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    n_prompts: int = 50
    prompt_len: int = 4
    max_new_tokens: int = 64
    seed: int = 1234
    timing: bool = True


def _build(cls, d: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown {name} fields: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad {name} section: {exc}") from exc


@dataclass
class HarnessConfig:
    work_dir: Path
    corpus: CorpusSpec
    model: ModelConfig
    pretrain: TrainConfig
    train: TrainConfig
    sampler: SamplerParams
    verify: VerifyParams
    sweep: SweepConfig
    vocoder: StreamConfig
    raw: dict = field(default_factory=dict)

    @property
    def data_dir(self) -> Path:
        return self.work_dir / "data"

    @property
    def backbone_path(self) -> Path:
        return self.work_dir / "backbone.ckpt"

    @property
    def mtp_path(self) -> Path:
        return self.work_dir / "mtp.ckpt"

    @property
    def log_dir(self) -> Path:
        return self.work_dir / "logs"

    @property
    def report_dir(self) -> Path:
        return self.work_dir / "reports"


def parse_config(raw: dict, base_dir: str | Path = ".") -> HarnessConfig:
    """Build a :class:`HarnessConfig` from a decoded JSON document.

    ``train`` holds the MTP training settings; an optional nested
    ``train.pretrain`` dict overrides them for backbone pretraining.
    """
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    extra = set(raw) - set(SECTIONS) - {"work_dir"}
    if extra:
        raise ConfigurationError(f"unknown config sections: {sorted(extra)}")
    raw = copy.deepcopy(raw)
    try:
        corpus = CorpusSpec.from_dict(raw.get("corpus", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad corpus section: {exc}") from exc
    model_d = dict(raw.get("model", {}))
    model_d.setdefault("vocab_size", corpus.model_vocab_size)
    model = _build(ModelConfig, model_d, "model")
    if model.vocab_size != corpus.model_vocab_size:
        raise ConfigurationError(
            f"model.vocab_size={model.vocab_size} but the corpus needs {corpus.model_vocab_size} (regular + EOS + PAD)"
        )
    train_d = dict(raw.get("train", {}))
    pre_over = train_d.pop("pretrain", {})
    train = _build(TrainConfig, train_d, "train")
    pretrain = _build(TrainConfig, {**train_d, **pre_over}, "train.pretrain")
    sampler = _build(SamplerParams, raw.get("sampler", {}), "sampler")
    verify = _build(VerifyParams, raw.get("verify", {}), "verify")
    sweep_d = dict(raw.get("sweep", {}))
    if "topk_values" in sweep_d:
        sweep_d["topk_values"] = tuple(int(k) for k in sweep_d["topk_values"])
    sweep = _build(SweepConfig, sweep_d, "sweep")
    if any(k < 1 for k in sweep.topk_values):
        raise ConfigurationError("sweep.topk_values must be >= 1")
    try:
        vocoder = StreamConfig.from_dict(raw.get("vocoder", {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad vocoder section: {exc}") from exc
    work_dir = Path(raw.get("work_dir", "work"))
    if not work_dir.is_absolute():
        work_dir = Path(base_dir) / work_dir
    return HarnessConfig(work_dir, corpus, model, pretrain, train, sampler, verify, sweep, vocoder, raw)


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parsed
    return out


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> HarnessConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return parse_config(apply_overrides(raw, overrides), base_dir=path.parent)


# -- pipeline stages ---------------------------------------------------------------


def stage_gen_data(cfg: HarnessConfig) -> Corpus:
    corpus = gen_corpus(cfg.corpus)
    write_corpus(corpus, cfg.data_dir)
    return corpus


def _need(path: Path, what: str) -> None:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}; run the earlier pipeline stage first")


def stage_corpus(cfg: HarnessConfig) -> Corpus:
    _need(cfg.data_dir / "corpus.json", "corpus")
    corpus = load_corpus(cfg.data_dir)
    if corpus.spec != cfg.corpus:
        raise ConfigurationError("corpus on disk was generated from a different corpus spec")
    return corpus


def stage_pretrain(cfg: HarnessConfig, seed: int = 0) -> Backbone:
    corpus = stage_corpus(cfg)
    backbone = Backbone.init(cfg.model, seed=seed)
    cfg.log_dir.mkdir(parents=True, exist_ok=True)
    pretrain_backbone(backbone, corpus.train, cfg.pretrain, log_path=cfg.log_dir / "pretrain.csv")
    backbone.save(cfg.backbone_path)
    return backbone


def load_backbone(cfg: HarnessConfig) -> Backbone:
    _need(cfg.backbone_path, "backbone checkpoint")
    backbone = Backbone.load(cfg.backbone_path)
    if backbone.cfg != cfg.model:
        raise CheckpointError("backbone checkpoint does not match the model section")
    return backbone


def stage_train_mtp(cfg: HarnessConfig, seed: int = 1, shift: int = 1) -> tuple[MTPCascade, dict]:
    """Train the cascade; returns it with the backbone hashes before and after."""
    corpus = stage_corpus(cfg)
    backbone = load_backbone(cfg)
    before = backbone.content_hash()
    cascade = MTPCascade.init(backbone, seed=seed)
    cfg.log_dir.mkdir(parents=True, exist_ok=True)
    train_mtp(cascade, corpus.train, cfg.train, shift=shift, log_path=cfg.log_dir / "train_mtp.csv",
              checkpoint_dir=cfg.work_dir)
    cascade.save(cfg.mtp_path)
    after = backbone.content_hash()
    return cascade, {"before": before, "after": after}


def load_models(cfg: HarnessConfig) -> tuple[Backbone, MTPCascade]:
    backbone = load_backbone(cfg)
    _need(cfg.mtp_path, "MTP checkpoint")
    return backbone, MTPCascade.load(cfg.mtp_path, backbone)


# -- runs and reports --------------------------------------------------------------

TIMING_COLUMNS = ("tokens_per_sec_accelerated", "tokens_per_sec_vanilla")


@dataclass
class RunReport:
    config: dict
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path: str | Path, *, timing: bool = True) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        names = [k for k in self.rows[0] if timing or k not in TIMING_COLUMNS]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in names})

    def summary(self, *, timing: bool = True) -> dict:
        rows = [{k: v for k, v in r.items() if timing or k not in TIMING_COLUMNS} for r in self.rows]
        return {"config": self.config, "rows": rows, "notes": self.notes}

    def write_json(self, path: str | Path, *, timing: bool = True) -> None:
        Path(path).write_text(json.dumps(self.summary(timing=timing), indent=2, sort_keys=True, default=str) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def heldout_prompts(corpus: Corpus, n: int, prompt_len: int) -> list[list[int]]:
    """First ``prompt_len`` tokens of held-out sequences, cycling if needed."""
    pool = [s[:prompt_len] for s in corpus.heldout if len(s) > prompt_len]
    if not pool:
        raise ConfigurationError("no held-out sequence is longer than prompt_len")
    return [list(pool[i % len(pool)]) for i in range(n)]


@dataclass
class _Batch:
    outputs: list[list[int]]
    metrics: DecodeMetrics
    seconds: float


def _run_batch(decoder: SpeculativeDecoder, prompts, max_len: int, sp: SamplerParams, vp: VerifyParams | None, seed: int) -> _Batch:
    outs, ms = [], []
    t0 = time.perf_counter()
    for i, prompt in enumerate(prompts):
        spi = replace(sp, seed=seed + i)
        if vp is None:
            toks, m, _ = decoder.generate_vanilla(prompt, max_len, spi)
        else:
            toks, m, _ = decoder.generate(prompt, max_len, spi, vp)
        outs.append(toks)
        ms.append(m)
    return _Batch(outs, merge_metrics(ms), time.perf_counter() - t0)


def _row(mode: str, topk_v: int | None, eos_topk_v: int | None, sp: SamplerParams, run: _Batch, vanilla: _Batch,
         corpus: CorpusSpec, prompt_lens: list[int]) -> dict:
    m = run.metrics
    ratios = [100.0 * a / m.backbone_forwards if m.backbone_forwards else 0.0 for a in m.accepted_per_module]
    q = quality_proxy(run.outputs, corpus, start=prompt_lens)
    qv = quality_proxy(vanilla.outputs, corpus, start=prompt_lens)
    row = {"mode": mode, "topk_v": topk_v if topk_v is not None else "", "eos_topk_v": eos_topk_v if eos_topk_v is not None else "",
           "temperature": sp.temperature, "sampler_top_k": sp.top_k if sp.top_k is not None else "", "top_p": sp.top_p}
    for k, r in enumerate(ratios, start=1):
        row[f"ratio_mtp{k}"] = r
    row["total_ratio"] = float(sum(ratios))
    row["tokens_emitted"] = m.tokens_emitted
    row["backbone_forwards"] = m.backbone_forwards
    row["backbone_samples"] = m.backbone_samples
    row["accepted"] = sum(m.accepted_per_module)
    row["tokens_per_forward"] = m.tokens_per_forward()
    row["accounting_ok"] = m.accounting_holds()
    gen_acc = sum(len(o) - p for o, p in zip(run.outputs, prompt_lens))
    gen_van = sum(len(o) - p for o, p in zip(vanilla.outputs, prompt_lens))
    row["tokens_per_sec_accelerated"] = gen_acc / run.seconds if run.seconds > 0 else 0.0
    row["tokens_per_sec_vanilla"] = gen_van / vanilla.seconds if vanilla.seconds > 0 else 0.0
    row["quality_proxy"] = q.nll
    row["quality_proxy_vanilla"] = qv.nll
    row["clipped_tokens"] = q.n_clipped
    return row


def _snapshot(cfg: HarnessConfig) -> dict:
    return {
        "corpus": asdict(cfg.corpus),
        "model": asdict(cfg.model),
        "sampler": asdict(cfg.sampler),
        "verify": asdict(cfg.verify),
        "sweep": asdict(cfg.sweep),
    }


def monotone_violations(report: RunReport, n_modules: int) -> list[str]:
    """Flag adjacent sweep points where a per-module ratio decreases."""
    rows = sorted((r for r in report.rows if r["mode"] == "sweep"), key=lambda r: r["topk_v"])
    out = []
    for k in range(1, n_modules + 1):
        col = f"ratio_mtp{k}"
        for a, b in zip(rows, rows[1:]):
            if b[col] < a[col]:
                out.append(f"{col} drops from {a[col]:.3f} at topk_v={a['topk_v']} to {b[col]:.3f} at topk_v={b['topk_v']}")
    return out


def run_sweep(cfg: HarnessConfig, backbone: Backbone, cascade: MTPCascade, corpus: Corpus,
              topk_values: Sequence[int] | None = None) -> RunReport:
    """Accelerated vs vanilla decoding at each ``topk_v`` on held-out prompts.

    ``eos_topk_v`` is ``min(verify.eos_topk_v, topk_v)``, except that a
    ``topk_v`` covering the whole vocabulary is the no-verification point
    and lifts the EOS threshold as well.
    Decreasing ratio columns are recorded in ``report.notes`` (and logged)
    rather than raised, since the trend is empirical.
    """
    sw = cfg.sweep
    topks = tuple(topk_values) if topk_values is not None else sw.topk_values
    prompts = heldout_prompts(corpus, sw.n_prompts, sw.prompt_len)
    plens = [len(p) for p in prompts]
    max_len = min(cfg.model.max_seq_len, sw.prompt_len + sw.max_new_tokens)
    dec = SpeculativeDecoder(backbone, cascade)
    vanilla = _run_batch(dec, prompts, max_len, cfg.sampler, None, sw.seed)
    report = RunReport(_snapshot(cfg))
    for k in topks:
        eos_k = k if k >= cfg.model.vocab_size else min(cfg.verify.eos_topk_v, k)
        vp = VerifyParams(topk_v=k, eos_topk_v=eos_k)
        run = _run_batch(dec, prompts, max_len, cfg.sampler, vp, sw.seed)
        report.rows.append(_row("sweep", k, vp.eos_topk_v, cfg.sampler, run, vanilla, cfg.corpus, plens))
    for msg in monotone_violations(report, cascade.n_modules):
        log.warning("sweep trend counterexample: %s", msg)
        report.notes.append(f"non-monotone: {msg}")
    return report


def run_ablation(cfg: HarnessConfig, backbone: Backbone, cascade: MTPCascade, corpus: Corpus,
                 modes: Sequence[str] = ABLATION_MODES) -> RunReport:
    """Default verification plus the requested ablation rows.

    ``no_verification`` uses a top-k equal to the vocabulary so every draft
    passes; ``no_eos_topk`` applies the ordinary ``topk_v`` to EOS drafts;
    ``baseline`` is plain autoregressive decoding.
    """
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation mode {m!r}")
    sw = cfg.sweep
    prompts = heldout_prompts(corpus, sw.n_prompts, sw.prompt_len)
    plens = [len(p) for p in prompts]
    max_len = min(cfg.model.max_seq_len, sw.prompt_len + sw.max_new_tokens)
    dec = SpeculativeDecoder(backbone, cascade)
    vanilla = _run_batch(dec, prompts, max_len, cfg.sampler, None, sw.seed)
    report = RunReport(_snapshot(cfg))
    vocab = cfg.model.vocab_size
    plan: list[tuple[str, VerifyParams | None]] = [("default", cfg.verify)]
    for m in modes:
        if m == "no_verification":
            plan.append((m, VerifyParams(topk_v=vocab, eos_topk_v=vocab)))
        elif m == "no_eos_topk":
            plan.append((m, VerifyParams(topk_v=cfg.verify.topk_v, eos_topk_v=cfg.verify.topk_v)))
        else:
            plan.append((m, None))
    for name, vp in plan:
        if vp is None:
            run = vanilla
            report.rows.append(_row(name, None, None, cfg.sampler, run, vanilla, cfg.corpus, plens))
        else:
            run = _run_batch(dec, prompts, max_len, cfg.sampler, vp, sw.seed)
            report.rows.append(_row(name, vp.topk_v, vp.eos_topk_v, cfg.sampler, run, vanilla, cfg.corpus, plens))
    return report


def run_trace_audit(cfg: HarnessConfig, backbone: Backbone, cascade: MTPCascade, corpus: Corpus,
                    n_runs: int = 50) -> list[str]:
    """Trace ``n_runs`` seeded generations and return every audit finding."""
    sw = cfg.sweep
    prompts = heldout_prompts(corpus, n_runs, sw.prompt_len)
    max_len = min(cfg.model.max_seq_len, sw.prompt_len + sw.max_new_tokens)
    dec = SpeculativeDecoder(backbone, cascade)
    problems = []
    for i, prompt in enumerate(prompts):
        sp = replace(cfg.sampler, seed=sw.seed + i)
        out, metrics, events = dec.generate(prompt, max_len, sp, cfg.verify, trace=True)
        if not metrics.accounting_holds():
            problems.append(f"run {i}: accounting identity fails")
        problems.extend(f"run {i}: {p}" for p in audit_trace(backbone, prompt, out, events, sp, cfg.verify))
    return problems


def write_report(report: RunReport, out_dir: str | Path, stem: str, *, timing: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{stem}.csv", "json": out / f"{stem}.json"}
    report.write_csv(paths["csv"], timing=timing)
    report.write_json(paths["json"], timing=timing)
    return paths


def describe_error(exc: BaseException) -> str:
    if isinstance(exc, MTPError):
        return f"{type(exc).__name__}: {exc}"
    return repr(exc)


def config_to_json(cfg: HarnessConfig) -> dict[str, Any]:
    d = _snapshot(cfg)
    d["train"] = asdict(cfg.train)
    d["vocoder"] = asdict(cfg.vocoder)
    d["work_dir"] = str(cfg.work_dir)
    return d


__all__ = [
    "ABLATION_MODES",
    "HarnessConfig",
    "RunReport",
    "SweepConfig",
    "apply_overrides",
    "heldout_prompts",
    "load_backbone",
    "load_config",
    "load_models",
    "monotone_violations",
    "parse_config",
    "run_ablation",
    "run_sweep",
    "run_trace_audit",
    "stage_corpus",
    "stage_gen_data",
    "stage_pretrain",
    "stage_train_mtp",
    "write_report",
]
