"""Command-line entry point.

Every subcommand reads one JSON config (``--config``) and accepts repeated
``--set section.key=value`` overrides. Exit codes: 0 success, 2 bad config,
3 missing artifact, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .corpus import quality_proxy
from .decoding import SpeculativeDecoder, VerifyParams, speedup_report, write_trace
from .errors import CheckpointError, ConfigurationError, InvariantViolation, MissingArtifactError, ParameterError
from .vocoder import (
    VocoderWeights,
    decode_frames,
    istft_synthesize,
    offline_decode,
    stft,
    stream_decode,
    write_spectral_dump,
    write_wav,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("mtpverify")


def _cmd_gen_data(cfg: harness.HarnessConfig, args) -> int:
    corpus = harness.stage_gen_data(cfg)
    print(f"wrote {len(corpus.train)} train / {len(corpus.heldout)} held-out sequences to {cfg.data_dir}")
    return EXIT_OK


def _cmd_pretrain(cfg, args) -> int:
    bb = harness.stage_pretrain(cfg, seed=args.seed)
    print(f"backbone saved to {cfg.backbone_path} (hash {bb.content_hash()[:16]})")
    return EXIT_OK


def _cmd_train_mtp(cfg, args) -> int:
    cas, hashes = harness.stage_train_mtp(cfg, seed=args.seed, shift=args.shift)
    print(f"cascade saved to {cfg.mtp_path}")
    print(f"backbone hash before {hashes['before'][:16]} after {hashes['after'][:16]}")
    if hashes["before"] != hashes["after"]:
        print("backbone changed during MTP training", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _cmd_decode(cfg, args) -> int:
    backbone, cascade = harness.load_models(cfg)
    if args.prompt is not None:
        prompt = [int(t) for t in args.prompt.replace(",", " ").split()]
    else:
        corpus = harness.stage_corpus(cfg)
        prompt = harness.heldout_prompts(corpus, args.prompt_index + 1, cfg.sweep.prompt_len)[args.prompt_index]
    max_len = args.max_len or min(cfg.model.max_seq_len, len(prompt) + cfg.sweep.max_new_tokens)
    dec = SpeculativeDecoder(backbone, cascade)
    sp = cfg.sampler
    if args.vanilla:
        out, m, events = dec.generate_vanilla(prompt, max_len, sp, trace=bool(args.trace))
    else:
        out, m, events = dec.generate(prompt, max_len, sp, cfg.verify, trace=bool(args.trace))
    print(" ".join(map(str, out)))
    if m.backbone_forwards:
        print(f"speedup ratio {speedup_report(m).formatted()}  tokens/forward {m.tokens_per_forward():.3f}")
    print(f"quality proxy {quality_proxy([out], cfg.corpus, start=len(prompt)).nll:.4f}")
    if args.trace:
        write_trace(events, args.trace)
    return EXIT_OK


def _cmd_sweep(cfg, args) -> int:
    backbone, cascade = harness.load_models(cfg)
    corpus = harness.stage_corpus(cfg)
    topks = [int(k) for k in args.topk.split(",")] if args.topk else None
    report = harness.run_sweep(cfg, backbone, cascade, corpus, topks)
    paths = harness.write_report(report, cfg.report_dir, args.stem or "sweep", timing=cfg.sweep.timing)
    _print_rows(report)
    for n in report.notes:
        print(f"note: {n}")
    print(f"report: {paths['csv']} {paths['json']}")
    return EXIT_OK


def _cmd_ablate(cfg, args) -> int:
    backbone, cascade = harness.load_models(cfg)
    corpus = harness.stage_corpus(cfg)
    modes = args.modes.split(",") if args.modes else harness.ABLATION_MODES
    report = harness.run_ablation(cfg, backbone, cascade, corpus, modes)
    paths = harness.write_report(report, cfg.report_dir, args.stem or "ablation", timing=cfg.sweep.timing)
    _print_rows(report)
    print(f"report: {paths['csv']} {paths['json']}")
    return EXIT_OK


def _print_rows(report: harness.RunReport) -> None:
    for r in report.rows:
        ratios = "+".join(f"{v:.2f}" for k, v in r.items() if k.startswith("ratio_mtp"))
        print(f"{r['mode']:>16} topk_v={r['topk_v']!s:>4} ratio {ratios} ({r['total_ratio']:.2f}) "
              f"nll {r['quality_proxy']:.4f} tok/s {r['tokens_per_sec_accelerated']:.1f} vs {r['tokens_per_sec_vanilla']:.1f}")


def _cmd_vocoder_check(cfg, args) -> int:
    vc = cfg.vocoder
    out_dir = cfg.work_dir / "vocoder"
    out_dir.mkdir(parents=True, exist_ok=True)
    gen = np.random.default_rng(args.seed)
    worst, latency_ok = 0.0, True
    for i in range(args.n_streams):
        w = VocoderWeights.init(vc, seed=args.seed + i)
        toks = gen.integers(0, vc.vocab_size, size=int(gen.integers(1, 40)))
        streamed, sizes = stream_decode(toks, w)
        worst = max(worst, float(np.max(np.abs(streamed - offline_decode(toks, w)))))
        first = next((j + 1 for j, s in enumerate(sizes) if s), None)
        expect = vc.total_lookahead_frames + 1
        if len(toks) >= expect and first != expect:
            latency_ok = False
    x = gen.standard_normal(vc.hop * 40)
    y = istft_synthesize(stft(x, vc), vc)
    lo = vc.n_fft - vc.hop
    roundtrip = float(np.max(np.abs(y[lo:] - x[lo:])))
    w = VocoderWeights.init(vc, seed=args.seed)
    toks = gen.integers(0, vc.vocab_size, size=32)
    write_wav(out_dir / "sample.wav", offline_decode(toks, w), vc.sample_rate)
    write_spectral_dump(out_dir / "sample_frames.csv", decode_frames(toks, w))
    summary = {"max_stream_offline_diff": worst, "latency_frames": vc.total_lookahead_frames,
               "latency_ok": latency_ok, "istft_roundtrip_error": roundtrip}
    print(json.dumps(summary, indent=2))
    ok = worst < 1e-6 and latency_ok and roundtrip < 1e-8
    return EXIT_OK if ok else EXIT_INVARIANT


def _cmd_trace_audit(cfg, args) -> int:
    backbone, cascade = harness.load_models(cfg)
    corpus = harness.stage_corpus(cfg)
    problems = harness.run_trace_audit(cfg, backbone, cascade, corpus, n_runs=args.n_runs)
    for p in problems:
        print(p)
    print(f"{args.n_runs} traced runs, {len(problems)} problems")
    return EXIT_INVARIANT if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtpverify", description="Verified multi-token speculative decoding toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", _cmd_gen_data, "generate the synthetic corpus")
    sp = add("pretrain-backbone", _cmd_pretrain, "train and freeze the backbone")
    sp.add_argument("--seed", type=int, default=0)
    sp = add("train-mtp", _cmd_train_mtp, "train the MTP cascade against the frozen backbone")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--shift", type=int, default=1, help="target offset; 0 trains a deliberately mis-offset cascade")
    sp = add("decode", _cmd_decode, "generate one sequence")
    sp.add_argument("--prompt", help="space or comma separated token ids")
    sp.add_argument("--prompt-index", type=int, default=0, help="held-out prompt to use when --prompt is absent")
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--vanilla", action="store_true")
    sp.add_argument("--trace", help="write the event trace here")
    sp = add("sweep", _cmd_sweep, "top-k verification sweep")
    sp.add_argument("--topk", help="comma separated topk_v values")
    sp.add_argument("--stem")
    sp = add("ablate", _cmd_ablate, "verification ablations")
    sp.add_argument("--modes", help=f"comma separated subset of {','.join(harness.ABLATION_MODES)}")
    sp.add_argument("--stem")
    sp = add("vocoder-check", _cmd_vocoder_check, "stream/offline equivalence and iSTFT checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-streams", type=int, default=20)
    sp = add("trace-audit", _cmd_trace_audit, "audit traced generations")
    sp.add_argument("--n-runs", type=int, default=50)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config, args.overrides)
        return args.func(cfg, args)
    except (ConfigurationError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
