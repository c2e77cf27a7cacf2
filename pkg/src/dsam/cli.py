"""Batch command-line entry points.

Subcommands: gen-data, train, synth, eval, dump-encodings. One JSON
config file drives a run; flags override it. Exit codes: 0 success,
1 runtime failure, 2 bad config, 3 missing file. Errors print a single
machine-parsable line to stderr. Commands refuse to overwrite existing
outputs unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .features import (FeatureError, GeneratorConfig, generate_synthetic_corpus,
                       load_corpus, save_corpus, write_track)
from .frontend import FrontendError, read_transcriptions
from .metrics import MetricError, evaluate, format_report, report_csv
from .model import (ModelConfig, ModelError, dump_encodings, load_checkpoint,
                    synthesize)
from .training import TrainConfig, TrainingError, train

EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

CONFIG_SECTIONS = ("generator", "model", "training")


class ConfigError(ValueError):
    pass


class OutputExistsError(RuntimeError):
    pass


def load_run_config(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw


def _model_config(raw, corpus, ablation_override=None):
    section = dict(raw.get("model", {}))
    for key in ("vocab_size", "language_count", "speaker_count"):
        if key in section:
            raise ConfigError(f"model.{key} is derived from the data")
    if ablation_override is not None:
        section["single_stream_ablation"] = ablation_override
    try:
        return ModelConfig.from_dict(dict(
            section,
            vocab_size=corpus.frontend.vocab_size,
            language_count=len(corpus.frontend.languages),
            speaker_count=len(corpus.speakers),
            tone_count=corpus.frontend.tone_count,
            stress_count=corpus.frontend.stress_count,
        ))
    except (ModelError, TypeError) as e:
        raise ConfigError(f"bad model config: {e}") from None


def _train_config(raw, overrides):
    section = dict(raw.get("training", {}))
    section.update(overrides)
    try:
        return TrainConfig.from_dict(section)
    except (TrainingError, TypeError) as e:
        raise ConfigError(f"bad training config: {e}") from None


def _fresh_dir(path, force):
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise OutputExistsError(
            f"output {p} exists; pass --force to overwrite")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fresh_file(path, force):
    p = Path(path)
    if p.exists() and not force:
        raise OutputExistsError(
            f"output {p} exists; pass --force to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_gen_data(args):
    raw = load_run_config(args.config)
    if "generator" not in raw:
        raise ConfigError("config has no generator section")
    try:
        gen_cfg = GeneratorConfig.from_dict(raw["generator"])
    except (FeatureError, FrontendError, TypeError, KeyError) as e:
        raise ConfigError(f"bad generator config: {e}") from None
    out = _fresh_dir(args.out, args.force)
    corpus = generate_synthetic_corpus(gen_cfg, args.seed)
    save_corpus(corpus, out)
    counts = {s: len(corpus.split(s)) for s in ("train", "dev", "test")}
    print(f"wrote {len(corpus.utterances)} utterances to {out} "
          f"(splits: {counts})")
    return 0


def cmd_train(args):
    raw = load_run_config(args.config)
    corpus = load_corpus(args.data)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    train_cfg = _train_config(raw, overrides)
    model_cfg = _model_config(raw, corpus)
    out = _fresh_dir(args.out, args.force)
    result = train(corpus, model_cfg, train_cfg, out_dir=out)
    last = result.log_rows[-1].loss if result.log_rows else None
    if last is not None:
        print(f"finished {train_cfg.max_steps} steps; "
              f"loss_total={last.loss_total:.6f} -> {result.checkpoint_path}")
    else:
        print(f"finished; checkpoint at {result.checkpoint_path}")
    return 0


def cmd_synth(args):
    params, model_cfg, meta = _load_checkpoint(args.checkpoint)
    fe, speakers, stats = _meta_parts(meta)
    if not Path(args.input).exists():
        raise FileNotFoundError(f"transcription file not found: {args.input}")
    utts = read_transcriptions(args.input, fe, speakers)
    out = _fresh_dir(args.out, args.force)
    for utt_id, seq in utts:
        track = synthesize(seq, params, model_cfg, stats, args.max_frames)
        write_track(out / f"{utt_id}.dsam", track)
        note = " (truncated)" if track.truncated else ""
        print(f"{utt_id}: {track.frame_count} frames{note}")
    return 0


def cmd_eval(args):
    params, model_cfg, meta = _load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    mode = args.mode.replace("-", "_")
    report = evaluate(corpus, params, model_cfg, split=args.split, mode=mode)
    out = _fresh_dir(args.out, args.force)
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    table = format_report(report)
    (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_dump_encodings(args):
    params, model_cfg, meta = _load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.data)
    utts = corpus.split(args.split)
    if not utts:
        raise MetricError(f"split {args.split!r} is empty")
    out = _fresh_file(args.out, args.force)
    rows = dump_encodings(utts, corpus.frontend, args.stream, params,
                          model_cfg, out)
    print(f"wrote {rows} rows to {out}")
    return 0


def _load_checkpoint(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def _meta_parts(meta):
    from .features import NormStats
    from .frontend import FrontendConfig
    fe = FrontendConfig.from_dict(meta["frontend"])
    return fe, list(meta["speakers"]), NormStats.from_dict(meta["stats"])


def build_parser():
    p = argparse.ArgumentParser(prog="dsam",
                                description="two-stream acoustic model tools")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize feature tracks")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True,
                   help="JSON-lines transcription file")
    s.add_argument("--out", required=True)
    s.add_argument("--max-frames", type=int, default=400)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="objective evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "dev", "test"])
    e.add_argument("--mode", default="teacher-forced",
                   choices=["teacher-forced", "free-running"])
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-encodings",
                       help="export labeled encoder output vectors")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--stream", required=True,
                   choices=["pronunciation", "prosody", "shared"])
    d.add_argument("--split", default="test", choices=["train", "dev", "test"])
    d.add_argument("--out", required=True)
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_dump_encodings)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except OutputExistsError as e:
        print(f"error: output-exists: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FeatureError, FrontendError, ModelError, MetricError,
            TrainingError) as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
