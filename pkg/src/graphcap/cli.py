"""Command-line entry point wiring the modules into reproducible pipelines.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O or file-format error, 5 gradient-audit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import dataset as ds
from . import evaluation, training
from .errors import (ConfigError, CorruptionError, DivergenceError, GraphcapError,
                     SchemaError, VersionError, VocabularyError)
from .model import ModelDims

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
EXIT_AUDIT = 5

_DIM_KEYS = set(ModelDims.__dataclass_fields__)


def _parse_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if raw.lower() in ("none", "null"):
        return None
    return raw


def _read_options(config_path, opts) -> dict:
    """Flat key=value config file, overridden by repeated --opt flags."""
    values: dict = {}
    if config_path:
        text = Path(config_path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{config_path}:{lineno}: expected key=value")
            key, raw = line.split("=", 1)
            values[key.strip()] = _parse_value(raw.strip())
    for item in opts or []:
        if "=" not in item:
            raise ConfigError(f"--opt {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(raw.strip())
    return values


def _synth_config(options: dict) -> ds.SynthConfig:
    unknown = set(options) - set(ds.SynthConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown synthesis option(s): {', '.join(sorted(unknown))}")
    config = ds.SynthConfig(**options)
    config.validate()
    return config


def _train_config(options: dict, seed=None) -> training.TrainConfig:
    options = dict(options)
    preset = options.pop("preset", "desk")
    dim_overrides = {k: options.pop(k) for k in list(options) if k in _DIM_KEYS}
    allowed = set(training.TrainConfig.__dataclass_fields__) - {"dims", "preset"}
    unknown = set(options) - allowed
    if unknown:
        raise ConfigError(f"unknown training option(s): {', '.join(sorted(unknown))}")
    config = training.TrainConfig.from_preset(preset, **options)
    if dim_overrides:
        config = replace(config, dims=replace(config.dims, **dim_overrides))
    if seed is not None:
        config = replace(config, seed=seed)
    config.validate()
    return config


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    config = _synth_config(_read_options(args.config, args.opt))
    data = ds.synthesize(config, args.seed)
    out = _outdir(args.out)
    ds.save(data, out / "manifest.json")
    clips = data.clips()
    print(f"wrote {out / 'manifest.json'}")
    print(f"videos={len(data.videos)} (train={len(data.split('train'))}, "
          f"val={len(data.split('val'))}) clips={len(clips)}")
    print(f"vocab: {len(data.vocab.words)} words, {len(data.vocab.objects)} objects, "
          f"{len(data.vocab.attributes)} attributes, {len(data.vocab.relations)} relations")
    return EXIT_OK


def cmd_train(args) -> int:
    data = ds.load(args.manifest)
    config = _train_config(_read_options(args.config, args.opt), seed=args.seed)
    out = _outdir(args.out)
    log_path = out / "log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_file:
        def log(record: dict) -> None:
            line = {k: record.get(k) for k in
                    ("phase", "epoch", "L_S", "L_M", "L_R", "L_G", "val_cider")}
            log_file.write(json.dumps(line) + "\n")

        result = training.run_training(data, config, log)
    epoch = len(result.pretrain_records) + len(result.full_records)
    training.save_checkpoint(out / "best.ckpt", result.model, config, epoch)
    result.model.load_state_dict(result.final_state)
    training.save_checkpoint(out / "final.ckpt", result.model, config, epoch)
    result.model.load_state_dict(result.best_state)
    print(f"pretrain epochs={len(result.pretrain_records)} "
          f"full epochs={len(result.full_records)}")
    last = result.full_records[-1]
    print(f"final losses: L_S={last['L_S']:.4f} L_M={last['L_M']:.4f} "
          f"L_R={last['L_R']:.4f} L_G={last['L_G']:.4f}")
    print(f"wrote {out / 'best.ckpt'}, {out / 'final.ckpt'}, {log_path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    data = ds.load(args.manifest)
    model = training.model_from_checkpoint(training.load_checkpoint(args.checkpoint))
    out = _outdir(args.out)
    traces = evaluation.generate_traces(
        model, data.split(args.split), mode=args.mode, beam_width=args.beam_width,
        restrict_gt_frame=args.restrict_gt_frame)
    evaluation.save_traces(traces, out / "traces.json")
    print(f"wrote {out / 'traces.json'} ({len(traces)} clips, mode={args.mode})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = ds.load(args.manifest)
    model = training.model_from_checkpoint(training.load_checkpoint(args.checkpoint))
    halluc_gt = None
    if args.halluc_gt:
        halluc_gt = json.loads(Path(args.halluc_gt).read_text(encoding="utf-8"))
    report, traces = evaluation.evaluate_model(
        model, data, split=args.split, teacher_forced=args.teacher_forced,
        restrict_gt_frame=args.restrict_gt_frame, halluc_gt=halluc_gt,
        mode=args.mode, beam_width=args.beam_width)
    out = _outdir(args.out)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1),
                                     encoding="utf-8")
    (out / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    evaluation.save_traces(traces, out / "traces.json")
    print(report.table())
    print(f"wrote {out / 'report.json'}, {out / 'report.txt'}, {out / 'traces.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import torch

    torch.set_num_threads(1)
    config = training.TrainConfig.from_preset("desk")
    synth = ds.SynthConfig(n_videos=2, val_videos=0, clips_per_video=2)
    data = ds.synthesize(synth, args.seed)
    model = training.build_model(data, config)
    videos = [training.video_tensors(v) for v in data.split("train")]
    report = training.gradient_audit(model, videos, config, seed=args.seed,
                                     corrupt_block=args.corrupt_block)
    for line in report.lines():
        print(line)
    if not report.ok:
        print(f"failing blocks: {', '.join(report.failing())}", file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_report(args) -> int:
    data = json.loads(Path(args.report).read_text(encoding="utf-8"))
    cap, grd, hal = data["captioning"], data["grounding"], data["hallucination"]
    header = (f"{'BLEU@1':>8} {'BLEU@4':>8} {'CIDEr':>8} {'GRD.':>8} {'ATT.':>8} "
              f"{'F1_ALL':>8} {'F1_LOC':>8} {'CHAIR_i':>8} {'CHAIR_s':>8} {'RECALL_o':>9}")
    row = (f"{cap['bleu1']:8.4f} {cap['bleu4']:8.4f} {cap['cider']:8.4f} "
           f"{grd['grd']:8.4f} {grd['att']:8.4f} {grd['f1_all']:8.4f} {grd['f1_loc']:8.4f} "
           f"{hal['chair_i']:8.4f} {hal['chair_s']:8.4f} {hal['recall_o']:9.4f}")
    print(header)
    print(row)
    counts = grd["counts"]
    print(f"object words A={counts['A']} correct B={counts['B']} localized C={counts['C']}; "
          f"modes: {data.get('modes', {})}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphcap",
        description="Grounded video description with language-refined scene graphs.",
        epilog="Exit codes: 0 ok, 2 config error, 3 divergence, 4 I/O error, "
               "5 gradient-audit failure.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="synthesize a seeded dataset manifest")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--config", help="flat key=value synthesis config file")
    synth.add_argument("--opt", action="append", metavar="KEY=VALUE",
                       help="override a synthesis option (repeatable)")
    synth.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="run both training phases on a manifest")
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--config", help="flat key=value training config file")
    train.add_argument("--opt", action="append", metavar="KEY=VALUE",
                       help="override a training option (repeatable)")
    train.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    train.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="write generation traces for a split")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--manifest", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--split", default="train", help="dataset split (default train)")
    gen.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    gen.add_argument("--beam-width", type=int, default=3)
    gen.add_argument("--restrict-gt-frame", action=argparse.BooleanOptionalAction,
                     default=False,
                     help="restrict localization candidates to the annotated frame")
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="generate and score a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="train")
    ev.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    ev.add_argument("--beam-width", type=int, default=3)
    ev.add_argument("--teacher-forced", action=argparse.BooleanOptionalAction,
                    default=True,
                    help="compute GRD./ATT. under teacher forcing (default on)")
    ev.add_argument("--restrict-gt-frame", action=argparse.BooleanOptionalAction,
                    default=True,
                    help="restrict GRD./ATT. candidates to the annotated frame")
    ev.add_argument("--halluc-gt", help="JSON file {clip_id: [object word, ...]}")
    ev.set_defaults(func=cmd_evaluate)

    audit = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    audit.add_argument("--seed", type=int, default=0)
    audit.add_argument("--corrupt-block", help="test hook: corrupt one block's gradient")
    audit.set_defaults(func=cmd_gradcheck)

    rep = sub.add_parser("report", help="print the table for a report JSON")
    rep.add_argument("--report", required=True, help="path to report.json")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (SchemaError, CorruptionError, VersionError, VocabularyError,
            FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
