"""Command-line entry points: synth, train, adapt, infer, score, report.

Every command is reproducible from its configuration plus seed; synth and
infer are byte-exact. Diagnostics go to stderr, results to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import metrics
from .audio import read_wav, write_wav
from .clustering import AHCConfig
from .embeddings import get_extractor
from .encoders import available_encoders
from .protocols import (
    LoRAConfig,
    ManifestEntry,
    ProtocolSpec,
    TrainConfig,
    infer_recording,
    load_manifest,
    load_pipeline,
    run_protocol,
    write_manifest,
)
from .synth import SyntheticSceneSpec, generate_scene, scene_variant
from .timeline import load_rttm, save_rttm, serialize_rttm


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: configuration must be a mapping")
    return data


def _setting(args_value, config: dict, key: str, default):
    """Explicit flags beat the config file, which beats built-in defaults."""
    if args_value is not None:
        return args_value
    return config.get(key, default)


def _cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = SyntheticSceneSpec(
        num_speakers=args.num_speakers,
        duration=args.duration,
        overlap_fraction=args.overlap,
        age_group=args.age_group,
        seed=args.seed,
    )
    entries = []
    for i in range(args.num_scenes):
        spec = scene_variant(base, i, prefix=args.prefix)
        waveform, annotation = generate_scene(spec)
        wav_path = out_dir / f"{spec.uri}.wav"
        rttm_path = out_dir / f"{spec.uri}.rttm"
        write_wav(wav_path, waveform)
        save_rttm(rttm_path, annotation)
        entries.append(
            ManifestEntry(
                uri=spec.uri,
                audio=wav_path,
                rttm=rttm_path,
                dataset=args.dataset,
                age_group=args.age_group,
            )
        )
        print(f"{spec.uri}: {annotation.stats().total_speech:.1f}s speech -> {wav_path}")
    write_manifest(out_dir / "manifest.jsonl", entries)
    print(f"manifest: {out_dir / 'manifest.jsonl'}")
    return 0


def _train_common(args: argparse.Namespace, kind: str, init_checkpoint: Path | None) -> int:
    config = _load_config(args.config)
    train_section = dict(config.get("train", {}))
    window = float(_setting(args.window, train_section, "window", 8.0))
    train_section["window"] = window
    if args.seed is not None:
        train_section["seed"] = args.seed
    if args.epochs is not None:
        train_section["epochs"] = args.epochs
    train_config = TrainConfig(**train_section)

    encoder = _setting(args.encoder, config, "encoder", "toy")
    surface = _setting(args.surface, config, "surface", "frozen")
    lora_config = LoRAConfig(**config.get("lora", {})) if surface == "lora" else None

    protocol = ProtocolSpec(
        kind=kind,
        train_manifests=tuple(Path(p) for p in args.manifest),
        val_manifests=tuple(Path(p) for p in (args.val_manifest or [])),
        init_checkpoint=init_checkpoint,
    )
    out_dir = Path(args.out)
    resolved = {
        "encoder": encoder,
        "surface": surface,
        "protocol": kind,
        "train": train_section,
        "lora": {"rank": lora_config.rank, "alpha": lora_config.alpha} if lora_config else None,
        "seed": train_config.seed,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))

    result = run_protocol(
        protocol,
        train_config,
        out_dir=out_dir,
        encoder_name=encoder,
        surface=surface,
        lora_config=lora_config,
    )
    best = result.log[result.best_epoch]
    print(
        f"checkpoint: {result.checkpoint_path} "
        f"(best epoch {result.best_epoch}, val loss {best.val_loss:.4f})"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    return _train_common(args, args.protocol, None)


def _cmd_adapt(args: argparse.Namespace) -> int:
    return _train_common(args, "domain-adapt", Path(args.init_checkpoint))


def _cmd_infer(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    pipeline = load_pipeline(args.checkpoint)
    ahc = AHCConfig(**config.get("ahc", {}))
    extractor_section = config.get("extractor", {})
    extractor = get_extractor(extractor_section.get("name", "toy"), **{
        k: v for k, v in extractor_section.items() if k != "name"
    }) if extractor_section else None

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    annotations = []
    for entry in load_manifest(args.manifest):
        waveform = read_wav(entry.audio)
        annotation = infer_recording(
            pipeline,
            waveform,
            uri=entry.uri,
            ahc_config=ahc,
            extractor=extractor,
            window=args.window,
        )
        save_rttm(out_dir / f"{entry.uri}.rttm", annotation)
        annotations.append(annotation)
        print(f"{entry.uri}: {len(annotation)} segments")
    (out_dir / "hypothesis.rttm").write_text(serialize_rttm(annotations))
    print(f"hypothesis: {out_dir / 'hypothesis.rttm'}")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    references = load_rttm(args.ref)
    hypotheses = load_rttm(args.hyp)
    report = metrics.score_corpus(references, hypotheses, collar=args.collar)
    print(report.render())
    if args.out:
        payload = report.to_dict()
        payload["collar"] = args.collar
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
        print(f"report: {args.out}")
    return 0


def _parse_named(pairs: list[str], flag: str) -> dict[str, Path]:
    named = {}
    for pair in pairs:
        name, sep, path = pair.partition("=")
        if not sep or not name or not path:
            raise ValueError(f"{flag} expects NAME=PATH, got {pair!r}")
        named[name] = Path(path)
    return named


def _cmd_report(args: argparse.Namespace) -> int:
    """Render score outputs as decomposition and macro-average tables;
    never recomputes DER."""
    scores = _parse_named(args.scores, "--scores")
    baselines = _parse_named(args.baseline or [], "--baseline")
    rows = {}
    for name, path in scores.items():
        rows[name] = json.loads(Path(path).read_text())["overall"]

    header = f"{'dataset':<14}  {'MD':>6}  {'FA':>6}  {'SC':>6}  {'DER':>6}"
    with_change = bool(baselines)
    if with_change:
        header += f"  {'vs base':>9}"
    print(header)
    ders = []
    changes = []
    for name, row in rows.items():
        der = row["der"]
        ders.append(der)
        line = (
            f"{name:<14}  {metrics.format_percent(row['missed_detection']):>6}"
            f"  {metrics.format_percent(row['false_alarm']):>6}"
            f"  {metrics.format_percent(row['speaker_confusion']):>6}"
            f"  {metrics.format_percent(der):>6}"
        )
        if with_change:
            if name in baselines:
                base = json.loads(baselines[name].read_text())["overall"]["der"]
                change = metrics.relative_change(der, base)
                changes.append(change)
                line += f"  {metrics.format_relative(change):>9}"
            else:
                line += f"  {'n/a':>9}"
        print(line)
    macro = metrics.macro_average(ders)
    summary = f"{'Macro Avg.':<14}  {'':>6}  {'':>6}  {'':>6}  {metrics.format_percent(macro):>6}"
    if with_change and changes:
        summary += f"  {metrics.format_relative(metrics.macro_average(changes)):>9}"
    print(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eendvc",
        description="Speaker diarization: train, adapt, infer, score, report, synth.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate synthetic scenes with reference RTTM")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--num-scenes", type=int, default=1)
    synth.add_argument("--num-speakers", type=int, default=2)
    synth.add_argument("--duration", type=float, default=120.0)
    synth.add_argument("--overlap", type=float, default=0.1)
    synth.add_argument("--age-group", default="adult",
                       choices=["adult", "older-adult", "child-adult"])
    synth.add_argument("--dataset", default="synthetic")
    synth.add_argument("--prefix", default="scene")
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=_cmd_synth)

    def add_train_flags(p, with_protocol: bool):
        p.add_argument("--manifest", action="append", required=True,
                       help="training manifest (repeatable)")
        p.add_argument("--val-manifest", action="append",
                       help="validation manifest (repeatable; defaults to training data)")
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--encoder", choices=list(available_encoders()))
        p.add_argument("--surface", choices=["frozen", "lora", "full"])
        p.add_argument("--window", type=float, choices=[8.0, 16.0])
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        if with_protocol:
            p.add_argument("--protocol", default="adult-only",
                           choices=["adult-only", "combined"])

    train = sub.add_parser("train", help="train a segmentation model")
    add_train_flags(train, with_protocol=True)
    train.set_defaults(func=_cmd_train)

    adapt = sub.add_parser("adapt", help="domain-adapt from an existing checkpoint")
    add_train_flags(adapt, with_protocol=False)
    adapt.add_argument("--init-checkpoint", required=True)
    adapt.set_defaults(func=_cmd_adapt)

    infer = sub.add_parser("infer", help="diarize recordings listed in a manifest")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--manifest", required=True)
    infer.add_argument("--config", help="YAML run configuration (ahc/extractor sections)")
    infer.add_argument("--window", type=float)
    infer.add_argument("--out", required=True, help="output directory for RTTM files")
    infer.set_defaults(func=_cmd_infer)

    scorecmd = sub.add_parser("score", help="score hypothesis RTTM against reference")
    scorecmd.add_argument("--ref", required=True)
    scorecmd.add_argument("--hyp", required=True)
    scorecmd.add_argument("--collar", type=float, default=0.0)
    scorecmd.add_argument("--out", help="write machine-readable report JSON here")
    scorecmd.set_defaults(func=_cmd_score)

    report = sub.add_parser("report", help="render tables from score JSON outputs")
    report.add_argument("--scores", action="append", required=True,
                        help="NAME=PATH of a score JSON (repeatable)")
    report.add_argument("--baseline", action="append",
                        help="NAME=PATH of a baseline score JSON for relative change")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
