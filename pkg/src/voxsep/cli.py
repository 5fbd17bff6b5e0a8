"""Command-line surface.

One subcommand per pipeline stage plus `loop` for the whole self-training
run. Every subcommand accepts --config/--seed/--deterministic; flags win
over config values. Directories produced by a command receive a config
snapshot so the run can be repeated from its artifacts alone.

The VOXSEP_WORKERS environment variable caps torch's thread count;
deterministic mode forces a single thread regardless.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import augment, dsp, evaluate, selftrain, synth, vad
from .config import ConfigError, RunConfig, load_config, save_config
from .model import CheckpointError, load_checkpoint
from .synth import SynthSpec
from .training import TrainingDivergedError

WORKERS_ENV = "VOXSEP_WORKERS"


class CliError(Exception):
    pass


def _setup_runtime(config: RunConfig) -> None:
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if config.deterministic:
        workers = 1
    torch.set_num_threads(max(1, workers))
    torch.manual_seed(config.seed)


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.deterministic:
        config = dataclasses.replace(config, deterministic=True)
    return config


def _required(args: argparse.Namespace, config: RunConfig, name: str) -> str:
    """Resolve a path that may come from a flag or from the config."""
    value = getattr(args, name, None) or getattr(config, name, None)
    if not value:
        raise CliError(f"--{name} is required (flag or config field)")
    return value


def _snapshot(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.yaml")


def _load_manifest(args, config) -> synth.CorpusManifest:
    return synth.load_manifest(_required(args, config, "manifest"))


def cmd_synth_corpus(args, config: RunConfig) -> int:
    spec = SynthSpec(
        n_labeled=args.n_labeled,
        n_unlabeled=args.n_unlabeled,
        song_seconds=args.song_seconds,
        leakage_range=(args.leakage[0], args.leakage[1]),
        seed=args.seed if args.seed is not None else config.seed,
    )
    manifest = synth.synth_corpus(spec, args.out)
    print(
        f"wrote {len(manifest.labeled)} labeled, {len(manifest.unlabeled)} unlabeled,"
        f" {len(manifest.validation)} validation songs to {args.out}"
    )
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_train_teacher(args, config: RunConfig) -> int:
    manifest = _load_manifest(args, config)
    workdir = Path(_required(args, config, "workdir"))
    _snapshot(config, workdir)
    ckpt = workdir / "gen0" / "separator.npz"
    selftrain.train_teacher(
        manifest, config.teacher, ckpt, log_path=workdir / "gen0" / "train_log.jsonl"
    )
    print(f"teacher checkpoint: {ckpt}")
    return 0


def cmd_train_vad(args, config: RunConfig) -> int:
    manifest = _load_manifest(args, config)
    workdir = Path(_required(args, config, "workdir"))
    _snapshot(config, workdir)
    labeled = [pair for _, pair in selftrain.load_split(manifest, "labeled")]
    for tag in ("vocal", "accompaniment"):
        net = vad.train_vad(labeled, tag, config.vad)
        path = workdir / f"vad_{'vocal' if tag == 'vocal' else 'acc'}.npz"
        vad.save_vad(net, path)
        print(f"{tag} detector: {path}")
    return 0


def cmd_pseudo_label(args, config: RunConfig) -> int:
    manifest = _load_manifest(args, config)
    model, _ = load_checkpoint(args.checkpoint)
    sls = selftrain.pseudo_label(model, manifest, args.out, generation=args.generation)
    print(f"pseudo-labeled {len(sls.entries)} songs -> {Path(args.out) / 'selflabeled.jsonl'}")
    return 0


def cmd_filter(args, config: RunConfig) -> int:
    sls = selftrain.load_selflabeled(args.selflabeled)
    vad_vocal = vad.load_vad(args.vad_vocal)
    vad_acc = vad.load_vad(args.vad_acc)
    tau = args.tau if args.tau is not None else config.tau
    top = args.top_fraction if args.top_fraction is not None else config.top_fraction
    filtered = selftrain.filter_selflabeled(sls, vad_vocal, vad_acc, tau, top)
    selftrain.save_selflabeled(filtered, args.out)
    print(f"kept {len(filtered.entries)}/{len(sls.entries)} songs -> {args.out}")
    return 0


def cmd_train_student(args, config: RunConfig) -> int:
    manifest = _load_manifest(args, config)
    workdir = Path(_required(args, config, "workdir"))
    _snapshot(config, workdir)
    sls = selftrain.load_selflabeled(args.selflabeled) if args.selflabeled else None
    ckpt = workdir / "separator.npz"
    selftrain.train_student(
        manifest, sls, config.student, ckpt,
        log_path=workdir / "train_log.jsonl",
        union_weighting=config.union_weighting,
    )
    print(f"student checkpoint: {ckpt}")
    return 0


def cmd_loop(args, config: RunConfig) -> int:
    manifest = _load_manifest(args, config)
    workdir = Path(_required(args, config, "workdir"))
    _snapshot(config, workdir)
    result = selftrain.self_training_loop(
        manifest, config, workdir,
        max_generations=args.max_iterations, progress=print,
    )
    for rec in result.trace:
        mean = "n/a" if rec.mean_sdr is None else f"{rec.mean_sdr:.3f}"
        print(f"generation {rec.generation}: mean SDR {mean} dB ({rec.checkpoint})")
    print(f"best: generation {result.best_generation} -> {result.best_checkpoint}")
    return 0


def cmd_evaluate(args, config: RunConfig) -> int:
    manifest = _load_manifest(args, config)
    model, _ = load_checkpoint(args.checkpoint)
    if args.split == "validation":
        songs = selftrain.validation_songs(manifest)
    else:
        songs = [
            (song_id, pair.mixture(), pair)
            for song_id, pair in selftrain.load_split(manifest, args.split)
        ]
    if not songs:
        raise CliError(f"manifest has no songs in split {args.split!r}")
    result = evaluate.evaluate_testset(model, songs)
    print(result.to_table())
    if args.json:
        result.save(args.json)
        print(f"json: {args.json}")
    return 0


def _read_reports(path: str) -> list[vad.QualityReport]:
    """Accept either a plain reports JSONL or a self-labeled set with
    embedded reports."""
    with open(path) as fh:
        first = json.loads(fh.readline())
    if "generation" in first:
        sls = selftrain.load_selflabeled(path)
        reports = [e.report for e in sls.entries if e.report is not None]
        if not reports:
            raise CliError(f"{path} has no quality reports (run `filter` first)")
        return reports
    return vad.load_reports(path)


def cmd_quality_hist(args, config: RunConfig) -> int:
    datasets = {}
    for item in args.reports:
        if "=" not in item:
            raise CliError(f"expected NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        datasets[name] = _read_reports(path)
    hist = vad.quality_histogram(datasets, bins=args.bins)
    width = max(len(n) for n in hist)
    for name, h in hist.items():
        peak = max(h["counts"]) or 1
        print(f"{name} (n={h['n_songs']}, mean poor fraction {h['mean_poor_fraction']:.3f})")
        for lo, hi, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
            bar = "#" * round(30 * c / peak)
            print(f"  [{lo:.2f},{hi:.2f}) {c:4d} {bar}")
    if args.out:
        Path(args.out).write_text(json.dumps(hist, indent=2) + "\n")
        print(f"histogram data: {args.out}")
    return 0


def cmd_augment_preview(args, config: RunConfig) -> int:
    manifest = _load_manifest(args, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot(config, out_dir)
    dataset = [pair for _, pair in selftrain.load_split(manifest, "labeled")]
    if not dataset:
        raise CliError("manifest has no labeled songs to augment")
    aug = config.teacher.augment
    if args.window_seconds is not None:
        aug = dataclasses.replace(aug, window_seconds=args.window_seconds)
    rng = np.random.default_rng(config.seed)
    for i in range(args.count):
        mixture, pair = augment.sample_training_example(dataset, aug, rng)
        for stem, clip in (
            ("mix", mixture), ("vocal", pair.vocal), ("acc", pair.accompaniment),
        ):
            dsp.save_audio(out_dir / f"example{i:03d}_{stem}.wav", clip)
    print(f"wrote {args.count} augmented examples to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxsep",
        description="Singing-voice separation with noisy self-training.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument(
        "--deterministic", action="store_true",
        help="single-threaded, fully reproducible execution",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", parents=[common],
                       help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-labeled", type=int, default=100)
    p.add_argument("--n-unlabeled", type=int, default=40)
    p.add_argument("--song-seconds", type=float, default=10.0)
    p.add_argument("--leakage", type=float, nargs=2, default=(0.1, 0.5),
                   metavar=("LO", "HI"))
    p.set_defaults(handler=cmd_synth_corpus)

    p = sub.add_parser("train-teacher", parents=[common],
                       help="fit the first-generation separator on labeled data")
    p.add_argument("--manifest")
    p.add_argument("--workdir")
    p.set_defaults(handler=cmd_train_teacher)

    p = sub.add_parser("train-vad", parents=[common],
                       help="fit both source-activity detectors")
    p.add_argument("--manifest")
    p.add_argument("--workdir")
    p.set_defaults(handler=cmd_train_vad)

    p = sub.add_parser("pseudo-label", parents=[common],
                       help="separate the noisy unlabeled tracks with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--generation", type=int, default=0)
    p.set_defaults(handler=cmd_pseudo_label)

    p = sub.add_parser("filter", parents=[common],
                       help="keep the cleanest fraction of a self-labeled set")
    p.add_argument("--selflabeled", required=True)
    p.add_argument("--vad-vocal", required=True)
    p.add_argument("--vad-acc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--top-fraction", type=float)
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("train-student", parents=[common],
                       help="fit a separator on labeled plus self-labeled data")
    p.add_argument("--manifest")
    p.add_argument("--selflabeled")
    p.add_argument("--workdir")
    p.set_defaults(handler=cmd_train_student)

    p = sub.add_parser("loop", parents=[common],
                       help="run the full self-training loop")
    p.add_argument("--manifest")
    p.add_argument("--workdir")
    p.add_argument("--max-iterations", type=int,
                   help="maximum teacher->student generations")
    p.set_defaults(handler=cmd_loop)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="validation",
                   choices=("validation", "labeled", "unlabeled"))
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("quality-hist", parents=[common],
                       help="poor-frame histograms across report sets")
    p.add_argument("reports", nargs="+", metavar="NAME=PATH")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", help="write histogram data as JSON")
    p.set_defaults(handler=cmd_quality_hist)

    p = sub.add_parser("augment-preview", parents=[common],
                       help="write augmented training examples for listening")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--window-seconds", type=float,
                   help="override the configured crop length")
    p.set_defaults(handler=cmd_augment_preview)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = _load_run_config(args)
        _setup_runtime(config)
        return args.handler(args, config)
    except (
        CliError,
        ConfigError,
        CheckpointError,
        TrainingDivergedError,
        dsp.IngestionError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
