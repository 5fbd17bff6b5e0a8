"""The noisy self-training loop.

Teacher training on the labeled split, pseudo-labeling of the noisy
unlabeled tracks (vocal output of the vocal track, accompaniment output
of the accompaniment track), detector-based quality filtering, student
training on the union, and the iterative extension that promotes each
student to teacher while validation keeps improving.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import augment, dsp, evaluate, vad
from .config import RunConfig, TrainConfig
from .dsp import AudioClip, SourcePair
from .model import (
    PRESETS,
    Separator,
    build_separator,
    load_checkpoint,
    save_checkpoint,
    separate,
)
from .synth import CorpusManifest, ManifestEntry
from .training import TrainingDivergedError, fit, make_optimizer
from .vad import QualityReport, VadNet

log = logging.getLogger(__name__)


def load_split(manifest: CorpusManifest, split: str) -> list[tuple[str, SourcePair]]:
    return [(e.song_id, manifest.load_pair(e)) for e in manifest.split(split)]


def validation_songs(manifest: CorpusManifest) -> list[tuple[str, AudioClip, SourcePair]]:
    songs = []
    for song_id, pair in load_split(manifest, "validation"):
        songs.append((song_id, pair.mixture(), pair))
    return songs


def _train_on(
    dataset: Sequence[SourcePair],
    config: TrainConfig,
    checkpoint_path: Path,
    log_path: Path | None = None,
    split_of: dict[str, str] | None = None,
) -> Separator:
    """Shared teacher/student training: augmented sampling + stepped fitting
    with periodic checkpoints. On divergence the last checkpoint survives.

    When split_of maps song_id -> split name, every drawn sample's
    provenance is appended to provenance.jsonl next to the checkpoint.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    model = build_separator(PRESETS[config.preset], seed=config.seed)
    optimizer = make_optimizer(model, config.schedule)
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    prov_fh = None
    if split_of is not None:
        prov_fh = (checkpoint_path.parent / "provenance.jsonl").open("w")

    def provider(rng: np.random.Generator) -> tuple[AudioClip, SourcePair]:
        mixture, target = augment.sample_training_example(dataset, config.augment, rng)
        if prov_fh is not None:
            prov_fh.write(
                json.dumps(
                    {
                        "song_id": target.song_id,
                        "split": split_of.get(target.song_id, "unknown"),
                    }
                )
                + "\n"
            )
        return mixture, target

    try:
        done = 0
        while done < config.iterations:
            chunk = min(config.checkpoint_every, config.iterations - done)
            try:
                fit(
                    model,
                    provider,
                    iterations=chunk,
                    batch_size=config.batch_size,
                    weights=config.loss_weights,
                    schedule=config.schedule,
                    seed=config.seed + done,
                    log_path=log_path,
                    optimizer=optimizer,
                    start_iteration=done,
                    log_every=config.log_every,
                )
            except TrainingDivergedError as exc:
                if checkpoint_path.exists():
                    raise TrainingDivergedError(
                        f"{exc}; last good checkpoint retained at {checkpoint_path}"
                    ) from exc
                raise
            done += chunk
            save_checkpoint(
                checkpoint_path,
                model,
                optimizer=optimizer,
                iteration=done,
                extra={"train_config": _config_dict(config)},
            )
    finally:
        if prov_fh is not None:
            prov_fh.close()
    return model


def _config_dict(config: TrainConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return plain(config)


def train_teacher(
    manifest: CorpusManifest,
    config: TrainConfig,
    checkpoint_path: str | Path,
    log_path: str | Path | None = None,
) -> Separator:
    """Fit the first-generation separator on the labeled split."""
    pairs = [pair for _, pair in load_split(manifest, "labeled")]
    return _train_on(
        pairs,
        config,
        Path(checkpoint_path),
        Path(log_path) if log_path else None,
        split_of={p.song_id: "labeled" for p in pairs},
    )


@dataclass(frozen=True)
class SelfLabeledEntry:
    song_id: str
    vocal_path: str
    acc_path: str
    report: QualityReport | None = None


@dataclass(frozen=True)
class SelfLabeledSet:
    root: Path
    generation: int
    entries: tuple[SelfLabeledEntry, ...]

    def load_pair(self, entry: SelfLabeledEntry) -> SourcePair:
        return SourcePair(
            dsp.load_audio(self.root / entry.vocal_path),
            dsp.load_audio(self.root / entry.acc_path),
            entry.song_id,
        )


def save_selflabeled(sls: SelfLabeledSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps({"generation": sls.generation}) + "\n")
        for e in sls.entries:
            rec = {
                "song_id": e.song_id,
                "vocal_path": e.vocal_path,
                "acc_path": e.acc_path,
            }
            if e.report is not None:
                rec["report"] = json.loads(e.report.to_json_line())
            fh.write(json.dumps(rec) + "\n")


def load_selflabeled(path: str | Path) -> SelfLabeledSet:
    path = Path(path)
    with path.open() as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    header, rows = lines[0], lines[1:]
    entries = []
    for rec in rows:
        report = None
        if "report" in rec:
            r = rec["report"]
            report = QualityReport(r["song_id"], r["n_frames"], r["poor_frames"])
        entries.append(
            SelfLabeledEntry(rec["song_id"], rec["vocal_path"], rec["acc_path"], report)
        )
    return SelfLabeledSet(path.parent, header["generation"], tuple(entries))


def pseudo_label(
    model: Separator,
    manifest: CorpusManifest,
    out_dir: str | Path,
    generation: int = 0,
) -> SelfLabeledSet:
    """Run the separator over the noisy unlabeled tracks.

    The noisy vocal track keeps only the model's vocal output; the noisy
    accompaniment track keeps only the accompaniment output. Mismatched
    track durations are trimmed to the shorter and logged.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.unlabeled:
        # Loaded separately: noisy tracks may disagree in duration, which
        # the strict SourcePair constructor would reject.
        vocal_in = dsp.load_audio(manifest.root / e.vocal_path)
        acc_in = dsp.load_audio(manifest.root / e.acc_path)
        if len(vocal_in) != len(acc_in):
            n = min(len(vocal_in), len(acc_in))
            log.warning(
                "song %s: track lengths differ (%d vs %d), trimming to %d",
                e.song_id, len(vocal_in), len(acc_in), n,
            )
            sr = vocal_in.sample_rate
            vocal_in = AudioClip(vocal_in.samples[:n], sr)
            acc_in = AudioClip(acc_in.samples[:n], sr)
        pseudo_vocal = separate(model, vocal_in).vocal
        pseudo_acc = separate(model, acc_in).accompaniment
        vpath = f"{e.song_id}_pvocal.wav"
        apath = f"{e.song_id}_pacc.wav"
        dsp.save_audio(out_dir / vpath, pseudo_vocal)
        dsp.save_audio(out_dir / apath, pseudo_acc)
        entries.append(SelfLabeledEntry(e.song_id, vpath, apath))
    sls = SelfLabeledSet(out_dir, generation, tuple(entries))
    save_selflabeled(sls, out_dir / "selflabeled.jsonl")
    return sls


def filter_selflabeled(
    sls: SelfLabeledSet,
    vad_vocal: VadNet,
    vad_acc: VadNet,
    tau: float,
    top_fraction: float,
) -> SelfLabeledSet:
    """Attach quality reports and keep the highest-quality fraction."""
    reported = []
    for e in sls.entries:
        pair = sls.load_pair(e)
        report = vad.count_poor_frames(
            pair.vocal, pair.accompaniment, vad_vocal, vad_acc, tau, song_id=e.song_id
        )
        reported.append(dataclasses.replace(e, report=report))
    kept_ids = set(
        vad.rank_and_filter([e.report for e in reported], top_fraction)
    )
    kept = tuple(e for e in reported if e.song_id in kept_ids)
    return SelfLabeledSet(sls.root, sls.generation, kept)


def train_student(
    manifest: CorpusManifest,
    selflabeled: SelfLabeledSet | None,
    config: TrainConfig,
    checkpoint_path: str | Path,
    log_path: str | Path | None = None,
    union_weighting: str = "uniform",
) -> Separator:
    """Fit a separator on labeled plus filtered self-labeled data.

    uniform: one pool, every song equally likely. balanced: pick a split
    by coin flip first, so a small labeled set is not swamped.
    """
    labeled = [pair for _, pair in load_split(manifest, "labeled")]
    pseudo = (
        [selflabeled.load_pair(e) for e in selflabeled.entries] if selflabeled else []
    )
    if not labeled and not pseudo:
        raise ValueError("both labeled and self-labeled sets are empty")
    split_of = {p.song_id: "labeled" for p in labeled}
    split_of.update({p.song_id: "selflabeled" for p in pseudo})
    if not pseudo or union_weighting == "uniform":
        dataset = labeled + pseudo
        return _train_on(dataset, config, Path(checkpoint_path),
                         Path(log_path) if log_path else None, split_of)
    if union_weighting != "balanced":
        raise ValueError(f"unknown union_weighting {union_weighting!r}")

    class _Balanced:
        """Sequence facade drawing 50/50 between the splits. Indexing maps
        even -> labeled, odd -> pseudo, so uniform index draws over an
        equal-length virtual list give the balanced behavior."""

        def __init__(self, a, b):
            self.a, self.b = a, b

        def __len__(self):
            return 2 * max(len(self.a), len(self.b))

        def __getitem__(self, i):
            pool = self.a if i % 2 == 0 else self.b
            return pool[(i // 2) % len(pool)]

    dataset = _Balanced(labeled, pseudo)
    return _train_on(dataset, config, Path(checkpoint_path),
                     Path(log_path) if log_path else None, split_of)


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    checkpoint: str
    sdr_vocal: float | None
    sdr_acc: float | None
    mean_sdr: float | None
    n_selflabeled: int = 0


@dataclass(frozen=True)
class LoopResult:
    trace: tuple[GenerationRecord, ...]
    best_generation: int
    best_checkpoint: str


def _evaluate_checkpoint(model: Separator, songs) -> tuple[float | None, float | None, float | None]:
    result = evaluate.evaluate_testset(model, songs)
    return result.median_vocal, result.median_acc, result.mean


def _write_state(workdir: Path, trace: list[GenerationRecord]) -> None:
    state = {
        "trace": [dataclasses.asdict(r) for r in trace],
    }
    (workdir / "loop_state.json").write_text(json.dumps(state, indent=2) + "\n")


def self_training_loop(
    manifest: CorpusManifest,
    run_config: RunConfig,
    workdir: str | Path,
    max_generations: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> LoopResult:
    """Teacher -> (pseudo-label -> filter -> student)* with a validation
    stopping rule. Finished phases are detected by their artifacts, so an
    interrupted run resumes where it stopped. A failed generation stops
    the loop and the best model so far is returned."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    max_generations = max_generations or run_config.max_generations
    say = progress or (lambda msg: log.info("%s", msg))
    val_songs = validation_songs(manifest)
    if not val_songs:
        raise ValueError("manifest has no validation split")

    teacher_ckpt = workdir / "gen0" / "separator.npz"
    if teacher_ckpt.exists():
        say(f"generation 0: reusing {teacher_ckpt}")
        model, _ = load_checkpoint(teacher_ckpt)
    else:
        say("generation 0: training teacher")
        model = train_teacher(
            manifest, run_config.teacher, teacher_ckpt,
            log_path=workdir / "gen0" / "train_log.jsonl",
        )
    sv, sa, mean = _evaluate_checkpoint(model, val_songs)
    trace = [GenerationRecord(0, str(teacher_ckpt), sv, sa, mean)]
    say(f"generation 0: validation mean SDR {_fmt(mean)} dB")
    _write_state(workdir, trace)

    vad_vocal_path = workdir / "vad_vocal.npz"
    vad_acc_path = workdir / "vad_acc.npz"
    vads: dict[str, VadNet] = {}

    def get_vads() -> tuple[VadNet, VadNet]:
        if not vads:
            labeled_pairs = [pair for _, pair in load_split(manifest, "labeled")]
            for tag, path in (("vocal", vad_vocal_path), ("accompaniment", vad_acc_path)):
                if path.exists():
                    vads[tag] = vad.load_vad(path)
                else:
                    say(f"training {tag} activity detector")
                    vads[tag] = vad.train_vad(labeled_pairs, tag, run_config.vad)
                    vad.save_vad(vads[tag], path)
        return vads["vocal"], vads["accompaniment"]

    best = trace[0]
    current = model
    for gen in range(1, max_generations + 1):
        gen_dir = workdir / f"gen{gen}"
        student_ckpt = gen_dir / "separator.npz"
        try:
            if student_ckpt.exists():
                say(f"generation {gen}: reusing {student_ckpt}")
                student, _ = load_checkpoint(student_ckpt)
                sls_path = gen_dir / "pseudo" / "selflabeled.filtered.jsonl"
                kept = len(load_selflabeled(sls_path).entries) if sls_path.exists() else 0
            else:
                vad_v, vad_a = get_vads()
                say(f"generation {gen}: pseudo-labeling")
                sls = pseudo_label(current, manifest, gen_dir / "pseudo", generation=gen - 1)
                filtered = filter_selflabeled(
                    sls, vad_v, vad_a, run_config.tau, run_config.top_fraction
                )
                save_selflabeled(filtered, gen_dir / "pseudo" / "selflabeled.filtered.jsonl")
                kept = len(filtered.entries)
                say(f"generation {gen}: kept {kept}/{len(sls.entries)} songs, training student")
                student = train_student(
                    manifest, filtered, run_config.student, student_ckpt,
                    log_path=gen_dir / "train_log.jsonl",
                    union_weighting=run_config.union_weighting,
                )
        except (TrainingDivergedError, dsp.IngestionError) as exc:
            say(f"generation {gen} failed ({exc}); stopping with best so far")
            break
        sv, sa, mean = _evaluate_checkpoint(student, val_songs)
        rec = GenerationRecord(gen, str(student_ckpt), sv, sa, mean, kept)
        trace.append(rec)
        _write_state(workdir, trace)
        say(f"generation {gen}: validation mean SDR {_fmt(mean)} dB")
        gain = _or_neginf(mean) - _or_neginf(best.mean_sdr)
        if _or_neginf(mean) > _or_neginf(best.mean_sdr):
            best = rec
        current = student
        if gain < run_config.min_gain_db:
            say(f"stopping: gain {gain:.3f} dB below threshold {run_config.min_gain_db}")
            break
    return LoopResult(tuple(trace), best.generation, best.checkpoint)


def _or_neginf(value: float | None) -> float:
    return -np.inf if value is None else value


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"
