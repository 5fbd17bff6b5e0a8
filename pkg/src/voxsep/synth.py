"""Deterministic synthetic corpus.

Stands in for real song data so everything runs offline: "vocals" are
vibrato-modulated harmonic complexes phrased with silence gaps, and
"accompaniment" is a chord pad plus filtered noise and periodic clicks.
The two occupy overlapping but distinct spectral regions, making
separation learnable without being trivial.

The labeled split is leakage-free by construction. The unlabeled split
mimics noisy field recordings: each song's tracks cross-contaminate at a
per-song gain drawn from a configurable range.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp
from .dsp import AudioClip, SourcePair

VALIDATION_FRACTION = 0.1


@dataclass(frozen=True)
class SynthSpec:
    n_labeled: int = 100
    n_unlabeled: int = 40
    song_seconds: float = 10.0
    leakage_range: tuple[float, float] = (0.1, 0.5)
    seed: int = 0

    def __post_init__(self):
        if self.n_labeled < 1 or self.n_unlabeled < 0:
            raise ValueError("need at least one labeled song")
        if self.song_seconds <= 0:
            raise ValueError("song_seconds must be positive")
        lo, hi = self.leakage_range
        if not 0 <= lo <= hi:
            raise ValueError("leakage_range must be 0 <= lo <= hi")


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        fade = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env[:ramp] = fade
        env[-ramp:] = fade[::-1]
    return env


def synth_vocal(n_samples: int, rng: np.random.Generator, sr: int = dsp.SAMPLE_RATE) -> np.ndarray:
    """Phrased harmonic complexes: per phrase a wandering f0 with vibrato
    and a 1/h^p harmonic rolloff, separated by silent gaps."""
    out = np.zeros(n_samples)
    pos = int(rng.uniform(0, 0.3) * sr)
    while pos < n_samples - sr // 4:
        phrase_len = int(rng.uniform(1.0, 2.5) * sr)
        phrase_len = min(phrase_len, n_samples - pos)
        t = np.arange(phrase_len) / sr
        f0_base = rng.uniform(180.0, 400.0)
        drift = np.cumsum(rng.standard_normal(phrase_len)) / sr
        drift = drift / (np.max(np.abs(drift)) + 1e-12) * rng.uniform(0.5, 2.0)
        vibrato = rng.uniform(0.3, 0.7) * np.sin(
            2 * np.pi * rng.uniform(5.0, 7.0) * t + rng.uniform(0, 2 * np.pi)
        )
        f0 = f0_base * 2.0 ** ((drift + vibrato) / 12.0)
        phase = 2 * np.pi * np.cumsum(f0) / sr
        rolloff = rng.uniform(0.8, 1.5)
        phrase = np.zeros(phrase_len)
        for h in range(1, 9):
            if h * f0_base * 2 ** (3 / 12) >= sr / 2:
                break
            phrase += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h**rolloff
        phrase *= _envelope(phrase_len, int(0.03 * sr))
        phrase *= rng.uniform(0.6, 1.0)
        out[pos : pos + phrase_len] += phrase
        pos += phrase_len + int(rng.uniform(0.2, 0.8) * sr)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= rng.uniform(0.25, 0.45) / peak
    return out


def synth_accompaniment(
    n_samples: int, rng: np.random.Generator, sr: int = dsp.SAMPLE_RATE
) -> np.ndarray:
    """Chord pad + band-limited noise bed + a periodic click track."""
    t = np.arange(n_samples) / sr
    root = rng.uniform(80.0, 220.0)
    pad = np.zeros(n_samples)
    for ratio in (1.0, 1.25, 1.5, 2.0):
        freq = root * ratio
        am = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t + rng.uniform(0, 2 * np.pi))
        pad += am * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)) / ratio
    pad /= np.max(np.abs(pad)) + 1e-12

    lo = rng.uniform(500.0, 1500.0)
    hi = rng.uniform(2500.0, 5000.0)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n_samples))
    noise /= np.max(np.abs(noise)) + 1e-12

    clicks = np.zeros(n_samples)
    period = int(rng.uniform(0.4, 0.7) * sr)
    burst_len = int(rng.uniform(0.02, 0.05) * sr)
    decay = np.exp(-np.arange(burst_len) / (burst_len / 4))
    sos_hi = signal.butter(4, 3000.0, btype="highpass", fs=sr, output="sos")
    for start in range(int(rng.uniform(0, 0.2) * sr), n_samples - burst_len, period):
        burst = signal.sosfilt(sos_hi, rng.standard_normal(burst_len)) * decay
        clicks[start : start + burst_len] += rng.uniform(0.5, 1.0) * burst
    cpeak = np.max(np.abs(clicks))
    if cpeak > 0:
        clicks /= cpeak

    mix = pad + 0.35 * noise + 0.5 * clicks
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix *= rng.uniform(0.25, 0.45) / peak
    return mix


def synth_pair(song_seed, song_seconds: float, sr: int = dsp.SAMPLE_RATE) -> SourcePair:
    """One leakage-free source pair from a dedicated seed."""
    rng = np.random.default_rng(song_seed)
    n = int(round(song_seconds * sr))
    return SourcePair(
        AudioClip(synth_vocal(n, rng, sr), sr),
        AudioClip(synth_accompaniment(n, rng, sr), sr),
    )


@dataclass(frozen=True)
class ManifestEntry:
    song_id: str
    split: str  # labeled | validation | unlabeled
    vocal_path: str
    acc_path: str
    leakage: float | None = None


@dataclass(frozen=True)
class CorpusManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def labeled(self) -> list[ManifestEntry]:
        return self.split("labeled")

    @property
    def unlabeled(self) -> list[ManifestEntry]:
        return self.split("unlabeled")

    @property
    def validation(self) -> list[ManifestEntry]:
        return self.split("validation")

    def load_pair(self, entry: ManifestEntry) -> SourcePair:
        vocal = dsp.load_audio(self.root / entry.vocal_path)
        acc = dsp.load_audio(self.root / entry.acc_path)
        return SourcePair(vocal, acc, entry.song_id)


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for e in manifest.entries:
            rec = {
                "song_id": e.song_id,
                "split": e.split,
                "vocal_path": e.vocal_path,
                "acc_path": e.acc_path,
            }
            if e.leakage is not None:
                rec["leakage"] = e.leakage
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path: str | Path) -> CorpusManifest:
    """Parse and validate a manifest: unique ids per split, resolvable
    paths, and a validation split disjoint from the training splits."""
    path = Path(path)
    if not path.exists():
        raise dsp.IngestionError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                entry = ManifestEntry(
                    rec["song_id"],
                    rec["split"],
                    rec["vocal_path"],
                    rec["acc_path"],
                    rec.get("leakage"),
                )
            except KeyError as exc:
                raise dsp.IngestionError(f"{path}:{lineno}: missing field {exc}") from exc
            if entry.split not in ("labeled", "validation", "unlabeled"):
                raise dsp.IngestionError(f"{path}:{lineno}: unknown split {entry.split!r}")
            entries.append(entry)
    by_split: dict[str, set[str]] = {}
    for e in entries:
        ids = by_split.setdefault(e.split, set())
        if e.song_id in ids:
            raise dsp.IngestionError(f"duplicate song_id {e.song_id!r} in split {e.split}")
        ids.add(e.song_id)
    overlap = by_split.get("validation", set()) & (
        by_split.get("labeled", set()) | by_split.get("unlabeled", set())
    )
    if overlap:
        raise dsp.IngestionError(f"validation ids overlap training splits: {sorted(overlap)}")
    for e in entries:
        for p in (e.vocal_path, e.acc_path):
            if not (root / p).exists():
                raise dsp.IngestionError(f"missing audio file: {root / p}")
    return CorpusManifest(root, tuple(entries))


def _validation_ids(song_ids: list[str]) -> set[str]:
    """Stable held-out selection: first tenth (at least one) by id hash."""
    n_val = max(1, round(VALIDATION_FRACTION * len(song_ids)))
    ranked = sorted(song_ids, key=lambda s: hashlib.md5(s.encode()).hexdigest())
    return set(ranked[:n_val])


def synth_corpus(spec: SynthSpec, out_dir: str | Path) -> CorpusManifest:
    """Render the corpus WAVs and manifest; byte-identical per (spec, seed)."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_labeled + spec.n_unlabeled)
    entries = []

    labeled_ids = [f"lab{i:04d}" for i in range(spec.n_labeled)]
    val_ids = _validation_ids(labeled_ids)
    for i, song_id in enumerate(labeled_ids):
        pair = synth_pair(seeds[i], spec.song_seconds)
        vpath, apath = f"wavs/{song_id}_vocal.wav", f"wavs/{song_id}_acc.wav"
        dsp.save_audio(out_dir / vpath, pair.vocal)
        dsp.save_audio(out_dir / apath, pair.accompaniment)
        split = "validation" if song_id in val_ids else "labeled"
        entries.append(ManifestEntry(song_id, split, vpath, apath))

    for j in range(spec.n_unlabeled):
        song_id = f"unl{j:04d}"
        seed = seeds[spec.n_labeled + j]
        rng = np.random.default_rng(seed)
        leak_rng = rng.spawn(1)[0]
        pair = synth_pair(rng, spec.song_seconds)
        leakage = float(leak_rng.uniform(*spec.leakage_range))
        noisy_vocal = AudioClip(
            pair.vocal.samples + leakage * pair.accompaniment.samples, dsp.SAMPLE_RATE
        )
        noisy_acc = AudioClip(
            pair.accompaniment.samples + leakage * pair.vocal.samples, dsp.SAMPLE_RATE
        )
        vpath, apath = f"wavs/{song_id}_vocal.wav", f"wavs/{song_id}_acc.wav"
        dsp.save_audio(out_dir / vpath, noisy_vocal)
        dsp.save_audio(out_dir / apath, noisy_acc)
        # diagnostic ground truth, deliberately absent from the manifest:
        # the pipeline must never see clean unlabeled sources
        dsp.save_audio(out_dir / f"wavs/{song_id}_clean_vocal.wav", pair.vocal)
        dsp.save_audio(out_dir / f"wavs/{song_id}_clean_acc.wav", pair.accompaniment)
        entries.append(ManifestEntry(song_id, "unlabeled", vpath, apath, leakage))

    manifest = CorpusManifest(out_dir, tuple(entries))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
