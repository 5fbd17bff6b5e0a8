"""Separation quality measurement.

SDR is the plain energy ratio 10*log10(||s||^2 / ||s - s_hat||^2), capped
at +100 dB. Aggregation follows a fixed protocol: non-overlapping 1-second
segments (final partial second dropped), per-song median over segments,
then the median across songs; the reported Mean is the arithmetic mean of
the vocal and accompaniment medians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import AudioClip, SourcePair
from .model import Separator, separate

SDR_CAP_DB = 100.0


def sdr(reference: AudioClip | np.ndarray, estimate: AudioClip | np.ndarray) -> float | None:
    """Energy-ratio SDR in dB, capped at +100; None marks an undefined
    (all-zero reference) comparison."""
    s = reference.samples if isinstance(reference, AudioClip) else np.asarray(reference, dtype=np.float64)
    y = estimate.samples if isinstance(estimate, AudioClip) else np.asarray(estimate, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {y.shape}")
    ref_energy = float(np.sum(s * s))
    if ref_energy == 0.0:
        return None
    res_energy = float(np.sum((s - y) ** 2))
    if res_energy == 0.0:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * np.log10(ref_energy / res_energy))


def segment_sdrs(reference: AudioClip, estimate: AudioClip) -> list[float]:
    """SDR per non-overlapping 1 s segment; silent-reference segments are
    skipped and the final partial second is dropped."""
    if len(reference) != len(estimate):
        raise ValueError("length mismatch")
    sr = reference.sample_rate
    out = []
    for start in range(0, len(reference) - sr + 1, sr):
        value = sdr(reference.samples[start : start + sr], estimate.samples[start : start + sr])
        if value is not None:
            out.append(value)
    return out


def evaluate_estimates(estimates: SourcePair, refs: SourcePair) -> tuple[float | None, float | None]:
    """Per-source median segment SDR for precomputed estimates."""
    values = []
    for est, ref in ((estimates.vocal, refs.vocal), (estimates.accompaniment, refs.accompaniment)):
        seg = segment_sdrs(ref, est)
        values.append(float(np.median(seg)) if seg else None)
    return values[0], values[1]


def evaluate_song(model: Separator, mixture: AudioClip, refs: SourcePair) -> tuple[float | None, float | None]:
    """Separate the full mixture once, then score both sources."""
    if len(mixture) != len(refs):
        raise ValueError("mixture/reference length mismatch")
    return evaluate_estimates(separate(model, mixture), refs)


def mixture_baseline(mixture: AudioClip, refs: SourcePair) -> tuple[float | None, float | None]:
    """Score of the do-nothing separator that answers the mixture for both
    sources; the floor any trained model must beat."""
    return evaluate_estimates(SourcePair(mixture, mixture), refs)


@dataclass(frozen=True)
class EvalResult:
    per_song: dict[str, tuple[float | None, float | None]] = field(default_factory=dict)

    def _valid(self, index: int) -> list[float]:
        return [v[index] for v in self.per_song.values() if v[index] is not None]

    @property
    def median_vocal(self) -> float | None:
        vals = self._valid(0)
        return float(np.median(vals)) if vals else None

    @property
    def median_acc(self) -> float | None:
        vals = self._valid(1)
        return float(np.median(vals)) if vals else None

    @property
    def mean(self) -> float | None:
        mv, ma = self.median_vocal, self.median_acc
        if mv is None or ma is None:
            return None
        return (mv + ma) / 2.0

    def to_table(self) -> str:
        """Per-song rows, then a summary row holding the two split medians
        and their average under columns SDR(V), SDR(A), Mean."""

        def fmt(v):
            return "      --" if v is None else f"{v:8.3f}"

        lines = [f"{'song':<24s} {'SDR(V)':>8s} {'SDR(A)':>8s} {'Mean':>8s}"]
        for song_id in sorted(self.per_song):
            v, a = self.per_song[song_id]
            lines.append(f"{song_id:<24s} {fmt(v)} {fmt(a)}")
        lines.append("-" * 51)
        lines.append(
            f"{'overall':<24s} {fmt(self.median_vocal)} {fmt(self.median_acc)}"
            f" {fmt(self.mean)}"
        )
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_song": {k: list(v) for k, v in sorted(self.per_song.items())},
                "summary": {
                    "sdr_vocal": self.median_vocal,
                    "sdr_acc": self.median_acc,
                    "mean": self.mean,
                },
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalResult":
        d = json.loads(text)
        per_song = {k: (v[0], v[1]) for k, v in d["per_song"].items()}
        return cls(per_song)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalResult":
        return cls.from_json(Path(path).read_text())


def evaluate_testset(
    model: Separator, songs: Sequence[tuple[str, AudioClip, SourcePair]]
) -> EvalResult:
    """Median-of-medians over a test set of (song_id, mixture, references)."""
    if not songs:
        raise ValueError("empty test set")
    per_song = {}
    for song_id, mixture, refs in songs:
        per_song[song_id] = evaluate_song(model, mixture, refs)
    return EvalResult(per_song)
