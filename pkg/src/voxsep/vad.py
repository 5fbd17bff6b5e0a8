"""Frame-level source-activity detection and pseudo-label quality filtering.

Two detectors (one per source) are trained to predict each frame's
source-to-mixture energy ratio from a magnitude spectrogram. Feeding a
self-labeled vocal track to the accompaniment detector (and vice versa)
estimates cross-leakage; frames where either leakage exceeds a threshold
count as poor, and songs are ranked by their fraction of poor frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import dsp
from .dsp import AudioClip, SourcePair
from .training import ADAM_BETAS, ADAM_EPS, LrSchedule, TrainingDivergedError, lr_at

SILENCE_RMS = 1e-4
DEFAULT_TAU = 0.25
VAD_VERSION = 1


def vad_target(
    source: AudioClip,
    mixture: AudioClip,
    fft_size: int = dsp.FFT_SIZE,
    hop: int = dsp.HOP,
    silence_rms: float = SILENCE_RMS,
) -> np.ndarray:
    """Per-frame windowed energy ratio E_source/E_mixture, clipped to [0,1].

    Frames where both sources (the named one and the residual
    mixture-minus-source) fall below the silence RMS are defined as 0.
    """
    if len(source) != len(mixture):
        raise ValueError(f"length mismatch: {len(source)} vs {len(mixture)}")
    e_src = dsp.frame_energies(source.samples, fft_size, hop)
    e_mix = dsp.frame_energies(mixture.samples, fft_size, hop)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(e_mix > 0, e_src / np.where(e_mix > 0, e_mix, 1.0), 0.0)
    ratio = np.clip(ratio, 0.0, 1.0)
    rms_src = dsp.frame_rms(source.samples, fft_size, hop)
    rms_other = dsp.frame_rms(mixture.samples - source.samples, fft_size, hop)
    ratio[(rms_src < silence_rms) & (rms_other < silence_rms)] = 0.0
    return ratio


def _silent_frames(mag: np.ndarray, silence_rms: float = SILENCE_RMS) -> np.ndarray:
    """Mask of frames whose windowed RMS, recovered from the one-sided
    magnitudes by Parseval, falls below the silence threshold."""
    n = 2 * (mag.shape[1] - 1)
    sq = np.asarray(mag, dtype=np.float64) ** 2
    energy = (2.0 * sq[:, 1:-1].sum(axis=1) + sq[:, 0] + sq[:, -1]) / n
    # periodic sqrt-Hann: sum(w^2) == n/2
    return np.sqrt(energy / (n / 2)) < silence_rms


class VadNet(nn.Module):
    """Conv-recurrent ratio predictor: 3 conv blocks (16/32/64 channels,
    3x3, batch norm + ReLU, 1x4 frequency pooling where the axis allows),
    a bidirectional GRU over time, and a per-frame sigmoid head."""

    def __init__(self, tag: str, f_bins: int = dsp.N_BINS, hidden: int = 64):
        super().__init__()
        if tag not in ("vocal", "accompaniment"):
            raise ValueError(f"unknown tag {tag!r}")
        self.tag = tag
        self.f_bins = f_bins
        self.hidden = hidden
        blocks = []
        c_in, f = 1, f_bins
        for c_out in (16, 32, 64):
            pool_f = 4 if f >= 4 else (2 if f >= 2 else 1)
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, padding=1),
                    nn.BatchNorm2d(c_out),
                    nn.ReLU(),
                    nn.MaxPool2d((1, pool_f)),
                )
            )
            c_in, f = c_out, f // pool_f
        self.blocks = nn.ModuleList(blocks)
        self.rnn = nn.GRU(64 * f, hidden, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * hidden, 1)

    def forward(self, mag: torch.Tensor) -> torch.Tensor:
        """mag: (B, T, F) magnitude spectrogram -> (B, T) ratios in [0,1]."""
        x = mag.unsqueeze(1)  # (B, 1, T, F)
        for block in self.blocks:
            x = block(x)
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        x, _ = self.rnn(x)
        return torch.sigmoid(self.head(x)).squeeze(-1)

    def predict(self, mag: np.ndarray) -> np.ndarray:
        """Single-spectrogram inference on a (T, F) magnitude array.

        Silent frames are forced to 0: the training target is defined as
        0 where nothing sounds, but batch-normalized nets see all-zero
        columns inconsistently during training and land on an arbitrary
        constant there instead.
        """
        if mag.ndim != 2 or mag.shape[1] != self.f_bins:
            raise ValueError(f"expected (T, {self.f_bins}) magnitudes, got {mag.shape}")
        was_training = self.training
        self.eval()
        with torch.no_grad():
            out = self(torch.from_numpy(np.ascontiguousarray(mag)).float().unsqueeze(0))
        self.train(was_training)
        ratios = out.squeeze(0).numpy().astype(np.float64)
        ratios[_silent_frames(mag)] = 0.0
        return ratios


def build_vad(tag: str, f_bins: int = dsp.N_BINS, seed: int = 0) -> VadNet:
    torch.manual_seed(seed)
    net = VadNet(tag, f_bins)
    net.eval()
    return net


@dataclass(frozen=True)
class VadTrainConfig:
    iterations: int = 400
    batch_size: int = 4
    window_seconds: float = 2.0
    schedule: LrSchedule = LrSchedule(initial=1e-3)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.window_seconds <= 0:
            raise ValueError("iterations, batch_size, window_seconds must be positive")


def train_vad(
    labeled: Sequence[SourcePair],
    target_source: str,
    config: VadTrainConfig = VadTrainConfig(),
    fft_size: int = dsp.FFT_SIZE,
    hop: int = dsp.HOP,
    log_path: str | Path | None = None,
) -> VadNet:
    """Fit one detector with binary cross-entropy against vad_target ratios."""
    if not labeled:
        raise ValueError("empty labeled dataset")
    sr = labeled[0].vocal.sample_rate
    window = int(round(config.window_seconds * sr))
    f_bins = fft_size // 2 + 1
    net = build_vad(target_source, f_bins, seed=config.seed)
    net.train()
    opt = torch.optim.Adam(
        net.parameters(), lr=config.schedule.initial, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    rng = np.random.default_rng(config.seed)
    log_records = []
    for it in range(config.iterations):
        mags, targets = [], []
        for _ in range(config.batch_size):
            pair = labeled[int(rng.integers(len(labeled)))]
            total = len(pair)
            if window > total:
                raise ValueError("training window exceeds song length")
            off = int(rng.integers(0, total - window + 1))
            voc = pair.vocal.samples[off : off + window]
            acc = pair.accompaniment.samples[off : off + window]
            # Randomize the relative level so everything from a clean
            # track to a 50/50 mixture is in distribution: at inference
            # the detectors see tracks whose minority source sits
            # anywhere in [0, 1] relative gain.
            g = 0.0 if rng.random() < 0.15 else float(rng.uniform(0.0, 1.0))
            if rng.random() < 0.5:
                mix_s, voc_s, acc_s = voc + g * acc, voc, g * acc
            else:
                mix_s, voc_s, acc_s = g * voc + acc, g * voc, acc
            mix = AudioClip(mix_s, sr)
            src = AudioClip(voc_s if target_source == "vocal" else acc_s, sr)
            mags.append(np.abs(dsp.stft_array(mix.samples, fft_size, hop)))
            targets.append(vad_target(src, mix, fft_size, hop))
        x = torch.from_numpy(np.stack(mags)).float()
        y = torch.from_numpy(np.stack(targets)).float()
        for group in opt.param_groups:
            group["lr"] = lr_at(config.schedule, it)
        pred = net(x)
        loss = nn.functional.binary_cross_entropy(pred, y)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite VAD loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_path and (it % 50 == 0 or it == config.iterations - 1):
            log_records.append({"iteration": it, "loss": float(loss)})
    if log_path:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a") as fh:
            for rec in log_records:
                fh.write(json.dumps(rec) + "\n")
    net.eval()
    return net


@dataclass(frozen=True)
class QualityReport:
    song_id: str
    n_frames: int
    poor_frames: int

    def __post_init__(self):
        if not 0 <= self.poor_frames <= self.n_frames:
            raise ValueError("poor_frames must be within [0, n_frames]")

    @property
    def poor_fraction(self) -> float:
        return self.poor_frames / self.n_frames if self.n_frames else 0.0

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "song_id": self.song_id,
                "n_frames": self.n_frames,
                "poor_frames": self.poor_frames,
                "poor_fraction": self.poor_fraction,
            }
        )

    @classmethod
    def from_json_line(cls, line: str) -> "QualityReport":
        d = json.loads(line)
        return cls(d["song_id"], d["n_frames"], d["poor_frames"])


def save_reports(reports: Iterable[QualityReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in reports:
            fh.write(r.to_json_line() + "\n")


def load_reports(path: str | Path) -> list[QualityReport]:
    with Path(path).open() as fh:
        return [QualityReport.from_json_line(line) for line in fh if line.strip()]


def count_poor_frames(
    vocal_track: AudioClip,
    acc_track: AudioClip,
    vad_vocal: VadNet,
    vad_acc: VadNet,
    tau: float = DEFAULT_TAU,
    song_id: str = "",
    fft_size: int = dsp.FFT_SIZE,
    hop: int = dsp.HOP,
) -> QualityReport:
    """Count frames whose cross-leakage exceeds tau in either direction.

    The vocal track goes through the ACCOMPANIMENT detector and the
    accompaniment track through the VOCAL detector; a high predicted ratio
    in either place means the other source leaked into the track.
    """
    if len(vocal_track) != len(acc_track):
        raise ValueError("track length mismatch")
    leak_in_vocal = vad_acc.predict(np.abs(dsp.stft_array(vocal_track.samples, fft_size, hop)))
    leak_in_acc = vad_vocal.predict(np.abs(dsp.stft_array(acc_track.samples, fft_size, hop)))
    poor = (leak_in_vocal > tau) | (leak_in_acc > tau)
    return QualityReport(song_id, int(poor.size), int(np.count_nonzero(poor)))


def rank_and_filter(reports: Sequence[QualityReport], top_fraction: float) -> list[str]:
    """Keep the ceil(top_fraction * N) songs with the fewest poor frames.

    Returns song ids ranked best-first; ties break lexicographically.
    """
    if not reports:
        raise ValueError("no reports to rank")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must be in (0, 1]")
    keep = math.ceil(top_fraction * len(reports))
    ranked = sorted(reports, key=lambda r: (r.poor_fraction, r.song_id))
    return [r.song_id for r in ranked[:keep]]


def mean_poor_fraction(reports: Sequence[QualityReport]) -> float:
    if not reports:
        return 0.0
    return float(np.mean([r.poor_fraction for r in reports]))


def quality_histogram(
    reports_by_dataset: dict[str, Sequence[QualityReport]], bins: int = 10
) -> dict[str, dict]:
    """Shared-edge poor_fraction histograms per dataset, for plotting and
    for comparing where each corpus concentrates."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for name, reports in reports_by_dataset.items():
        fractions = [r.poor_fraction for r in reports]
        counts, _ = np.histogram(fractions, bins=edges)
        out[name] = {
            "counts": counts.tolist(),
            "edges": edges.tolist(),
            "mean_poor_fraction": mean_poor_fraction(reports),
            "n_songs": len(reports),
        }
    return out


def save_vad(net: VadNet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": VAD_VERSION,
        "tag": net.tag,
        "f_bins": net.f_bins,
        "hidden": net.hidden,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, p in net.state_dict().items():
        arrays["state/" + name] = p.detach().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_vad(path: str | Path) -> VadNet:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != VAD_VERSION:
            raise ValueError(f"unsupported detector file version {meta.get('version')}")
        net = VadNet(meta["tag"], meta["f_bins"], meta["hidden"])
        state = {}
        for key in data.files:
            if key.startswith("state/"):
                state[key[len("state/") :]] = torch.from_numpy(data[key])
    net.load_state_dict(state)
    net.eval()
    return net
