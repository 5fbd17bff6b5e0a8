"""Audio I/O, resampling, segmentation, STFT analysis/synthesis and mask application.

Everything downstream works on mono 16 kHz float audio. Spectrograms are
T x 513 complex arrays from a 1024-point STFT with hop 256 and a periodic
square-root-Hann window on both sides, which satisfies COLA at 75% overlap
and therefore reconstructs exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
FFT_SIZE = 1024
HOP = 256
N_BINS = FFT_SIZE // 2 + 1  # 513
SEGMENT_SECONDS = 30.0

# Kaiser windowed-sinc resampler: 64 taps per polyphase branch.
_RESAMPLE_BETA = 8.6
_RESAMPLE_TAPS_PER_PHASE = 64


class IngestionError(Exception):
    """Raised when an input audio file cannot be turned into an AudioClip."""


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform at 16 kHz. Samples are float64 in nominal [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class SourcePair:
    """Time-aligned vocal and accompaniment tracks of one song (or segment)."""

    vocal: AudioClip
    accompaniment: AudioClip
    song_id: str = ""

    def __post_init__(self):
        if len(self.vocal) != len(self.accompaniment):
            raise ValueError(
                f"source lengths differ: vocal {len(self.vocal)} vs "
                f"accompaniment {len(self.accompaniment)}"
            )
        if self.vocal.sample_rate != self.accompaniment.sample_rate:
            raise ValueError("source sample rates differ")

    def mixture(self) -> AudioClip:
        """Elementwise sum of the two sources, no renormalization."""
        return AudioClip(self.vocal.samples + self.accompaniment.samples)

    def __len__(self) -> int:
        return len(self.vocal)


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames, shape (n_frames, n_bins)."""

    values: np.ndarray
    fft_size: int = FFT_SIZE
    frame_hop: int = HOP

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"Spectrogram must be 2-D, got shape {values.shape}")
        if values.shape[1] != self.fft_size // 2 + 1:
            raise ValueError(
                f"bin count {values.shape[1]} does not match fft_size {self.fft_size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("Spectrogram contains non-finite values")
        object.__setattr__(self, "values", np.asarray(values, dtype=np.complex128))

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def sqrt_hann(n: int) -> np.ndarray:
    """Square root of the periodic Hann window of length n."""
    k = np.arange(n)
    hann = 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))
    return np.sqrt(hann)


def _n_frames(n_samples: int, hop: int) -> int:
    return max(1, -(-n_samples // hop))  # ceil division


def stft_array(x: np.ndarray, fft_size: int = FFT_SIZE, hop: int | None = None) -> np.ndarray:
    """STFT of a 1-D float array. Returns (ceil(len/hop), fft_size//2+1) complex.

    The signal is zero-padded up to a hop multiple, then reflect-padded by
    1.5*hop on each side so every frame is fully populated and the matching
    overlap-add synthesis is exact.
    """
    if hop is None:
        hop = fft_size // 4
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    if x.size == 0:
        raise ValueError("stft of an empty signal")
    pad_edge = (fft_size - hop) // 2  # 384 for 1024/256
    n_frames = _n_frames(x.size, hop)
    x = np.pad(x, (0, n_frames * hop - x.size))
    if x.size > 1:
        x = np.pad(x, pad_edge, mode="reflect")
    else:
        x = np.pad(x, pad_edge)
    window = sqrt_hann(fft_size)
    frames = np.lib.stride_tricks.sliding_window_view(x, fft_size)[::hop][:n_frames]
    return np.fft.rfft(frames * window, axis=1)


def istft_array(
    spec: np.ndarray, out_len: int, fft_size: int = FFT_SIZE, hop: int | None = None
) -> np.ndarray:
    """Overlap-add inverse of :func:`stft_array`; exact within float rounding."""
    if hop is None:
        hop = fft_size // 4
    spec = np.asarray(spec)
    n_frames = spec.shape[0]
    if out_len < 1 or _n_frames(out_len, hop) != n_frames:
        raise ValueError(
            f"out_len {out_len} inconsistent with {n_frames} frames at hop {hop}"
        )
    pad_edge = (fft_size - hop) // 2
    window = sqrt_hann(fft_size)
    frames = np.fft.irfft(spec, n=fft_size, axis=1) * window
    total = n_frames * hop + 2 * pad_edge
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window * window
    for t in range(n_frames):
        start = t * hop
        out[start : start + fft_size] += frames[t]
        norm[start : start + fft_size] += wsq
    good = norm > 1e-10
    out[good] /= norm[good]
    return out[pad_edge : pad_edge + out_len]


def stft(clip: AudioClip) -> Spectrogram:
    """1024-point STFT, hop 256, of a mono 16 kHz clip."""
    return Spectrogram(stft_array(clip.samples))


def istft(spec: Spectrogram, out_len: int) -> AudioClip:
    """Inverse STFT back to a waveform of out_len samples."""
    return AudioClip(istft_array(spec.values, out_len, spec.fft_size, spec.frame_hop))


def apply_mask(mixture: Spectrogram, mask: np.ndarray) -> Spectrogram:
    """Elementwise complex multiplication mask * mixture."""
    mask = np.asarray(mask)
    if mask.shape != mixture.values.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match spectrogram {mixture.values.shape}"
        )
    return Spectrogram(mask * mixture.values, mixture.fft_size, mixture.frame_hop)


def ideal_mask(source: Spectrogram, mixture: Spectrogram, floor: float = 1e-8) -> np.ndarray:
    """Complex ratio mask S/X, zeroed where the mixture magnitude is below floor."""
    if source.values.shape != mixture.values.shape:
        raise ValueError("source/mixture spectrogram shapes differ")
    x = mixture.values
    out = np.zeros_like(x)
    keep = np.abs(x) > floor
    out[keep] = source.values[keep] / x[keep]
    return out


def frame_energies(x: np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Windowed per-frame energies, aligned with the frames of :func:`stft_array`."""
    x = np.asarray(x, dtype=np.float64)
    pad_edge = (fft_size - hop) // 2
    n_frames = _n_frames(x.size, hop)
    x = np.pad(x, (0, n_frames * hop - x.size))
    if x.size > 1:
        x = np.pad(x, pad_edge, mode="reflect")
    else:
        x = np.pad(x, pad_edge)
    window = sqrt_hann(fft_size)
    frames = np.lib.stride_tricks.sliding_window_view(x, fft_size)[::hop][:n_frames]
    return np.sum((frames * window) ** 2, axis=1)


def frame_rms(x: np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Unwindowed per-frame RMS on the same framing grid."""
    x = np.asarray(x, dtype=np.float64)
    pad_edge = (fft_size - hop) // 2
    n_frames = _n_frames(x.size, hop)
    x = np.pad(x, (0, n_frames * hop - x.size))
    if x.size > 1:
        x = np.pad(x, pad_edge, mode="reflect")
    else:
        x = np.pad(x, pad_edge)
    frames = np.lib.stride_tricks.sliding_window_view(x, fft_size)[::hop][:n_frames]
    return np.sqrt(np.mean(frames**2, axis=1))


def resample(x: np.ndarray, src_rate: int, dst_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser beta 8.6)."""
    if src_rate == dst_rate:
        return np.asarray(x, dtype=np.float64)
    g = gcd(src_rate, dst_rate)
    up, down = dst_rate // g, src_rate // g
    taps = _RESAMPLE_TAPS_PER_PHASE * max(up, down) + 1
    h = sp_signal.firwin(taps, 1.0 / max(up, down), window=("kaiser", _RESAMPLE_BETA))
    y = sp_signal.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)
    target = int(round(len(x) * dst_rate / src_rate))
    if len(y) > target:
        y = y[:target]
    elif len(y) < target:
        y = np.pad(y, (0, target - len(y)))
    return y


def load_audio(path: str | Path) -> AudioClip:
    """Read a PCM WAV file (16/24-bit int or 32-bit float, any rate and channel
    count) and return it as a mono 16 kHz clip. Multichannel input is averaged
    to mono before resampling."""
    path = Path(path)
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise IngestionError(f"cannot read {path}: file not found") from None
    except Exception as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if data.size == 0:
        raise IngestionError(f"cannot read {path}: zero-length audio")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy delivers 24-bit PCM left-justified in int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise IngestionError(f"cannot read {path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = resample(x, rate, SAMPLE_RATE)
    return AudioClip(x)


def save_audio(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM WAV, 16 kHz mono. Values are clipped to [-1, 1]."""
    x = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype(np.int16)
    wavfile.write(str(path), clip.sample_rate, pcm)


def segment_pair(pair: SourcePair, seg_seconds: float = SEGMENT_SECONDS) -> list[SourcePair]:
    """Cut a pair into consecutive non-overlapping segments of seg_seconds.

    The final partial segment is zero-padded to full length, both sources
    identically. A zero-length pair yields one all-zero segment.
    """
    seg_len = int(round(seg_seconds * pair.vocal.sample_rate))
    if seg_len <= 0:
        raise ValueError("seg_seconds must be positive")
    total = len(pair)
    n_segs = max(1, -(-total // seg_len))
    voc = np.pad(pair.vocal.samples, (0, n_segs * seg_len - total))
    acc = np.pad(pair.accompaniment.samples, (0, n_segs * seg_len - total))
    out = []
    for i in range(n_segs):
        sl = slice(i * seg_len, (i + 1) * seg_len)
        out.append(
            SourcePair(
                AudioClip(voc[sl]),
                AudioClip(acc[sl]),
                song_id=f"{pair.song_id}#{i:03d}" if pair.song_id else f"#{i:03d}",
            )
        )
    return out
