"""Data-noise transforms for training examples.

Random windowing, cross-song source mixing, per-source gain, pitch shift,
lowpass, and a peaking EQ, composed by sample_training_example. Every
transform runs on the sources BEFORE they are summed, so the emitted
mixture always equals vocal + accompaniment exactly and supervision stays
consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from fractions import Fraction

import numpy as np
from scipy import signal

from . import dsp
from .dsp import AudioClip, SourcePair


@dataclass(frozen=True)
class AugmentConfig:
    window_seconds: float = 10.0
    p_mix: float = 1.0
    gain_db_range: tuple[float, float] = (-6.0, 6.0)
    pitch_semitone_range: tuple[float, float] = (-2.0, 2.0)
    lowpass_cutoff_hz_range: tuple[float, float] = (2000.0, 7999.0)
    eq_center_hz_range: tuple[float, float] = (100.0, 6000.0)
    eq_gain_db_range: tuple[float, float] = (-9.0, 9.0)
    eq_q_range: tuple[float, float] = (0.5, 2.0)
    p_pitch: float = 0.5
    p_lowpass: float = 0.5
    p_eq: float = 0.5

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        for name in ("p_mix", "p_pitch", "p_lowpass", "p_eq"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in (
            "gain_db_range",
            "pitch_semitone_range",
            "lowpass_cutoff_hz_range",
            "eq_center_hz_range",
            "eq_gain_db_range",
            "eq_q_range",
        ):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be (lo, hi) with lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        kwargs = dict(d)
        for k, v in kwargs.items():
            if isinstance(v, list):
                kwargs[k] = tuple(v)
        return cls(**kwargs)


def random_window(pair: SourcePair, seconds: float, rng: np.random.Generator) -> SourcePair:
    """Cut both sources with one uniformly drawn offset."""
    n = int(round(seconds * pair.vocal.sample_rate))
    total = len(pair)
    if n > total:
        raise ValueError(f"window of {n} samples exceeds pair length {total}")
    offset = int(rng.integers(0, total - n + 1))
    sr = pair.vocal.sample_rate
    return SourcePair(
        AudioClip(pair.vocal.samples[offset : offset + n], sr),
        AudioClip(pair.accompaniment.samples[offset : offset + n], sr),
        pair.song_id,
    )


def random_mix(
    pair_a: SourcePair, pair_b: SourcePair, p: float, rng: np.random.Generator
) -> SourcePair:
    """With probability p pair vocal_a with accompaniment_b, else keep pair_a."""
    if len(pair_a) != len(pair_b):
        raise ValueError(f"duration mismatch: {len(pair_a)} vs {len(pair_b)}")
    if rng.random() < p:
        # provenance follows the vocal half
        return SourcePair(pair_a.vocal, pair_b.accompaniment, pair_a.song_id)
    return pair_a


def scale_sources(pair: SourcePair, gain_voc_db: float, gain_acc_db: float) -> SourcePair:
    if not (np.isfinite(gain_voc_db) and np.isfinite(gain_acc_db)):
        raise ValueError("gains must be finite")
    sr = pair.vocal.sample_rate
    return SourcePair(
        AudioClip(pair.vocal.samples * 10.0 ** (gain_voc_db / 20.0), sr),
        AudioClip(pair.accompaniment.samples * 10.0 ** (gain_acc_db / 20.0), sr),
        pair.song_id,
    )


def _phase_vocoder_stretch(x: np.ndarray, factor: float) -> np.ndarray:
    """Stretch duration by `factor` at constant pitch (frame interpolation
    with per-bin phase accumulation)."""
    fft_size, hop = 1024, 256
    spec = dsp.stft_array(x, fft_size, hop)
    n_frames, n_bins = spec.shape
    steps = np.arange(0.0, n_frames, 1.0 / factor)
    omega = 2.0 * np.pi * hop * np.arange(n_bins) / fft_size
    mag = np.abs(spec)
    phase = np.angle(spec)
    out = np.empty((len(steps), n_bins), dtype=np.complex128)
    acc = phase[0].copy()
    for i, s in enumerate(steps):
        lo = min(int(s), n_frames - 1)
        hi = min(lo + 1, n_frames - 1)
        frac = s - lo
        m = (1.0 - frac) * mag[lo] + frac * mag[hi]
        out[i] = m * np.exp(1j * acc)
        dphi = phase[hi] - phase[lo] - omega
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        acc += omega + dphi
    return dsp.istft_array(out, len(steps) * hop, fft_size, hop)


def pitch_shift(clip: AudioClip, semitones: float, rng=None) -> AudioClip:
    """Scale pitch by 2^(semitones/12) at unchanged duration: phase-vocoder
    time stretch followed by resampling back to the original length."""
    if abs(semitones) > 12:
        raise ValueError("pitch shift limited to +-12 semitones")
    if semitones == 0.0:
        return clip
    ratio = Fraction(2.0 ** (semitones / 12.0)).limit_denominator(64)
    stretched = _phase_vocoder_stretch(clip.samples, float(ratio))
    shifted = signal.resample_poly(stretched, up=ratio.denominator, down=ratio.numerator)
    n = len(clip)
    if len(shifted) < n:
        shifted = np.pad(shifted, (0, n - len(shifted)))
    return AudioClip(shifted[:n], clip.sample_rate)


def lowpass(clip: AudioClip, cutoff_hz: float) -> AudioClip:
    """Zero-phase order-8 Butterworth lowpass."""
    nyquist = clip.sample_rate / 2
    if not 0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff must be in (0, {nyquist}) Hz")
    sos = signal.butter(8, cutoff_hz, fs=clip.sample_rate, output="sos")
    padlen = min(3 * (2 * sos.shape[0] + 1), len(clip) - 1)
    y = signal.sosfiltfilt(sos, clip.samples, padlen=padlen)
    return AudioClip(y, clip.sample_rate)


def eq_filter(clip: AudioClip, center_hz: float, gain_db: float, q: float) -> AudioClip:
    """Single peaking-EQ biquad (audio-cookbook coefficients), applied causally."""
    if not 0 < center_hz < clip.sample_rate / 2:
        raise ValueError("center frequency out of range")
    if q <= 0:
        raise ValueError("q must be positive")
    a_gain = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * center_hz / clip.sample_rate
    alpha = np.sin(w0) / (2.0 * q)
    cos_w0 = np.cos(w0)
    b = np.array([1.0 + alpha * a_gain, -2.0 * cos_w0, 1.0 - alpha * a_gain])
    a = np.array([1.0 + alpha / a_gain, -2.0 * cos_w0, 1.0 - alpha / a_gain])
    y = signal.lfilter(b / a[0], a / a[0], clip.samples)
    return AudioClip(y, clip.sample_rate)


def _augment_source(clip: AudioClip, config: AugmentConfig, rng: np.random.Generator) -> AudioClip:
    if rng.random() < config.p_pitch:
        clip = pitch_shift(clip, float(rng.uniform(*config.pitch_semitone_range)))
    if rng.random() < config.p_lowpass:
        clip = lowpass(clip, float(rng.uniform(*config.lowpass_cutoff_hz_range)))
    if rng.random() < config.p_eq:
        clip = eq_filter(
            clip,
            float(rng.uniform(*config.eq_center_hz_range)),
            float(rng.uniform(*config.eq_gain_db_range)),
            float(rng.uniform(*config.eq_q_range)),
        )
    return clip


def sample_training_example(
    dataset: list[SourcePair] | tuple[SourcePair, ...],
    config: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[AudioClip, SourcePair]:
    """Draw one augmented (mixture, target) pair.

    Window and gain always apply; pitch/lowpass/EQ apply independently per
    source with their configured probabilities. The mixture is built by
    summing the final sources, so mixture == vocal + accompaniment exactly.
    """
    if not dataset:
        raise ValueError("empty dataset")
    idx = int(rng.integers(len(dataset)))
    pair = random_window(dataset[idx], config.window_seconds, rng)
    if len(dataset) >= 2:
        partner = int(rng.integers(len(dataset) - 1))
        if partner >= idx:
            partner += 1
        other = random_window(dataset[partner], config.window_seconds, rng)
        pair = random_mix(pair, other, config.p_mix, rng)
    pair = scale_sources(
        pair,
        float(rng.uniform(*config.gain_db_range)),
        float(rng.uniform(*config.gain_db_range)),
    )
    target = SourcePair(
        _augment_source(pair.vocal, config, rng),
        _augment_source(pair.accompaniment, config, rng),
        pair.song_id,
    )
    return target.mixture(), target
