import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxsep import dsp, vad
from voxsep.dsp import AudioClip, SourcePair
from voxsep.vad import (
    QualityReport,
    VadTrainConfig,
    build_vad,
    count_poor_frames,
    load_reports,
    load_vad,
    mean_poor_fraction,
    quality_histogram,
    rank_and_filter,
    save_reports,
    save_vad,
    train_vad,
    vad_target,
)

SR = dsp.SAMPLE_RATE


def _clip(n=SR, seed=0, scale=0.1):
    return AudioClip(np.random.default_rng(seed).standard_normal(n) * scale)


class TestTarget:
    def test_source_equals_mixture_gives_ones(self):
        x = _clip()
        t = vad_target(x, x)
        active = dsp.frame_rms(x.samples) >= vad.SILENCE_RMS
        assert np.all(t[active] == 1.0)

    def test_jointly_silent_is_zero(self):
        z = AudioClip(np.zeros(SR))
        assert np.array_equal(vad_target(z, z), np.zeros(len(vad_target(z, z))))

    def test_silent_source_loud_other(self):
        other = _clip(seed=1)
        z = AudioClip(np.zeros(SR))
        t = vad_target(z, other)  # mixture = 0 + other
        assert np.all(t == 0.0)

    def test_equal_energy_orthogonal_sources(self):
        """Sine and cosine at a bin frequency: exact half-energy frames."""
        k = 32  # bin-aligned frequency: k cycles per fft_size samples
        n = 8 * SR // 10
        i = np.arange(n)
        a = np.sin(2 * np.pi * k * i / dsp.FFT_SIZE)
        b = np.cos(2 * np.pi * k * i / dsp.FFT_SIZE)
        t = vad_target(AudioClip(0.1 * a), AudioClip(0.1 * (a + b)))
        inner = t[2:-2]  # edges see reflect padding
        assert np.max(np.abs(inner - 0.5)) < 1e-12

    def test_ratio_clipped_to_unit_interval(self):
        src = _clip(seed=2)
        mix = AudioClip(src.samples * 0.1)  # "mixture" weaker than source
        t = vad_target(src, mix)
        assert np.all((t >= 0.0) & (t <= 1.0))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            vad_target(_clip(100), _clip(200))


class TestDetectorNet:
    def test_forward_shapes(self):
        net = build_vad("vocal", f_bins=33)
        mag = np.abs(np.random.default_rng(0).standard_normal((12, 33)))
        out = net.predict(mag)
        assert out.shape == (12,)
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_full_band_shape(self):
        net = build_vad("accompaniment")
        mag = np.abs(np.random.default_rng(1).standard_normal((7, dsp.N_BINS)))
        assert net.predict(mag).shape == (7,)

    def test_bad_tag_rejected(self):
        with pytest.raises(ValueError):
            build_vad("drums")

    def test_save_load_identical(self, tmp_path):
        net = build_vad("vocal", seed=4)
        save_vad(net, tmp_path / "v.npz")
        back = load_vad(tmp_path / "v.npz")
        assert back.tag == "vocal"
        mag = np.abs(np.random.default_rng(2).standard_normal((9, dsp.N_BINS)))
        assert np.array_equal(net.predict(mag), back.predict(mag))

    def test_trainable_on_toy_data(self):
        """A briefly trained detector must beat chance at predicting the
        energy ratio of clearly active vs silent stretches."""
        rng = np.random.default_rng(0)
        pairs = []
        for s in range(4):
            n = 2 * SR
            gate = np.zeros(n)
            gate[: n // 2] = 1.0  # vocal active in the first half only
            v = rng.standard_normal(n) * 0.2 * gate
            a = rng.standard_normal(n) * 0.2
            pairs.append(SourcePair(AudioClip(v), AudioClip(a)))
        cfg = VadTrainConfig(iterations=60, batch_size=2, window_seconds=1.0, seed=0)
        net = train_vad(pairs, "vocal", cfg)
        test = pairs[0]
        mag = np.abs(dsp.stft_array(test.mixture().samples))
        pred = net.predict(mag)
        truth = vad_target(test.vocal, test.mixture())
        assert np.mean(np.abs(pred - truth)) < 0.15


class TestQualityReports:
    def test_report_bounds(self):
        with pytest.raises(ValueError):
            QualityReport("x", 10, 11)
        assert QualityReport("x", 10, 5).poor_fraction == 0.5
        assert QualityReport("empty", 0, 0).poor_fraction == 0.0

    def test_jsonl_roundtrip(self, tmp_path):
        reports = [QualityReport(f"s{i}", 100, i * 10) for i in range(5)]
        save_reports(reports, tmp_path / "r.jsonl")
        assert load_reports(tmp_path / "r.jsonl") == reports

    def test_count_poor_frames_shapes(self):
        vv, va = build_vad("vocal", seed=0), build_vad("accompaniment", seed=1)
        rep = count_poor_frames(_clip(seed=1), _clip(seed=2), vv, va, song_id="s")
        assert rep.song_id == "s"
        assert 0 <= rep.poor_frames <= rep.n_frames

    @given(seed=st.integers(0, 50))
    @settings(max_examples=8, deadline=None)
    def test_tau_monotone(self, seed):
        """Raising tau can only shrink the poor-frame count."""
        vv, va = build_vad("vocal", seed=0), build_vad("accompaniment", seed=1)
        voc, acc = _clip(SR // 2, seed=seed), _clip(SR // 2, seed=seed + 1000)
        counts = [
            count_poor_frames(voc, acc, vv, va, tau).poor_frames
            for tau in (0.1, 0.25, 0.5, 0.9)
        ]
        assert counts == sorted(counts, reverse=True)


class TestRanking:
    REPORTS = [
        QualityReport("b", 100, 30),
        QualityReport("a", 100, 30),
        QualityReport("c", 100, 10),
        QualityReport("d", 100, 90),
    ]

    def test_keeps_ceil_fraction(self):
        assert rank_and_filter(self.REPORTS, 0.25) == ["c"]
        assert rank_and_filter(self.REPORTS, 0.5) == ["c", "a"]
        # 0.6 * 4 = 2.4 -> ceil 3
        assert rank_and_filter(self.REPORTS, 0.6) == ["c", "a", "b"]
        assert rank_and_filter(self.REPORTS, 1.0) == ["c", "a", "b", "d"]

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            rank_and_filter(self.REPORTS, 0.0)
        with pytest.raises(ValueError):
            rank_and_filter(self.REPORTS, 1.1)
        with pytest.raises(ValueError):
            rank_and_filter([], 0.5)

    def test_mean_poor_fraction(self):
        assert mean_poor_fraction(self.REPORTS) == pytest.approx(0.4)
        assert mean_poor_fraction([]) == 0.0

    def test_histogram_counts(self):
        hist = quality_histogram({"x": self.REPORTS}, bins=10)
        assert sum(hist["x"]["counts"]) == 4
        assert hist["x"]["n_songs"] == 4
        assert len(hist["x"]["edges"]) == 11
        assert hist["x"]["mean_poor_fraction"] == pytest.approx(0.4)
