import numpy as np
import pytest
import torch

from voxsep import dsp, model
from voxsep.dsp import AudioClip
from voxsep.model import (
    PRESETS,
    SeparatorConfig,
    build_separator,
    count_params,
    load_checkpoint,
    positional_embedding,
    predict_masks,
    save_checkpoint,
    separate,
)


def _spec(t=20, f=33, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((t, f)) + 1j * rng.standard_normal((t, f))).astype(
        complex
    )


class TestPositionalEmbedding:
    def test_closed_form(self):
        k, f_bins = 10, 513
        emb = positional_embedding(3, f_bins, k)
        f = np.arange(f_bins)[:, None]
        j = np.arange(1, k + 1)[None, :]
        expected = np.cos(2.0 ** (j - 1) * np.pi * f / (f_bins - 1))
        assert np.max(np.abs(emb[0] - expected)) < 1e-12
        assert np.max(np.abs(emb[2] - emb[0])) == 0.0

    def test_boundary_rows(self):
        emb = positional_embedding(1, 513, 10)
        assert np.array_equal(emb[0, 0], np.ones(10))
        # f = F: cos(pi * 2^(j-1)) = -1 for j=1, +1 afterwards
        assert np.allclose(emb[0, 512], [-1.0] + [1.0] * 9, atol=1e-12)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            positional_embedding(0, 513, 10)


class TestConfig:
    def test_presets_valid(self):
        for name, cfg in PRESETS.items():
            assert cfg.fft_size == (cfg.f_bins - 1) * 2
            assert cfg.hop * 4 == cfg.fft_size

    def test_schedule_length_checked(self):
        with pytest.raises(ValueError):
            SeparatorConfig(n_levels=3, channel_schedule=(8, 16))

    def test_decreasing_schedule_rejected(self):
        with pytest.raises(ValueError):
            SeparatorConfig(n_levels=2, channel_schedule=(16, 8))

    def test_f_bins_power_of_two_plus_one(self):
        with pytest.raises(ValueError):
            SeparatorConfig(f_bins=100)

    def test_param_count_scale(self):
        # named presets sit near their reference sizes
        small = count_params(build_separator(PRESETS["small"]))
        medium = count_params(build_separator(PRESETS["medium"]))
        large = count_params(build_separator(PRESETS["large"]))
        assert 1.0e6 < small < 2.5e6
        assert 6e6 < medium < 11e6
        assert 12e6 < large < 20e6
        assert small < medium < large


class TestSeparator:
    def test_mask_shapes_and_dtype(self):
        net = build_separator(PRESETS["toy"])
        voc, acc = predict_masks(net, _spec(t=17))
        assert voc.shape == acc.shape == (17, 33)
        # complex ratio masks: both magnitude and phase correction
        assert np.iscomplexobj(voc) and np.iscomplexobj(acc)
        assert np.all(np.isfinite(voc.real)) and np.all(np.isfinite(voc.imag))

    def test_deterministic_given_seed(self):
        a = build_separator(PRESETS["toy"], seed=5)
        b = build_separator(PRESETS["toy"], seed=5)
        sa = a.state_dict()
        sb = b.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
        c = build_separator(PRESETS["toy"], seed=6)
        assert any(not torch.equal(sa[k], v) for k, v in c.state_dict().items())

    def test_variable_length_input(self):
        net = build_separator(PRESETS["toy"])
        for t in (1, 2, 7, 64):
            voc, _ = predict_masks(net, _spec(t=t, seed=t))
            assert voc.shape == (t, 33)

    def test_causal_in_time(self):
        """Future frames cannot change past outputs."""
        net = build_separator(PRESETS["toy"], seed=1)
        t = 24
        base = _spec(t=t, seed=3)
        for t0 in (1, t // 2, t - 1):
            bumped = base.copy()
            bumped[t0:] *= 3.7
            bumped[t0:] += 1.0
            voc_a, acc_a = predict_masks(net, base)
            voc_b, acc_b = predict_masks(net, bumped)
            assert np.max(np.abs(voc_a[:t0] - voc_b[:t0])) < 1e-6
            assert np.max(np.abs(acc_a[:t0] - acc_b[:t0])) < 1e-6

    def test_separate_waveforms(self):
        net = build_separator(PRESETS["micro"])
        mix = AudioClip(np.random.default_rng(0).standard_normal(8000) * 0.1)
        pair = separate(net, mix)
        assert len(pair.vocal) == len(pair.accompaniment) == len(mix)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = build_separator(PRESETS["toy"], seed=2)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, net, iteration=123, extra={"note": "x"})
        restored, info = load_checkpoint(path)
        assert info["iteration"] == 123
        assert info["extra"]["note"] == "x"
        spec = _spec(t=9)
        a = predict_masks(net, spec)
        b = predict_masks(restored, spec)
        # parameters are serialized in float32
        assert np.max(np.abs(a[0] - b[0])) < 1e-5

    def test_optimizer_state_roundtrip(self, tmp_path):
        from voxsep.training import LossWeights, LrSchedule, fit, make_optimizer

        net = build_separator(PRESETS["toy"], seed=0)
        opt = make_optimizer(net)

        def provider(rng):
            x = rng.standard_normal(2000) * 0.1
            v = AudioClip(x)
            a = AudioClip(rng.standard_normal(2000) * 0.1)
            return dsp.SourcePair(v, a).mixture(), dsp.SourcePair(v, a)

        fit(net, provider, iterations=2, optimizer=opt,
            weights=LossWeights(), schedule=LrSchedule(), seed=0)
        path = tmp_path / "c.npz"
        save_checkpoint(path, net, optimizer=opt, iteration=2)
        _, info = load_checkpoint(path)
        assert info["optimizer_state"] is not None

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.npz"
        path.write_bytes(b"this is not a checkpoint")
        with pytest.raises(model.CheckpointError):
            load_checkpoint(path)
