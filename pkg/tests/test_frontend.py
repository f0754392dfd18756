"""Front-end: framing, spectra, mel/cepstra oracles, assembly, resynthesis."""

import numpy as np
import pytest

from ccrn import corpus, frontend as fe


@pytest.fixture(scope="module")
def speech():
    return corpus.synth_speech(1.2, seed=21)


def dct_direct(row):
    """O(n^2) orthonormal type-II DCT, the independent oracle."""
    n = row.size
    out = np.zeros(n)
    for k in range(n):
        acc = 0.0
        for i in range(n):
            acc += row[i] * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
        scale = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
        out[k] = scale * acc
    return out


class TestFraming:
    def test_window_and_hop_sizes(self, speech):
        frames = fe.frame_signal(speech, 25.0, 10.0)
        assert frames.shape[1] == 400

    def test_one_second_gives_98_frames(self):
        w = fe.Waveform(np.ones(16000) * 0.1)
        assert fe.frame_signal(w, 25.0, 10.0).shape[0] == 98

    def test_ones_input_yields_window(self):
        w = fe.Waveform(np.ones(3200))
        frames = fe.frame_signal(w, 25.0, 10.0)
        window = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(400) / 400)
        for row in frames:
            assert np.allclose(row, window, atol=1e-12)

    def test_short_signal_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            fe.frame_signal(fe.Waveform(np.zeros(300)), 25.0, 10.0)


class TestLogSpectrum:
    def test_zero_frame_hits_floor(self):
        spec = fe.log_spectrum(np.zeros((2, 400)))
        assert np.all(spec.frames == np.log(1e-10))

    def test_tone_peak_bin(self):
        t = np.arange(16000) / 16000
        tone = fe.Waveform(0.5 * np.sin(2 * np.pi * 1000 * t))
        spec = fe.log_spectrum(fe.frame_signal(tone, 25.0))
        assert np.argmax(spec.frames[10][:257]) == 32
        assert np.argmax(spec.frames[10][257:]) + 257 == 512 - 32

    def test_mirror_symmetry(self, speech):
        spec = fe.log_spectrum(fe.frame_signal(speech, 25.0))
        for i in range(1, 256):
            assert np.max(np.abs(spec.frames[:, i] - spec.frames[:, 512 - i])) < 1e-9

    def test_oversize_frame_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            fe.log_spectrum(np.zeros((1, 600)))


class TestMelCepstra:
    def test_zero_frame_floors(self):
        out = fe.mel_features(np.zeros((3, 400)), 32)
        assert np.all(out == np.log(1e-10))

    def test_white_noise_is_finite(self):
        rng = np.random.default_rng(22)
        out = fe.mel_features(rng.standard_normal((4, 800)), 50)
        assert np.all(np.isfinite(out))

    def test_tone_hits_nearest_filter(self):
        centers = fe.mel_filter_centers(32)
        for freq in (500.0, 1000.0, 3000.0):
            t = np.arange(16000) / 16000
            tone = fe.Waveform(0.5 * np.sin(2 * np.pi * freq * t))
            out = fe.mel_features(fe.frame_signal(tone, 25.0), 32)
            got = int(np.argmax(out.mean(axis=0)))
            want = int(np.argmin(np.abs(centers - freq)))
            assert got == want

    def test_constant_row_dct(self):
        c = 1.7
        out = fe.cepstral_features(np.full((1, 32), c))
        assert abs(out[0, 0] - c * np.sqrt(32)) < 1e-9
        assert np.max(np.abs(out[0, 1:])) < 1e-9

    def test_zero_row_dct(self):
        assert np.all(fe.cepstral_features(np.zeros((1, 50))) == 0.0)

    def test_matches_direct_dct_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            n = int(rng.choice([8, 16, 32]))
            row = rng.standard_normal(n)
            got = fe.cepstral_features(row[None, :])[0]
            assert np.max(np.abs(got - dct_direct(row))) < 1e-8


class TestAssemble:
    def test_width_876(self, speech):
        feats, phase = fe.assemble_features(speech)
        assert feats.frames.shape[1] == 876
        assert phase.frames.shape[1] == 257
        assert feats.frames.shape[0] == phase.frames.shape[0]

    def test_unit_variance(self, speech):
        feats, _ = fe.assemble_features(speech)
        std = feats.frames.std(axis=0)
        nonzero = std > 1e-8
        assert np.allclose(std[nonzero], 1.0, atol=1e-6)

    def test_deterministic(self, speech):
        f1, p1 = fe.assemble_features(speech)
        f2, p2 = fe.assemble_features(speech)
        assert np.array_equal(f1.frames, f2.frames)
        assert np.array_equal(p1.frames, p2.frames)

    def test_norm_scale_recorded(self, speech):
        feats, _ = fe.assemble_features(speech)
        raw, _ = fe.assemble_features(speech, normalize=False)
        assert np.allclose(feats.frames * feats.norm_scale, raw.frames, atol=1e-9)

    def test_mean_subtraction_switch(self, speech):
        feats, _ = fe.assemble_features(speech, subtract_mean=True)
        mean = feats.frames.mean(axis=0)
        assert np.max(np.abs(mean)) < 1e-9

    def test_translation_covariance(self, speech):
        shifted = fe.Waveform(speech.samples[160:])
        a, _ = fe.assemble_features(speech, normalize=False)
        b, _ = fe.assemble_features(shifted, normalize=False)
        n = b.frames.shape[0]
        assert np.max(np.abs(a.frames[1:n + 1] - b.frames[:n])) < 1e-6

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="75 ms"):
            fe.assemble_features(fe.Waveform(np.zeros(800)))


class TestReconstruct:
    def test_round_trip_snr(self, speech):
        spec = fe.target_spectrum(speech)
        _, phase = fe.assemble_features(speech)
        n = phase.frames.shape[0]
        rec = fe.reconstruct(fe.LogSpectrogram(spec.frames[:n]), phase, speech.samples.size)
        coverage = (n - 1) * 160 + 400
        interior = slice(200, coverage - 200)
        err = speech.samples[interior] - rec.samples[interior]
        snr = 10 * np.log10(np.sum(speech.samples[interior] ** 2) / max(np.sum(err**2), 1e-300))
        assert snr >= 30.0

    def test_floor_spectrum_is_silent(self):
        spec = fe.LogSpectrogram(np.full((20, 512), np.log(1e-10)))
        phase = fe.PhaseSpectrogram(np.zeros((20, 257)))
        rec = fe.reconstruct(spec, phase, 4000)
        assert np.max(np.abs(rec.samples)) < 1e-6

    def test_magnitude_linearity(self, speech):
        spec = fe.target_spectrum(speech)
        _, phase = fe.assemble_features(speech)
        n = phase.frames.shape[0]
        one = fe.reconstruct(fe.LogSpectrogram(spec.frames[:n]), phase, speech.samples.size)
        two = fe.reconstruct(fe.LogSpectrogram(spec.frames[:n] + np.log(2.0)), phase, speech.samples.size)
        assert np.allclose(two.samples, 2.0 * one.samples, atol=1e-9)

    def test_length_mismatch_rejected(self):
        spec = fe.LogSpectrogram(np.zeros((5, 512)))
        phase = fe.PhaseSpectrogram(np.zeros((6, 257)))
        with pytest.raises(ValueError, match="frames"):
            fe.reconstruct(spec, phase, 100)

    def test_pad_and_trim(self):
        spec = fe.LogSpectrogram(np.zeros((10, 512)))
        phase = fe.PhaseSpectrogram(np.zeros((10, 257)))
        assert fe.reconstruct(spec, phase, 123).samples.size == 123
        assert fe.reconstruct(spec, phase, 99999).samples.size == 99999


class TestFoldUnfold:
    def test_round_trip_constant_groups(self):
        rng = np.random.default_rng(24)
        folded = rng.standard_normal((7, 128))
        expanded = fe.unfold_spectrum(folded)
        assert expanded.shape == (7, 512)
        assert np.allclose(fe.fold_spectrum(expanded, 128), folded, atol=1e-12)

    def test_fold_averages_groups(self):
        frames = np.arange(8.0)[None, :].repeat(2, axis=0)
        folded = fe.fold_spectrum(np.repeat(frames, 64, axis=1), 4)
        assert folded.shape == (2, 4)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="fold"):
            fe.fold_spectrum(np.zeros((2, 512)), 100)


class TestTypes:
    def test_waveform_rate_checked(self):
        with pytest.raises(ValueError, match="sample rate"):
            fe.Waveform(np.zeros(100), sample_rate=8000)

    def test_spectrogram_width_checked(self):
        with pytest.raises(ValueError, match="512"):
            fe.LogSpectrogram(np.zeros((4, 300)))

    def test_feature_width_checked(self):
        with pytest.raises(ValueError, match="876"):
            fe.FeatureSequence(np.zeros((4, 875)))
