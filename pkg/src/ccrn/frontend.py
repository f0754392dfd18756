"""Multi-window acoustic front-end.

Turns a 16 kHz waveform into the 876-dim network input (log FFT of the
25 ms stream stacked with mel filterbank + cepstral features of the 25, 50
and 75 ms streams, all on a 10 ms hop) and the 512-dim log-spectrum
target, and reconstructs a waveform from an enhanced log spectrum plus the
corrupted-signal phase. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft

SAMPLE_RATE = 16000
HOP_MS = 10.0
FFT_BINS = 512
FEATURE_DIM = 876
MAG_FLOOR = 1e-10

# (mel band count, window ms) per analysis stream; resolution grows with
# the window, and the 25 ms stream also feeds the 512-point log FFT.
MEL_STREAMS = ((32, 25.0), (50, 50.0), (100, 75.0))


@dataclass
class Waveform:
    """Mono time-domain signal at the fixed 16 kHz rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class LogSpectrogram:
    """T x 512 natural-log magnitude spectra (25 ms window, 10 ms hop)."""

    frames: np.ndarray
    hop_ms: float = HOP_MS
    win_ms: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != FFT_BINS:
            raise ValueError(f"log spectrogram must be T x {FFT_BINS}, got shape {self.frames.shape}")


@dataclass
class FeatureSequence:
    """T x 876 stacked multi-window features with the applied scale factors."""

    frames: np.ndarray
    norm_scale: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != FEATURE_DIM:
            raise ValueError(f"feature sequence must be T x {FEATURE_DIM}, got shape {self.frames.shape}")
        if self.norm_scale is None:
            self.norm_scale = np.ones(FEATURE_DIM)
        self.norm_scale = np.asarray(self.norm_scale)
        if self.norm_scale.shape != (FEATURE_DIM,):
            raise ValueError("norm_scale must have one entry per feature dimension")


@dataclass
class PhaseSpectrogram:
    """T x 257 phase (radians) of the 25 ms analysis of the corrupted signal."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != FFT_BINS // 2 + 1:
            raise ValueError(f"phase spectrogram must be T x {FFT_BINS // 2 + 1}, got shape {self.frames.shape}")


def _hamming_periodic(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / length)


def _window_samples(win_ms: float) -> int:
    return int(round(win_ms * SAMPLE_RATE / 1000.0))


def frame_signal(w: Waveform, win_ms: float, hop_ms: float = HOP_MS) -> np.ndarray:
    """Slice a waveform into Hamming-windowed frames.

    Returns a T x W matrix with T = floor((len - W) / H) + 1; rejects
    signals shorter than one window.
    """
    win = _window_samples(win_ms)
    hop = _window_samples(hop_ms)
    x = w.samples
    if x.size < win:
        raise ValueError(f"signal of {x.size} samples is shorter than one {win}-sample window")
    n_frames = (x.size - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[:: hop][:n_frames]
    return frames * _hamming_periodic(win)[None, :]


def log_spectrum(frames: np.ndarray, nfft: int = FFT_BINS) -> LogSpectrogram:
    """Natural-log FFT magnitude of each frame, all ``nfft`` bins kept.

    Both mirror-symmetric halves are retained so the channel count matches
    the network's residual width; magnitudes are floored at 1e-10.
    """
    frames = np.asarray(frames)
    if frames.shape[1] > nfft:
        raise ValueError(f"frame length {frames.shape[1]} exceeds FFT size {nfft}")
    mag = np.abs(np.fft.fft(frames, n=nfft, axis=1))
    return LogSpectrogram(np.log(np.maximum(mag, MAG_FLOOR)))


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@lru_cache(maxsize=None)
def _mel_filterbank(n_mels: int, nfft: int) -> np.ndarray:
    """Triangular mel filters spanning 0-8000 Hz on the rfft bin grid."""
    fmax = SAMPLE_RATE / 2.0

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    mel_points = np.linspace(to_mel(0.0), to_mel(fmax), n_mels + 2)
    hz_points = from_mel(mel_points)
    bin_freqs = np.arange(nfft // 2 + 1) * SAMPLE_RATE / nfft
    filters = np.zeros((n_mels, nfft // 2 + 1))
    for i in range(n_mels):
        lo, center, hi = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        filters[i] = np.maximum(0.0, np.minimum(up, down))
    return filters


def mel_filter_centers(n_mels: int) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    m = 2595.0 * np.log10(1.0 + (SAMPLE_RATE / 2.0) / 700.0)
    mel_points = np.linspace(0.0, m, n_mels + 2)
    return 700.0 * (10.0 ** (mel_points[1:-1] / 2595.0) - 1.0)


def _mel_from_power(power: np.ndarray, n_mels: int, nfft: int) -> np.ndarray:
    energies = power @ _mel_filterbank(n_mels, nfft).T
    return np.log(np.maximum(energies, MAG_FLOOR))


def mel_features(frames: np.ndarray, n_mels: int) -> np.ndarray:
    """Log mel-filterbank energies of windowed frames (floored at 1e-10)."""
    frames = np.asarray(frames)
    nfft = max(FFT_BINS, _next_pow2(frames.shape[1]))
    spectrum = np.fft.rfft(frames, n=nfft, axis=1)
    return _mel_from_power(spectrum.real**2 + spectrum.imag**2, n_mels, nfft)


def cepstral_features(log_mel: np.ndarray, n_ceps: int | None = None) -> np.ndarray:
    """Orthonormal type-II DCT of each log-mel row, first ``n_ceps`` kept."""
    log_mel = np.asarray(log_mel)
    if n_ceps is None:
        n_ceps = log_mel.shape[1]
    if n_ceps > log_mel.shape[1]:
        raise ValueError(f"cannot keep {n_ceps} cepstra from {log_mel.shape[1]} bands")
    return scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_ceps]


def assemble_features(
    w: Waveform, normalize: bool = True, subtract_mean: bool = False
) -> tuple[FeatureSequence, PhaseSpectrogram]:
    """Build the 876-dim input features and the 25 ms analysis phase.

    Per frame the layout is: 512 log-FFT bins (25 ms) | 32 mel + 32 cepstra
    (25 ms) | 50 + 50 (50 ms) | 100 + 100 (75 ms). All streams share the
    10 ms hop and are truncated to the shortest stream's frame count. Each
    dimension is then divided by its per-utterance standard deviation
    (scale only by default; ``subtract_mean`` additionally centers the
    features). The applied divisors are recorded in ``norm_scale``.
    """
    if w.samples.size < _window_samples(75.0):
        raise ValueError("signal shorter than the 75 ms analysis window")

    streams: list[np.ndarray] = []
    frames25 = frame_signal(w, 25.0)
    spectrum25 = np.fft.fft(frames25, n=FFT_BINS, axis=1)
    magnitude25 = np.abs(spectrum25)
    streams.append(np.log(np.maximum(magnitude25, MAG_FLOOR)))
    half = FFT_BINS // 2 + 1
    for n_mels, win_ms in MEL_STREAMS:
        if win_ms == 25.0:
            # the 25 ms power spectrum is already on hand from the log path
            fbank = _mel_from_power(magnitude25[:, :half] ** 2, n_mels, FFT_BINS)
        else:
            fbank = mel_features(frame_signal(w, win_ms), n_mels)
        streams.append(fbank)
        streams.append(cepstral_features(fbank))

    n_frames = min(s.shape[0] for s in streams)
    feats = np.concatenate([s[:n_frames] for s in streams], axis=1)
    assert feats.shape[1] == FEATURE_DIM, f"feature assembly produced width {feats.shape[1]}"

    if subtract_mean:
        feats = feats - feats.mean(axis=0)
    if normalize:
        std = feats.std(axis=0)
        scale = np.where(std > 0.0, std, 1.0)
        feats = feats / scale
    else:
        scale = np.ones(FEATURE_DIM)

    phase = np.angle(spectrum25[:n_frames, : FFT_BINS // 2 + 1])
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return FeatureSequence(feats, scale), PhaseSpectrogram(phase)


def target_spectrum(w: Waveform) -> LogSpectrogram:
    """Raw (un-normalized) 512-dim log spectrum, the regression target."""
    return log_spectrum(frame_signal(w, 25.0))


def fold_spectrum(frames: np.ndarray, n_bands: int) -> np.ndarray:
    """Reduce T x 512 log spectra to T x n_bands by averaging bin groups.

    Used by reduced-width model configurations, whose target domain has as
    many bands as the network has residual channels. Averaging in the log
    domain is a per-group geometric mean of magnitudes.
    """
    frames = np.asarray(frames)
    if frames.shape[1] % n_bands:
        raise ValueError(f"cannot fold {frames.shape[1]} bins into {n_bands} bands")
    group = frames.shape[1] // n_bands
    return frames.reshape(frames.shape[0], n_bands, group).mean(axis=2)


def unfold_spectrum(frames: np.ndarray, n_bins: int = FFT_BINS) -> np.ndarray:
    """Expand T x n_bands folded spectra back to T x n_bins by repetition."""
    frames = np.asarray(frames)
    if n_bins % frames.shape[1]:
        raise ValueError(f"cannot unfold {frames.shape[1]} bands into {n_bins} bins")
    return np.repeat(frames, n_bins // frames.shape[1], axis=1)


def reconstruct(enh: LogSpectrogram, phase: PhaseSpectrogram, length: int) -> Waveform:
    """Waveform from an enhanced log spectrum and a phase spectrogram.

    The two mirror halves of each 512-bin row are averaged into 257
    magnitudes, recombined with the phase, inverted per frame, and summed
    by weighted overlap-add with window-sum normalization. The result is
    trimmed or zero-padded to ``length`` samples.
    """
    if enh.frames.shape[0] != phase.frames.shape[0]:
        raise ValueError(
            f"spectrum has {enh.frames.shape[0]} frames but phase has {phase.frames.shape[0]}"
        )
    half = FFT_BINS // 2 + 1
    mags = np.exp(enh.frames)
    mirror = (FFT_BINS - np.arange(half)) % FFT_BINS
    folded = 0.5 * (mags[:, :half] + mags[:, mirror])

    spectrum = folded * np.exp(1j * phase.frames)
    full = np.empty((enh.frames.shape[0], FFT_BINS), dtype=complex)
    full[:, :half] = spectrum
    full[:, half:] = np.conj(spectrum[:, -2:0:-1])

    win = _window_samples(25.0)
    hop = _window_samples(HOP_MS)
    frames_t = np.fft.ifft(full, axis=1).real[:, :win]

    window = _hamming_periodic(win)
    n_frames = frames_t.shape[0]
    total = (n_frames - 1) * hop + win
    out = np.zeros(total)
    wsum = np.zeros(total)
    weighted = frames_t * window[None, :]
    for f in range(n_frames):
        start = f * hop
        out[start:start + win] += weighted[f]
        wsum[start:start + win] += window * window
    out = np.where(wsum > 1e-8, out / np.maximum(wsum, 1e-8), 0.0)

    if length <= total:
        out = out[:length]
    else:
        out = np.concatenate([out, np.zeros(length - total)])
    return Waveform(out)
