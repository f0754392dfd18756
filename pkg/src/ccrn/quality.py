"""Objective speech quality: LLR on active frames, SRMR, and the energy VAD.

LLR compares all-pole spectral envelopes (order-16 LPC via Levinson-Durbin
on the biased autocorrelation) of reference and test frames, capped at 2
and averaged over the reference's active frames. SRMR passes the signal
through a 23-channel gammatone filterbank (125 Hz - 8 kHz, ERB-spaced),
takes analytic-signal envelopes, splits them with an 8-band modulation
filterbank (4-128 Hz, log-spaced), and reports the energy ratio of the
four low bands to the four high bands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.signal

from .frontend import SAMPLE_RATE, Waveform, frame_signal

LPC_ORDER = 16
LLR_CAP = 2.0


@dataclass
class LpcFrame:
    """All-pole model of one frame: coefficients (a[0]=1) and autocorrelation."""

    coeffs: np.ndarray
    autocorr: np.ndarray


@dataclass
class QualityReport:
    llr: float
    srmr: float
    n_active_frames: int


class LpcError(ValueError):
    pass


def _raw_frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if x.size < frame_len:
        raise ValueError(f"signal of {x.size} samples is shorter than one frame")
    n = (x.size - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def vad_mask(w: Waveform, frame_ms: float = 25.0, hop_ms: float = 10.0, threshold_db: float = 35.0) -> np.ndarray:
    """Boolean per-frame activity: energy within ``threshold_db`` of the peak frame."""
    frame_len = int(round(frame_ms * SAMPLE_RATE / 1000.0))
    hop = int(round(hop_ms * SAMPLE_RATE / 1000.0))
    frames = _raw_frames(w.samples, frame_len, hop)
    energy = np.sum(frames * frames, axis=1)
    peak = float(energy.max())
    if peak <= 0.0:
        return np.zeros(len(energy), dtype=bool)
    return energy >= peak * 10.0 ** (-threshold_db / 10.0)


def lpc(frame: np.ndarray, order: int = LPC_ORDER) -> LpcFrame:
    """Levinson-Durbin on the biased autocorrelation of a windowed frame."""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.size
    autocorr = np.array([np.dot(frame[: n - k], frame[k:]) for k in range(order + 1)]) / n
    if autocorr[0] <= 0.0:
        raise LpcError("silent frame: zero-lag autocorrelation is not positive")

    a = np.zeros(order + 1)
    a[0] = 1.0
    error = autocorr[0]
    for i in range(1, order + 1):
        acc = autocorr[i] + np.dot(a[1:i], autocorr[i - 1:0:-1])
        if error <= 0.0:
            raise LpcError(f"singular recursion at order {i}")
        k = -acc / error
        a[1:i + 1] += k * a[i - 1::-1][:i]
        error *= 1.0 - k * k
    return LpcFrame(a, autocorr)


def llr(reference: Waveform, test: Waveform) -> float:
    """Mean LPC log-likelihood ratio over the reference's active frames.

    Per frame: log of the test-coefficient to reference-coefficient
    quadratic forms under the reference autocorrelation matrix, floored at
    0 and capped at 2. The test signal is trimmed or zero-padded to the
    reference length. Lower is better.
    """
    ref = reference.samples
    tst = test.samples
    if tst.size < ref.size:
        tst = np.concatenate([tst, np.zeros(ref.size - tst.size)])
    elif tst.size > ref.size:
        tst = tst[: ref.size]

    active = vad_mask(reference)
    if not active.any():
        raise ValueError("reference has no active frames")

    ref_frames = frame_signal(reference, 25.0)
    tst_frames = frame_signal(Waveform(tst), 25.0)
    n = min(len(active), ref_frames.shape[0], tst_frames.shape[0])

    values = []
    for idx in range(n):
        if not active[idx]:
            continue
        try:
            ref_lpc = lpc(ref_frames[idx])
            tst_lpc = lpc(tst_frames[idx])
        except LpcError:
            continue
        r_matrix = scipy.linalg.toeplitz(ref_lpc.autocorr)
        denominator = float(ref_lpc.coeffs @ r_matrix @ ref_lpc.coeffs)
        numerator = float(tst_lpc.coeffs @ r_matrix @ tst_lpc.coeffs)
        if denominator <= 0.0 or numerator <= 0.0:
            continue
        values.append(min(max(math.log(numerator / denominator), 0.0), LLR_CAP))
    if not values:
        raise ValueError("no scorable active frames")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# SRMR

N_ACOUSTIC_BANDS = 23
N_MOD_BANDS = 8


def _erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f))


def _erb_rate_inv(e):
    return (10.0 ** (np.asarray(e) / 21.4) - 1.0) / 0.00437


def _erb_bandwidth(f: float) -> float:
    return 24.7 * (4.37 * f / 1000.0 + 1.0)


@lru_cache(maxsize=None)
def _gammatone_bank() -> np.ndarray:
    """FIR gammatone filters (4th order, 40 ms) at 23 ERB-spaced centers."""
    centers = _erb_rate_inv(np.linspace(_erb_rate(125.0), _erb_rate(8000.0), N_ACOUSTIC_BANDS))
    t = np.arange(int(0.04 * SAMPLE_RATE)) / SAMPLE_RATE
    bank = np.zeros((N_ACOUSTIC_BANDS, t.size))
    for i, fc in enumerate(centers):
        g = t**3 * np.exp(-2.0 * np.pi * 1.019 * _erb_bandwidth(fc) * t) * np.cos(2.0 * np.pi * fc * t)
        response = np.abs(np.fft.rfft(g, 8192))
        bank[i] = g / response.max()
    return bank


@lru_cache(maxsize=None)
def _modulation_bank() -> list[np.ndarray]:
    """Fourth-order Butterworth bandpasses at 8 log-spaced centers, Q = 2."""
    centers = np.logspace(math.log10(4.0), math.log10(128.0), N_MOD_BANDS)
    sections = []
    for fc in centers:
        half = fc / 4.0  # Q = 2 -> bandwidth fc/2
        lo = fc * math.sqrt(1.0 + 1.0 / 16.0) - half
        hi = lo + fc / 2.0
        sections.append(scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos"))
    return sections


def srmr(w: Waveform) -> float:
    """Speech-to-reverberation modulation energy ratio; higher is better."""
    x = w.samples
    if x.size < SAMPLE_RATE // 2:
        raise ValueError("srmr needs at least 0.5 s of signal")
    if float(np.mean(x * x)) == 0.0:
        raise ValueError("srmr is undefined for a zero-energy signal")

    band_energy = np.zeros(N_MOD_BANDS)
    mod_bank = _modulation_bank()
    for g in _gammatone_bank():
        band = scipy.signal.fftconvolve(x, g)[: x.size]
        envelope = np.abs(scipy.signal.hilbert(band))
        for j, sos in enumerate(mod_bank):
            filtered = scipy.signal.sosfilt(sos, envelope)
            band_energy[j] += float(np.sum(filtered * filtered))
    low = float(np.sum(band_energy[: N_MOD_BANDS // 2]))
    high = float(np.sum(band_energy[N_MOD_BANDS // 2:]))
    if high <= 0.0:
        raise ValueError("degenerate signal: no high-rate modulation energy")
    return low / high


def quality_report(reference: Waveform, test: Waveform) -> QualityReport:
    """LLR against the reference, SRMR of the test, active-frame count."""
    return QualityReport(
        llr=llr(reference, test),
        srmr=srmr(test),
        n_active_frames=int(vad_mask(reference).sum()),
    )
