"""STFT analysis/synthesis, log-magnitude features, masking, MFCCs and VAD."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 8000
LOG_FLOOR = -300.0
NORM_EPS = 1e-8


class SignalError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise SignalError(f"invalid sample rate {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class Spectrogram:
    bins: np.ndarray  # complex [T, F]
    frame_len: int
    hop: int
    sample_rate: int = SAMPLE_RATE
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.bins.ndim != 2 or self.bins.shape[0] < 1:
            raise SignalError("spectrogram must be a non-empty [T, F] matrix")
        if self.bins.shape[1] != self.frame_len // 2 + 1:
            raise SignalError(
                f"F={self.bins.shape[1]} inconsistent with frame_len={self.frame_len}"
            )

    @property
    def shape(self):
        return self.bins.shape

    def __add__(self, other: "Spectrogram") -> "Spectrogram":
        return Spectrogram(self.bins + other.bins, self.frame_len, self.hop,
                           self.sample_rate, self.window)


@dataclass
class FeatureSequence:
    values: np.ndarray  # [T, F]
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise SignalError("features contain non-finite values")

    def __len__(self):
        return self.values.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise SignalError("normalization std must be positive")


@dataclass
class MaskSet:
    masks: np.ndarray  # [S, T, F]

    def __post_init__(self):
        m = self.masks
        if np.any(m < 0) or np.any(m > 1):
            raise SignalError("masks must lie in [0, 1]")
        if np.max(np.abs(m.sum(axis=0) - 1.0)) > 1e-6:
            raise SignalError("masks must sum to one in every bin")


def make_window(kind: str, n: int) -> np.ndarray:
    """Periodic analysis window. ``sqrt_hann`` squared is COLA at hop n/4 and n/2."""
    if kind == "sqrt_hann":
        return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if kind in ("rect", "rectangular", "boxcar"):
        return np.ones(n)
    raise SignalError(f"unknown window kind {kind!r}")


def stft(wave: Waveform, frame_len: int = 256, hop: int = 64,
         window: str = "sqrt_hann") -> Spectrogram:
    if not frame_len >= hop > 0:
        raise SignalError("need frame_len >= hop > 0")
    x = wave.samples
    if len(x) < frame_len:
        raise SignalError(
            f"waveform of {len(x)} samples is shorter than one frame ({frame_len})"
        )
    n_frames = 1 + (len(x) - frame_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    bins = np.fft.rfft(frames * make_window(window, frame_len), axis=1)
    return Spectrogram(bins, frame_len, hop, wave.sample_rate, window)


def istft_overlap_add(spec: Spectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Frames are multiplied by the synthesis window and normalized by the summed
    squared window, so reconstruction is exact wherever that sum is nonzero.
    """
    n, hop = spec.frame_len, spec.hop
    n_frames = spec.bins.shape[0]
    win = make_window(spec.window, n)
    frames = np.fft.irfft(spec.bins, n=n, axis=1) * win
    length = n + (n_frames - 1) * hop
    out = np.zeros(length)
    wsum = np.zeros(length)
    for t in range(n_frames):
        out[t * hop:t * hop + n] += frames[t]
        wsum[t * hop:t * hop + n] += win ** 2
    nz = wsum > 1e-10
    out[nz] /= wsum[nz]
    out[~nz] = 0.0
    return Waveform(out, spec.sample_rate)


def pad_for_analysis(x: np.ndarray, frame_len: int, hop: int) -> tuple[np.ndarray, int]:
    """Zero-pad so every original sample is covered by a full set of frames.

    Returns the padded signal and the front offset to crop with after synthesis.
    """
    front = frame_len - hop
    total = len(x) + 2 * front
    n_frames = max(1, -(-(total - frame_len) // hop) + 1)
    back = frame_len + (n_frames - 1) * hop - len(x) - front
    return np.pad(x, (front, back)), front


def analyze(wave: Waveform, frame_len: int = 256, hop: int = 64,
            window: str = "sqrt_hann") -> Spectrogram:
    """STFT of the padded waveform; the framing used by every pipeline."""
    padded, _ = pad_for_analysis(wave.samples, frame_len, hop)
    return stft(Waveform(padded, wave.sample_rate), frame_len, hop, window)


def synthesize(spec: Spectrogram, length: int) -> Waveform:
    """Inverse of :func:`analyze`, cropped back to ``length`` samples."""
    front = spec.frame_len - spec.hop
    out = istft_overlap_add(spec).samples
    return Waveform(out[front:front + length], spec.sample_rate)


def log_features(spec: Spectrogram, floor: float = LOG_FLOOR,
                 stats: NormStats | None = None) -> FeatureSequence:
    if not np.isfinite(floor):
        raise SignalError("floor must be finite")
    mag = np.abs(spec.bins)
    with np.errstate(divide="ignore"):
        v = np.log10(mag)
    v = np.maximum(v, floor)
    if stats is None:
        return FeatureSequence(v, normalized=False)
    return FeatureSequence((v - stats.mean) / stats.std, normalized=True)


def compute_norm_stats(features: Sequence[FeatureSequence]) -> NormStats:
    if len(features) == 0:
        raise SignalError("need at least one feature sequence")
    n = 0
    total = None
    for fs in features:
        s = fs.values.sum(axis=0)
        total = s if total is None else total + s
        n += fs.values.shape[0]
    mean = total / n
    sq = sum(((fs.values - mean) ** 2).sum(axis=0) for fs in features)
    std = np.sqrt(sq / n)
    flat = std < NORM_EPS
    if np.any(flat):
        log.warning("zero variance in %d feature bins; using epsilon std", int(flat.sum()))
        std = np.where(flat, NORM_EPS, std)
    return NormStats(mean, std)


def apply_masks(masks: MaskSet, mixture: Spectrogram) -> list[Spectrogram]:
    if masks.masks.shape[1:] != mixture.bins.shape:
        raise SignalError(
            f"mask shape {masks.masks.shape[1:]} != spectrogram shape {mixture.bins.shape}"
        )
    return [Spectrogram(m * mixture.bins, mixture.frame_len, mixture.hop,
                        mixture.sample_rate, mixture.window) for m in masks.masks]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((num_filters, len(freqs)))
    for m in range(num_filters):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def mfcc(wave: Waveform, num_coeffs: int = 13, frame_len: int = 200, hop: int = 80,
         num_filters: int = 23, n_fft: int = 256, energy_floor: float = 1e-10) -> np.ndarray:
    """MFCCs: power spectrum -> mel filterbank -> log -> orthonormal DCT-II."""
    if num_coeffs > num_filters:
        raise SignalError("num_coeffs cannot exceed the number of mel filters")
    x = wave.samples
    if len(x) < frame_len:
        raise SignalError("waveform shorter than one MFCC frame")
    n_frames = 1 + (len(x) - frame_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    frames = frames * np.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(num_filters, n_fft, wave.sample_rate).T
    logmel = np.log(np.maximum(energies, energy_floor))
    return dct(logmel, type=2, axis=1, norm="ortho")[:, :num_coeffs]


def energy_vad(features: np.ndarray, threshold_db: float = 40.0) -> np.ndarray:
    """Keep frames within ``threshold_db`` of the loudest frame.

    ``features`` is either a per-frame energy vector in dB or a matrix whose
    first column is c0 of natural-log MFCCs (converted to dB).
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 2:
        # orthonormal DCT: c0 = sum(log E) / sqrt(M); rescale to a dB-like level
        energy_db = f[:, 0] * (10.0 / np.log(10.0))
    else:
        energy_db = f
    if energy_db.size == 0:
        return np.zeros(0, dtype=bool)
    keep = energy_db > energy_db.max() - threshold_db
    if np.isinf(threshold_db) and threshold_db > 0:
        keep[:] = True
    if not keep.any():
        keep[:] = True
    return keep


def frame_energy_db(wave: Waveform, frame_len: int = 200, hop: int = 80) -> np.ndarray:
    x = wave.samples
    n_frames = 1 + (len(x) - frame_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    return 10.0 * np.log10(np.maximum((frames ** 2).mean(axis=1), 1e-20))


def read_wav(path: str | Path, expected_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read a mono WAV: 16-bit PCM, or 32-bit float as written for separated estimates."""
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise SignalError(f"{path}: unreadable WAV ({exc})") from None
    if data.ndim != 1:
        raise SignalError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise SignalError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise SignalError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path: str | Path, wave: Waveform, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.samples.astype(np.float32)
    wavfile.write(str(path), wave.sample_rate, data)
