"""Frame-level acoustic features: energy, loudness, MFCC, ZCR, smoothed pitch and their deltas.

Layout of one frame (21 base columns followed by their left differences)::

    intensity, loudness, mfcc1..mfcc16, rms, zcr, pitch

Everything operates on whole utterances at once; frames are rows.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .audio import AudioBuffer

INTENSITY_FLOOR = 1e-10
LOG_FLOOR = 1e-10
NORM_EPS = 1e-6

TTFV_MAGIC = b"TTFV"
TTFV_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    window_s: float = 0.025
    hop_s: float = 0.010
    n_mfcc: int = 16
    n_mel_filters: int = 26
    pitch_min_hz: float = 50.0
    pitch_max_hz: float = 400.0
    pitch_median_frames: int = 5
    voicing_threshold: float = 0.3
    window: str = "hamming"
    pre_emphasis: float = 0.0

    def __post_init__(self):
        if not self.window_s > self.hop_s > 0:
            raise ValueError("need window_s > hop_s > 0")
        if not 0 < self.n_mfcc < self.n_mel_filters:
            raise ValueError("need 0 < n_mfcc < n_mel_filters")
        if not 0 < self.pitch_min_hz < self.pitch_max_hz:
            raise ValueError("need 0 < pitch_min_hz < pitch_max_hz")
        if self.pitch_median_frames < 1 or self.pitch_median_frames % 2 == 0:
            raise ValueError("pitch_median_frames must be a positive odd number")
        if self.window not in ("hamming", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")
        if not 0 <= self.pre_emphasis < 1:
            raise ValueError("pre_emphasis must lie in [0, 1)")

    @property
    def n_base(self) -> int:
        return self.n_mfcc + 5

    @property
    def n_dims(self) -> int:
        return 2 * self.n_base

    def frame_sizes(self, sample_rate: int) -> tuple[int, int]:
        return int(round(self.window_s * sample_rate)), int(round(self.hop_s * sample_rate))


def feature_names(cfg: FeatureConfig = FeatureConfig()) -> list[str]:
    base = ["intensity", "loudness", *(f"mfcc{i}" for i in range(1, cfg.n_mfcc + 1)), "rms", "zcr", "pitch"]
    return base + [f"d_{name}" for name in base]


class UtteranceTooShort(ValueError):
    def __init__(self, n_samples: int, window: int):
        super().__init__(f"utterance too short: {n_samples} samples, window needs {window}")


def n_frames(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        raise UtteranceTooShort(n_samples, window)
    return (n_samples - window) // hop + 1


@functools.lru_cache(maxsize=16)
def hamming(width: int) -> np.ndarray:
    n = np.arange(width)
    return 0.54 - 0.46 * np.cos(2 * np.pi * n / (width - 1))


def raw_frames(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    count = n_frames(samples.size, window, hop)
    return np.lib.stride_tricks.sliding_window_view(samples, window)[::hop][:count]


def frame_signal(audio: AudioBuffer, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Cut the signal into overlapping frames (rows) and apply the analysis window."""
    window, hop = cfg.frame_sizes(audio.sample_rate_hz)
    frames = raw_frames(audio.samples, window, hop)
    if cfg.window == "rectangular":
        return frames.copy()
    return frames * hamming(window)


def rms_energy(frame: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.square(frame), axis=-1))


def intensity(frame: np.ndarray) -> np.ndarray:
    """Frame power in dB, floored so that silence maps to -100 dB."""
    return 10.0 * np.log10(np.mean(np.square(frame), axis=-1) + INTENSITY_FLOOR)


def loudness(frame: np.ndarray) -> np.ndarray:
    # power-law compression of the rms, a cheap stand-in for a perceptual model
    return rms_energy(frame) ** 0.3


def zero_crossing_rate(frame: np.ndarray) -> np.ndarray:
    """Fraction of adjacent sample pairs whose sign differs.

    An exact zero inherits the sign of the last nonzero sample before it, so a
    signal touching zero without crossing is not counted.
    """
    frames = np.atleast_2d(frame)
    signs = np.sign(frames)
    idx = np.where(signs != 0, np.arange(frames.shape[-1]), 0)
    idx = np.maximum.accumulate(idx, axis=-1)
    filled = np.take_along_axis(signs, idx, axis=-1)
    crossings = (filled[:, 1:] * filled[:, :-1] < 0).sum(axis=-1)
    out = crossings / (frames.shape[-1] - 1)
    return out if np.ndim(frame) > 1 else float(out[0])


@functools.lru_cache(maxsize=16)
def _dft_basis(width: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(width)[:, None]
    k = np.arange(width // 2 + 1)[None, :]
    arg = 2 * np.pi * n * k / width
    return np.cos(arg), -np.sin(arg)


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    """|DFT|^2 of each row for bins 0..W/2, by direct O(W^2) summation."""
    cos, sin = _dft_basis(frames.shape[-1])
    return np.square(frames @ cos) + np.square(frames @ sin)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(n_filters: int, width: int, sample_rate: int) -> np.ndarray:
    """Triangular filters equally spaced in mel from 0 Hz to Nyquist, shape (n_filters, W/2+1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))
    freqs = np.arange(width // 2 + 1) * sample_rate / width
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


@functools.lru_cache(maxsize=16)
def dct_matrix(n_in: int) -> np.ndarray:
    """Orthonormal DCT-II, rows are output coefficients."""
    k = np.arange(n_in)[:, None]
    n = np.arange(n_in)[None, :]
    mat = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    mat[0] /= np.sqrt(2.0)
    return mat


def log_mel_energies(frame: np.ndarray, cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    fb = mel_filterbank(cfg.n_mel_filters, frame.shape[-1], sample_rate)
    return np.log(np.maximum(power_spectrum(frame) @ fb.T, LOG_FLOOR))


def mfcc(frame: np.ndarray, cfg: FeatureConfig = FeatureConfig(), sample_rate: int = 16000) -> np.ndarray:
    """Cepstral coefficients 1..n_mfcc (c0 dropped) of windowed frame(s)."""
    logmel = log_mel_energies(frame, cfg, sample_rate)
    return logmel @ dct_matrix(cfg.n_mel_filters)[1:cfg.n_mfcc + 1].T


def _lag_range(sample_rate: int, cfg: FeatureConfig, width: int) -> tuple[int, int]:
    lo = max(2, int(np.floor(sample_rate / cfg.pitch_max_hz)))
    hi = min(width - 2, int(np.ceil(sample_rate / cfg.pitch_min_hz)))
    return lo, hi


def pitch_acf(frame: np.ndarray, sample_rate: int, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Per-frame f0 in Hz from the autocorrelation peak; 0 for unvoiced frames.

    Autocorrelation is normalized by the lag-0 energy (biased estimate), which
    keeps noise peaks at long lags small and favours the true period over its
    multiples. Frames whose best in-range local maximum falls below
    ``cfg.voicing_threshold`` are unvoiced. Expects un-windowed samples.
    """
    frames = np.atleast_2d(np.asarray(frame, dtype=np.float64))
    width = frames.shape[-1]
    x = frames - frames.mean(axis=-1, keepdims=True)
    spec = np.fft.rfft(x, 2 * width, axis=-1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=-1)[:, :width]
    energy = acf[:, :1]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(energy > 0, acf / np.where(energy > 0, energy, 1.0), 0.0)

    lo, hi = _lag_range(sample_rate, cfg, width)
    seg = r[:, lo - 1:hi + 2]
    mid = seg[:, 1:-1]
    is_peak = (mid > seg[:, :-2]) & (mid >= seg[:, 2:])
    scored = np.where(is_peak, mid, -np.inf)
    best = np.argmax(scored, axis=-1)
    rows = np.arange(frames.shape[0])
    peak = scored[rows, best]
    voiced = peak >= cfg.voicing_threshold

    left, centre, right = seg[rows, best], seg[rows, best + 1], seg[rows, best + 2]
    denom = left - 2 * centre + right
    with np.errstate(invalid="ignore", divide="ignore"):
        shift = np.where(denom < 0, 0.5 * (left - right) / denom, 0.0)
    lag = lo + best + np.clip(shift, -0.5, 0.5)
    f0 = np.where(voiced, sample_rate / lag, 0.0)
    return f0 if np.ndim(frame) > 1 else f0[0]


def median_smooth(track: np.ndarray, width: int) -> np.ndarray:
    if width == 1 or track.size == 0:
        return track.copy()
    half = width // 2
    padded = np.pad(track, half, mode="edge")
    return np.median(np.lib.stride_tricks.sliding_window_view(padded, width), axis=-1)


def smoothed_pitch(raw: np.ndarray, sample_rate: int, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return median_smooth(pitch_acf(raw, sample_rate, cfg), cfg.pitch_median_frames)


def delta(seq: np.ndarray) -> np.ndarray:
    """Left difference along time; the first row is zero."""
    seq = np.asarray(seq, dtype=np.float64)
    out = np.zeros_like(seq)
    out[1:] = seq[1:] - seq[:-1]
    return out


def extract(audio: AudioBuffer, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Feature matrix of shape (n_frames, cfg.n_dims) for one utterance."""
    sr = audio.sample_rate_hz
    window, hop = cfg.frame_sizes(sr)
    raw = raw_frames(audio.samples, window, hop)
    win = raw if cfg.window == "rectangular" else raw * hamming(window)
    if cfg.pre_emphasis > 0:
        emph = np.append(audio.samples[0], audio.samples[1:] - cfg.pre_emphasis * audio.samples[:-1])
        spec_frames = raw_frames(emph, window, hop)
        if cfg.window == "hamming":
            spec_frames = spec_frames * hamming(window)
    else:
        spec_frames = win
    base = np.column_stack([
        intensity(win),
        loudness(win),
        mfcc(spec_frames, cfg, sr),
        rms_energy(win),
        zero_crossing_rate(raw),
        smoothed_pitch(raw, sr, cfg),
    ])
    feats = np.hstack([base, delta(base)])
    if not np.isfinite(feats).all():
        raise FloatingPointError("non-finite feature values")
    return feats


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def speaker_z_norm(sequences: Sequence[np.ndarray]) -> tuple[list[np.ndarray], NormStats]:
    """Z-normalize every sequence of one speaker with statistics pooled over all their frames."""
    stacked = np.vstack(sequences)
    if stacked.shape[0] == 0:
        raise ValueError("need at least one frame")
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), NORM_EPS)
    return [(s - mean) / std for s in sequences], NormStats(mean, std)


def normalize_by_speaker(convs: Iterable, features: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Apply speaker_z_norm per (conversation, speaker) over the utterances that have features."""
    out: dict[str, np.ndarray] = {}
    for conv in convs:
        for spk in ("A", "B"):
            ids = [u.id for u in conv.utterances if u.speaker == spk and u.id in features]
            if not ids:
                continue
            normed, _ = speaker_z_norm([features[i] for i in ids])
            out.update(zip(ids, normed))
    return out


def write_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    header = TTFV_MAGIC + struct.pack("<III", TTFV_VERSION, frames.shape[0], frames.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(frames).tobytes())


def read_features(path: str | Path, n_dims: int = 42) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != TTFV_MAGIC:
        raise ValueError(f"{path}: not a TTFV feature file")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != TTFV_VERSION:
        raise ValueError(f"{path}: unsupported TTFV version {version}")
    if cols != n_dims:
        raise ValueError(f"{path}: expected {n_dims} feature dims, found {cols}")
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated feature payload")
    return data.reshape(rows, cols).astype(np.float64)
