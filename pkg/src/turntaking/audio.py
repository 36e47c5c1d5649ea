"""Mono PCM buffers and 16-bit WAV reading/writing."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPPORTED_RATES = (8000, 16000)


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("audio must be a non-empty 1-D array")
        if self.sample_rate_hz not in SUPPORTED_RATES:
            raise ValueError(f"unsupported sample rate {self.sample_rate_hz}; expected one of {SUPPORTED_RATES}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def crop(self, start_s: float, end_s: float) -> AudioBuffer:
        a = int(round(start_s * self.sample_rate_hz))
        b = int(round(end_s * self.sample_rate_hz))
        return AudioBuffer(self.samples[a:b], self.sample_rate_hz)


def read_wav(path: str | Path, channel: int | None = None) -> AudioBuffer:
    """Read a 16-bit PCM WAV. Multi-channel files need an explicit channel index."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        n_ch = w.getnchannels()
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, n_ch)
    if n_ch > 1:
        if channel is None:
            raise ValueError(f"{path}: {n_ch}-channel file needs a channel selector")
        data = data[:, channel]
    else:
        data = data[:, 0]
    return AudioBuffer(data.astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate_hz)
        w.writeframes(pcm.tobytes())
