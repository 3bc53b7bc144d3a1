"""16-bit PCM mono WAV reading and writing."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np


class WavError(ValueError):
    pass


def read_wav(path: str | Path, sample_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Samples as float64 in [-1, 1) and the file's sample rate."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, sr, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as e:
        raise WavError(f"{path}: unreadable WAV ({e})") from None
    if channels != 1:
        raise WavError(f"{path}: {channels} channels, only mono is supported")
    if width != 2:
        raise WavError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    if len(raw) != 2 * n:
        raise WavError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    if sample_rate is not None and sr != sample_rate:
        raise WavError(f"{path}: sample rate {sr} Hz, expected {sample_rate} Hz")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, x: np.ndarray, sample_rate: int) -> None:
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(to_pcm16(x).tobytes())
