"""STFT, log-mel conditioning features, the PVFE feature file and the learned upsampler."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from . import tensor as T
from .nn import ConvTranspose1d, Module
from .tensor import Tensor

SAMPLE_RATE = 22050
N_MELS = 80
MEL_FLOOR = 1e-5
FEATURE_MAGIC = b"PVFE"
FEATURE_VERSION = 1


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 200
    win: int = 800
    window: str = "hann"

    def __post_init__(self):
        if self.win > self.fft_size:
            raise FeatureError(f"win {self.win} > fft_size {self.fft_size}")
        if self.hop > self.win:
            raise FeatureError(f"hop {self.hop} > win {self.win}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


FEATURE_STFT = StftConfig()


@lru_cache(maxsize=32)
def padded_window(cfg: StftConfig) -> np.ndarray:
    """Analysis window of length ``win`` centred in ``fft_size`` zeros."""
    if cfg.window == "hann":
        w = get_window("hann", cfg.win, fftbins=True)
    elif cfg.window in ("rect", "boxcar"):
        w = np.ones(cfg.win)
    else:
        raise FeatureError(f"unknown window {cfg.window!r}")
    out = np.zeros(cfg.fft_size)
    left = (cfg.fft_size - cfg.win) // 2
    out[left:left + cfg.win] = w
    return out


def n_frames(length: int, hop: int) -> int:
    return -(-length // hop)


def frame_indices(length: int, cfg: StftConfig) -> np.ndarray:
    """Index matrix ``(frames, fft_size)`` into the original signal.

    Frame ``t`` is centred on sample ``t * hop``; positions outside the signal
    are reflected, so gathering with this matrix is the centre-padded framing.
    """
    if length < cfg.win:
        raise FeatureError(f"signal of {length} samples is shorter than one window ({cfg.win})")
    pad = cfg.fft_size // 2
    reflected = np.pad(np.arange(length), pad, mode="reflect")
    starts = np.arange(n_frames(length, cfg.hop)) * cfg.hop
    return reflected[starts[:, None] + np.arange(cfg.fft_size)[None, :]]


def stft_magnitude(x: np.ndarray, cfg: StftConfig = FEATURE_STFT) -> np.ndarray:
    """Magnitude spectrogram ``(frames, fft_size//2 + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    frames = x[frame_indices(x.shape[-1], cfg)] * padded_window(cfg)
    return np.abs(np.fft.rfft(frames, axis=-1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = 1024, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters ``(n_mels, n_fft//2 + 1)`` with unit peaks."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (frames, n_mels), natural-log magnitude
    sample_rate: int = SAMPLE_RATE
    hop: int = 200

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def samples(self) -> int:
        return self.frames * self.hop


def mel_spectrogram(x: np.ndarray, sample_rate: int = SAMPLE_RATE, cfg: StftConfig = FEATURE_STFT,
                    n_mels: int = N_MELS) -> MelSpectrogram:
    mag = stft_magnitude(x, cfg)
    mel = mag @ mel_filterbank(sample_rate, cfg.fft_size, n_mels).T
    return MelSpectrogram(np.log(np.maximum(mel, MEL_FLOOR)).astype(np.float32), sample_rate, cfg.hop)


def write_features(path: str | Path, mel: MelSpectrogram) -> None:
    values = np.ascontiguousarray(mel.values, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<5i", FEATURE_VERSION, mel.frames, mel.dims, mel.sample_rate, mel.hop)
    Path(path).write_bytes(header + values.tobytes())


def read_features(path: str | Path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: not a PVFE feature file")
    version, frames, dims, sr, hop = struct.unpack("<5i", raw[4:24])
    if version != FEATURE_VERSION:
        raise FeatureError(f"{path}: unsupported feature version {version}")
    body = raw[24:]
    if len(body) != frames * dims * 4:
        raise FeatureError(f"{path}: expected {frames * dims * 4} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(frames, dims).astype(np.float32)
    return MelSpectrogram(values, sr, hop)


class FeatureUpsampler(Module):
    """Transposed-convolution stack lifting frame-rate features to subband rate.

    With hop 200 and 8 bands, the subband rate is 25 steps per frame, reached
    with rates (5, 5).
    """

    def __init__(self, in_dims: int = N_MELS, hidden: int = 32, out_channels: int = N_MELS,
                 rates: tuple[int, ...] = (5, 5), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.rates = tuple(rates)
        widths = [in_dims] + [hidden] * (len(rates) - 1) + [out_channels]
        self.layers = [ConvTranspose1d(widths[i], widths[i + 1], r, rng=rng) for i, r in enumerate(rates)]

    @property
    def factor(self) -> int:
        return int(np.prod(self.rates))

    def __call__(self, mel: Tensor, length: int | None = None) -> Tensor:
        """``mel`` is ``(B, dims, frames)`` or ``(dims, frames)``."""
        frames = mel.shape[-1]
        if length is not None and frames * self.factor < length:
            raise FeatureError(f"{frames} frames x {self.factor} < requested length {length}")
        x = mel
        for layer in self.layers:
            x = layer(x)
        if length is not None and length != x.shape[-1]:
            x = T.getitem(x, (Ellipsis, slice(0, length)))
        return x


def check_frame_rate(hop: int, n_bands: int, rates) -> None:
    """The frame hop must equal n_bands times the upsampling product."""
    prod = int(np.prod(rates))
    if hop != n_bands * prod:
        raise FeatureError(f"hop {hop} != n_bands {n_bands} x upsample {prod}")


def upsample_features(upsampler: FeatureUpsampler, mel: MelSpectrogram, length: int | None = None,
                      n_bands: int = 8) -> Tensor:
    check_frame_rate(mel.hop, n_bands, upsampler.rates)
    x = Tensor(np.ascontiguousarray(mel.values.T))
    return upsampler(x, length)
