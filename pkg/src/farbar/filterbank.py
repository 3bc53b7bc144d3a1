"""Cosine-modulated pseudo-QMF analysis/synthesis filter banks.

Filtering is circular over the (zero-padded to a multiple of ``N``) signal, so
an ``L``-sample waveform maps to exactly ``N`` bands of ``L/N`` samples and the
round trip has no edge loss.  Both banks are applied with their linear-phase
centre as the time origin, which makes the overall delay zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, signal


class FilterbankError(ValueError):
    pass


@dataclass(frozen=True)
class PqmfBank:
    n_bands: int
    prototype: np.ndarray
    analysis_filters: np.ndarray
    synthesis_filters: np.ndarray
    cutoff: float
    beta: float

    @property
    def taps(self) -> int:
        return len(self.prototype)

    @property
    def delay(self) -> int:
        """Group delay of the analysis+synthesis cascade before compensation."""
        return self.taps - 1

    def dump_taps(self) -> str:
        """Analysis then synthesis filters, one row each, space separated."""
        rows = np.vstack([self.analysis_filters, self.synthesis_filters])
        return "\n".join(" ".join(repr(float(v)) for v in row) for row in rows) + "\n"


@dataclass(frozen=True)
class SubbandStack:
    bands: np.ndarray  # (N, L/N); band 0 is the lowest frequency
    source_len: int

    def __post_init__(self):
        if self.bands.ndim != 2:
            raise FilterbankError(f"bands must be (N, T), got shape {self.bands.shape}")

    @property
    def n_bands(self) -> int:
        return self.bands.shape[0]


def _prototype(taps: int, cutoff: float, beta: float) -> np.ndarray:
    # firwin's cutoff is relative to Nyquist; ours is in cycles/sample
    return signal.firwin(taps, 2.0 * cutoff, window=("kaiser", beta))


def _nyquist_error(p: np.ndarray, n_bands: int) -> float:
    """Deviation of ``p * p[::-1]`` from a 2N-th band filter."""
    r = np.convolve(p, p[::-1])
    mid = len(p) - 1
    m = np.arange(1, mid // (2 * n_bands) + 1) * 2 * n_bands
    if len(m) == 0:
        return 0.0
    return float(np.max(np.abs(r[mid + m])))


def search_cutoff(n_bands: int, taps: int, beta: float) -> float:
    lo, hi = 0.05 / n_bands, 0.5 / n_bands
    res = optimize.minimize_scalar(
        lambda c: _nyquist_error(_prototype(taps, c, beta), n_bands),
        bounds=(lo, hi * 0.999), method="bounded", options={"xatol": 1e-7},
    )
    return float(res.x)


def design_bank(n_bands: int = 8, taps: int = 127, beta: float = 9.0, cutoff: float | None = None) -> PqmfBank:
    """Design an ``n_bands`` pseudo-QMF bank from a Kaiser-windowed sinc prototype.

    ``cutoff`` is in cycles per sample and must lie in ``(0, 0.5/n_bands)``.
    When omitted it is searched so that the prototype's autocorrelation is as
    close as possible to a 2N-th band filter, which minimizes round-trip error.
    """
    if n_bands < 1:
        raise FilterbankError(f"n_bands must be >= 1, got {n_bands}")
    if taps < 8 * n_bands:
        raise FilterbankError(f"taps={taps} too short for {n_bands} bands (need >= {8 * n_bands})")
    if cutoff is None:
        cutoff = _cached_cutoff(n_bands, taps, float(beta))
    if not 0.0 < cutoff < 0.5 / n_bands:
        raise FilterbankError(f"cutoff {cutoff} outside (0, {0.5 / n_bands})")
    proto = _prototype(taps, cutoff, beta)
    n = np.arange(taps) - (taps - 1) / 2
    k = np.arange(n_bands)[:, None]
    arg = (np.pi / n_bands) * (k + 0.5) * n[None, :]
    phase = ((-1.0) ** k) * np.pi / 4
    h = 2.0 * proto * np.cos(arg + phase)
    g = 2.0 * proto * np.cos(arg - phase)
    return PqmfBank(n_bands, proto, h, g, float(cutoff), float(beta))


@lru_cache(maxsize=16)
def _cached_cutoff(n_bands: int, taps: int, beta: float) -> float:
    return search_cutoff(n_bands, taps, beta)


@lru_cache(maxsize=8)
def default_bank() -> PqmfBank:
    return design_bank()


def _circular_spectra(filters: np.ndarray, length: int, origin: int) -> np.ndarray:
    """rFFT of each filter wrapped onto ``length`` points with tap ``origin`` at 0."""
    n_f, taps = filters.shape
    wrapped = np.zeros((n_f, length))
    idx = (np.arange(taps) - origin) % length
    for j in range(taps):
        wrapped[:, idx[j]] += filters[:, j]
    return np.fft.rfft(wrapped, axis=-1)


def padded_length(length: int, n_bands: int) -> int:
    return -(-length // n_bands) * n_bands


def analyze(bank: PqmfBank, x: np.ndarray) -> SubbandStack:
    """Split a waveform (or a ``(..., L)`` batch) into ``N`` decimated bands.

    Returns a :class:`SubbandStack` for 1-D input; batched input returns the raw
    ``(..., N, L/N)`` array via :func:`analyze_array`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise FilterbankError("analyze expects a 1-D waveform; use analyze_array for batches")
    if x.size == 0:
        raise FilterbankError("cannot analyze an empty signal")
    return SubbandStack(analyze_array(bank, x), x.size)


def analyze_array(bank: PqmfBank, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise FilterbankError("cannot analyze an empty signal")
    n = bank.n_bands
    length = padded_length(x.shape[-1], n)
    if length != x.shape[-1]:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (length - x.shape[-1],))], axis=-1)
    spec_h = _circular_spectra(bank.analysis_filters, length, (bank.taps - 1) // 2)
    xf = np.fft.rfft(x, axis=-1)[..., None, :]
    y = np.fft.irfft(xf * spec_h, n=length, axis=-1)
    return y[..., ::n]


def synthesize(bank: PqmfBank, s: SubbandStack | np.ndarray, source_len: int | None = None) -> np.ndarray:
    """Reassemble a waveform: ``N * sum_k upsample(band_k) (*) g_k``."""
    if isinstance(s, SubbandStack):
        bands, source_len = s.bands, s.source_len if source_len is None else source_len
    else:
        bands = np.asarray(s, dtype=np.float64)
    out = synthesize_array(bank, bands)
    if source_len is not None:
        if source_len > out.shape[-1]:
            raise FilterbankError(f"source_len {source_len} exceeds reconstructable length {out.shape[-1]}")
        out = out[..., :source_len]
    return out


def synthesize_array(bank: PqmfBank, bands: np.ndarray) -> np.ndarray:
    bands = np.asarray(bands, dtype=np.float64)
    n = bank.n_bands
    if bands.ndim < 2 or bands.shape[-2] != n:
        raise FilterbankError(f"expected {n} bands on axis -2, got shape {bands.shape}")
    t = bands.shape[-1]
    length = t * n
    up = np.zeros(bands.shape[:-1] + (length,))
    up[..., ::n] = bands
    origin = bank.taps - 1 - (bank.taps - 1) // 2
    spec_g = _circular_spectra(bank.synthesis_filters, length, origin)
    y = np.fft.irfft(np.fft.rfft(up, axis=-1) * spec_g, n=length, axis=-1)
    return n * y.sum(axis=-2)


def synthesize_adjoint(bank: PqmfBank, y: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`synthesize_array` (used to backpropagate through it)."""
    y = np.asarray(y, dtype=np.float64)
    n = bank.n_bands
    length = y.shape[-1]
    if length % n:
        raise FilterbankError(f"length {length} not a multiple of {n}")
    origin = bank.taps - 1 - (bank.taps - 1) // 2
    spec_g = _circular_spectra(bank.synthesis_filters, length, origin)
    yf = np.fft.rfft(y, axis=-1)[..., None, :]
    corr = np.fft.irfft(yf * np.conj(spec_g), n=length, axis=-1)
    return n * corr[..., ::n]


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    err = np.sum((reference - np.asarray(estimate, dtype=np.float64)) ** 2)
    sig = np.sum(reference ** 2)
    if err == 0.0:
        return float("inf")
    if sig == 0.0:
        return float("-inf")
    return float(10.0 * np.log10(sig / err))


def round_trip_snr(bank: PqmfBank, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return snr_db(x, synthesize(bank, analyze(bank, x)))
