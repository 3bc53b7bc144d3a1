"""Objective evaluation: mel-cepstral distortion, F0 RMSE and V/UV error.

All three share one frame grid (hop 200, frames centred on ``t * hop``), so
the DTW path found on cepstra also pairs the pitch frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .features import FEATURE_STFT, SAMPLE_RATE, mel_spectrogram

MCD_ORDER = 24
MCD_SCALE = 10.0 * np.sqrt(2.0) / np.log(10.0)
F0_MIN, F0_MAX = 60.0, 400.0
F0_WINDOW = 512
VOICING_THRESHOLD = 0.3
RMS_THRESHOLD = 1e-3


class MetricError(ValueError):
    pass


def mel_cepstra(x: np.ndarray, sample_rate: int = SAMPLE_RATE, order: int = MCD_ORDER) -> np.ndarray:
    """``(frames, order)`` cepstra: DCT-II of the log-mel frame, c0 dropped."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < FEATURE_STFT.win:
        raise MetricError(f"signal of {x.shape[-1]} samples is shorter than one frame ({FEATURE_STFT.win})")
    logmel = mel_spectrogram(x, sample_rate).values.astype(np.float64)
    return dct(logmel, type=2, norm="ortho", axis=-1)[:, 1:order + 1]


def dtw(cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Minimal-cost monotone alignment with steps (1,0), (0,1), (1,1).

    Returns the accumulated cost and the path as an ``(L, 2)`` index array.
    Rows of the accumulation are filled one anti-diagonal at a time.
    """
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        prev = np.minimum(np.minimum(acc[i - 1, j], acc[i, j - 1]), acc[i - 1, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + prev
    i, j = n, m
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        steps = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
        i, j = min(steps, key=lambda s: (acc[s], s != (i - 1, j - 1)))
        path.append((i - 1, j - 1))
    return float(acc[n, m]), np.array(path[::-1])


def _distances(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    diff = ca[:, None, :] - cb[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def mcd_with_path(ref: np.ndarray, gen: np.ndarray, sample_rate: int = SAMPLE_RATE) -> tuple[float, np.ndarray]:
    ca, cb = mel_cepstra(ref, sample_rate), mel_cepstra(gen, sample_rate)
    cost = _distances(ca, cb)
    _, path = dtw(cost)
    return float(MCD_SCALE * cost[path[:, 0], path[:, 1]].mean()), path


def mcd(ref: np.ndarray, gen: np.ndarray, sample_rate: int = SAMPLE_RATE) -> float:
    return mcd_with_path(ref, gen, sample_rate)[0]


def f0_track(x: np.ndarray, sample_rate: int = SAMPLE_RATE, hop: int = FEATURE_STFT.hop,
             fmin: float = F0_MIN, fmax: float = F0_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Normalized cross-correlation pitch tracker.

    For each frame the first local peak reaching 90% of the best peak in the
    lag range is taken (guarding against period doubling) and refined by a
    parabola through its neighbours.  Unvoiced frames report 0 Hz.
    """
    if sample_rate < 16000:
        raise MetricError(f"sample rate {sample_rate} below 16 kHz")
    x = np.asarray(x, dtype=np.float64)
    lag_min = int(np.floor(sample_rate / fmax))
    lag_max = int(np.ceil(sample_rate / fmin))
    w = F0_WINDOW
    n = -(-x.shape[-1] // hop)
    padded = np.concatenate([np.zeros(w // 2), x, np.zeros(w + lag_max)])
    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    for t in range(n):
        seg = padded[t * hop: t * hop + w + lag_max]
        a = seg[:w]
        e0 = float(a @ a)
        if np.sqrt(e0 / w) <= RMS_THRESHOLD:
            continue
        num = np.correlate(seg, a, mode="valid")  # lags 0..lag_max
        sq = np.concatenate([[0.0], np.cumsum(seg * seg)])
        energy = sq[w:w + lag_max + 1] - sq[:lag_max + 1]
        r = num / np.sqrt(np.maximum(e0 * energy, 1e-20))
        inner = np.arange(max(lag_min, 1), lag_max)
        peaks = inner[(r[inner] >= r[inner - 1]) & (r[inner] > r[inner + 1])]
        if peaks.size == 0:
            continue
        best = r[peaks].max()
        if best < VOICING_THRESHOLD:
            continue
        lag = int(peaks[np.argmax(r[peaks] >= 0.9 * best)])
        y0, y1, y2 = r[lag - 1], r[lag], r[lag + 1]
        denom = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        f0[t] = sample_rate / (lag + float(np.clip(shift, -0.5, 0.5)))
        voiced[t] = True
    return f0, voiced


def vuv_error(ref_flags: np.ndarray, gen_flags: np.ndarray) -> float:
    ref_flags, gen_flags = np.asarray(ref_flags, bool), np.asarray(gen_flags, bool)
    if ref_flags.shape != gen_flags.shape:
        raise MetricError(f"flag sequences differ in length: {ref_flags.shape} vs {gen_flags.shape}")
    if ref_flags.size == 0:
        return 0.0
    return 100.0 * float(np.mean(ref_flags != gen_flags))


def f0_rmse(ref_f0, gen_f0, ref_flags, gen_flags) -> float:
    """RMSE in Hz over frames voiced in both sequences (0 when there are none)."""
    both = np.asarray(ref_flags, bool) & np.asarray(gen_flags, bool)
    if not np.any(both):
        return 0.0
    d = np.asarray(ref_f0)[both] - np.asarray(gen_f0)[both]
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------- reports

@dataclass
class UtteranceScores:
    name: str
    mcd: float
    f0_rmse: float
    vuv_error: float


@dataclass
class EvalReport:
    mcd: float
    f0_rmse: float
    vuv_error: float
    utterances: list = field(default_factory=list)

    def __post_init__(self):
        if min(self.mcd, self.f0_rmse, self.vuv_error) < 0 or self.vuv_error > 100:
            raise MetricError("metric out of range")

    def to_text(self) -> str:
        lines = [f"MCD\t{self.mcd:.4f}", f"F0-RMSE\t{self.f0_rmse:.4f}", f"V/UV\t{self.vuv_error:.4f}"]
        for u in self.utterances:
            lines.append(f"{u.name}\t{u.mcd:.4f}\t{u.f0_rmse:.4f}\t{u.vuv_error:.4f}")
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        """One ``key=value`` per line; values are JSON so floats round-trip exactly."""
        lines = [f"mcd={json.dumps(self.mcd)}", f"f0_rmse={json.dumps(self.f0_rmse)}",
                 f"vuv_error={json.dumps(self.vuv_error)}"]
        for u in self.utterances:
            lines.append(f"utt.{u.name}={json.dumps([u.mcd, u.f0_rmse, u.vuv_error])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_keyvalue(cls, text: str) -> "EvalReport":
        values, utts = {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise MetricError(f"malformed report line {line!r}")
            if key.startswith("utt."):
                utts.append(UtteranceScores(key[4:], *json.loads(raw)))
            else:
                values[key] = json.loads(raw)
        try:
            return cls(values["mcd"], values["f0_rmse"], values["vuv_error"], utts)
        except KeyError as e:
            raise MetricError(f"report is missing {e.args[0]}") from None

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_keyvalue())

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls.from_keyvalue(Path(path).read_text())


def score_pair(name: str, ref: np.ndarray, gen: np.ndarray, sample_rate: int = SAMPLE_RATE) -> UtteranceScores:
    m, path = mcd_with_path(ref, gen, sample_rate)
    rf, rv = f0_track(ref, sample_rate)
    gf, gv = f0_track(gen, sample_rate)
    i = np.minimum(path[:, 0], rf.size - 1)
    j = np.minimum(path[:, 1], gf.size - 1)
    return UtteranceScores(name, m, f0_rmse(rf[i], gf[j], rv[i], gv[j]), vuv_error(rv[i], gv[j]))


def evaluate(pairs, sample_rate: int = SAMPLE_RATE) -> EvalReport:
    """``pairs`` yields ``(name, ref, gen)``; the summary is the mean over utterances."""
    utts = [score_pair(name, ref, gen, sample_rate) for name, ref, gen in pairs]
    if not utts:
        raise MetricError("no utterances to evaluate")
    return EvalReport(float(np.mean([u.mcd for u in utts])), float(np.mean([u.f0_rmse for u in utts])),
                      float(np.mean([u.vuv_error for u in utts])), utts)
