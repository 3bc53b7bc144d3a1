"""mu-law companding, 8-bit classes and the bit-plane view used by BAR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MU = 255.0
N_CLASSES = 256


class QuantizeError(ValueError):
    pass


def compand(x: np.ndarray, mu: float = MU) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def expand(y: np.ndarray, mu: float = MU) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu


def mulaw_encode(x: np.ndarray, mu: float = MU) -> np.ndarray:
    """Map samples in [-1, 1] to classes 0..255 (inputs are clamped).

    ``c = floor((compand(x) + 1) / 2 * 256)``, clamped to 255 at x = 1.
    """
    c = np.floor((compand(x, mu) + 1.0) * 0.5 * N_CLASSES)
    return np.clip(c, 0, N_CLASSES - 1).astype(np.int64)


def mulaw_decode(c: np.ndarray, mu: float = MU) -> np.ndarray:
    """Inverse companding of the midpoint of each class cell."""
    c = np.asarray(c)
    if c.size and (c.min() < 0 or c.max() > N_CLASSES - 1):
        raise QuantizeError(f"classes must lie in [0, {N_CLASSES - 1}], got range [{c.min()}, {c.max()}]")
    y = (c.astype(np.float64) + 0.5) / N_CLASSES * 2.0 - 1.0
    return expand(y, mu)


@dataclass(frozen=True)
class BitPlanes:
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    full: np.ndarray

    def planes(self, depth: int = 3) -> list[np.ndarray]:
        return [self.b1, self.b2, self.b3][:depth]


def bit_planes(c: np.ndarray) -> BitPlanes:
    """The three most significant bits of each class, MSB first."""
    c = np.asarray(c, dtype=np.int64)
    return BitPlanes((c >> 7) & 1, (c >> 6) & 1, (c >> 5) & 1, c)


def reassemble(planes: BitPlanes) -> np.ndarray:
    """Rebuild the full class from the top three bits plus the low five of ``full``."""
    return (planes.b1 << 7) | (planes.b2 << 6) | (planes.b3 << 5) | (planes.full & 0x1F)
