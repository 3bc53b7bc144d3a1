"""Learned sampler that turns class posteriors into continuous subband signals.

Two training signals are used.  On the teacher-forced path the post-filter
sees posteriors computed from ground-truth previous subbands and is scored
with an L1 loss on every band plus the reassembled waveform.  On the
free-running path its own outputs feed the next FAR step, and the
reassembled waveform is scored with a band-limited multi-resolution STFT
loss.  The two combine as ``100 * L_D + 0.1 * L_S``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import filterbank as fb
from . import tensor as T
from .features import StftConfig, frame_indices, padded_window
from .model import Batch, Conditioning, FarBarNet, band_order, sample_bit, teacher_forced_posteriors
from .nn import WN, Conv1d, Module
from .optim import Adam
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

WEIGHT_D = 100.0
WEIGHT_S = 0.1
POWER_FLOOR = 1e-14
SILENT_MAG = float(np.sqrt(POWER_FLOOR))


class FrozenNetError(RuntimeError):
    pass


class PostFilter(Module):
    def __init__(self, n_classes: int = 256, cond_channels: int = 80, channels: int = 64, n_layers: int = 5,
                 group: int = 1, kernel_size: int = 3, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.group = group
        self.n_classes = n_classes
        self.input_proj = Conv1d(n_classes * group, channels, 1, rng=rng)
        self.wn = WN(channels, cond_channels * group, n_layers, kernel_size, rng=rng)
        self.output = Conv1d(channels, group, 1, rng=rng)

    @classmethod
    def for_net(cls, net: FarBarNet, rng: np.random.Generator | None = None) -> "PostFilter":
        c = net.cfg
        return cls(c.n_classes, c.cond_channels, c.pf_channels, c.pf_layers, c.group, c.wn_kernel, rng)

    def condition(self, f: Tensor) -> list:
        return self.wn.condition(f)

    def __call__(self, posterior: Tensor, cond: Conditioning | list) -> Tensor:
        """``posterior`` ``(B, n_classes, T)`` with rows summing to one -> ``(B, 1, T)`` in (-1, 1)."""
        if posterior.shape[-2] != self.n_classes:
            raise ShapeError(f"post-filter expects {self.n_classes} posterior channels, got {posterior.shape[-2]}")
        if isinstance(cond, Conditioning):
            cond = cond.pf if cond.pf is not None else self.condition(cond.f)
        z = self.input_proj(T.group(posterior, self.group))
        z = self.wn(z, cond=cond)
        return T.ungroup(T.tanh(self.output(z)), self.group)


# ---------------------------------------------------------------- losses

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def mae(a, b) -> Tensor:
    return T.mean(T.tabs(T.sub(a, b)))


def synthesis(bank: fb.PqmfBank, bands: Tensor) -> Tensor:
    """Differentiable filter-bank synthesis, ``(..., N, T) -> (..., N*T)``."""
    return T.linear_map(bands, lambda b: fb.synthesize_array(bank, b), lambda g: fb.synthesize_adjoint(bank, g))


def loss_teacher_forced(x_tf, x_hat, bank: fb.PqmfBank) -> Tensor:
    """``(MAE(psi(x_tf), psi(x_hat)) + sum_i MAE(x_tf^i, x_hat^i)) / (N + 1)`` on ``(B, N, T)`` stacks."""
    x_tf, x_hat = _as_tensor(x_tf), _as_tensor(x_hat)
    n = bank.n_bands
    if x_tf.shape[-2] != n or x_hat.shape[-2] != n:
        raise ShapeError(f"expected {n} bands, got {x_tf.shape[-2]} and {x_hat.shape[-2]}")
    if x_tf.shape != x_hat.shape:
        raise ShapeError(f"band stacks differ: {x_tf.shape} vs {x_hat.shape}")
    total = mae(synthesis(bank, x_tf), synthesis(bank, x_hat))
    for i in range(n):
        total = T.add(total, mae(T.slice_channels(x_tf, i, i + 1), T.slice_channels(x_hat, i, i + 1)))
    return T.mul(total, 1.0 / (n + 1))


@dataclass(frozen=True)
class StftLossConfig:
    resolutions: tuple = ((512, 50, 240), (1024, 120, 600), (2048, 240, 1200))
    band_limit_hz: float = 8000.0
    sample_rate: int = 22050

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise ValueError("need at least one STFT parameter set")


def stft_mag(x: Tensor, cfg: StftConfig) -> Tensor:
    """Differentiable centre-padded STFT magnitude ``(..., frames, bins)``."""
    idx = frame_indices(x.shape[-1], cfg)
    frames = T.mul(T.gather(x, idx), padded_window(cfg).astype(x.dtype))
    return T.rfft_magnitude(frames, cfg.fft_size, POWER_FLOOR)


def band_limited(mag: Tensor, fft_size: int, sample_rate: int, limit_hz: float) -> Tensor:
    """Keep bins up to ``limit_hz``; summarize the rest by average pooling.

    Layout of the result along the frequency axis: the raw low bins, one
    column holding each frame's mean over the high bins, then the high bins'
    per-frequency means over time repeated for every frame.  Every entry
    counts once in the element count used by the log-magnitude loss.
    """
    n_low = min(int(np.floor(limit_hz * fft_size / sample_rate)) + 1, mag.shape[-1])
    if n_low >= mag.shape[-1]:
        return mag
    low = T.getitem(mag, (Ellipsis, slice(0, n_low)))
    high = T.getitem(mag, (Ellipsis, slice(n_low, None)))
    per_frame = T.mean(high, axis=-1, keepdims=True)
    per_freq = T.mean(high, axis=-2, keepdims=True)
    per_freq = T.add(per_freq, np.zeros(high.shape, dtype=high.dtype))
    return T.concat([low, per_frame, per_freq], axis=-1)


def spectral_terms(x, ref, cfg: StftConfig, sample_rate: int, limit_hz: float) -> tuple[Tensor, Tensor]:
    """(spectral convergence, log-magnitude L1) for one STFT parameter set.

    Spectral convergence is normalized by the reference magnitude.
    """
    a = band_limited(stft_mag(_as_tensor(x), cfg), cfg.fft_size, sample_rate, limit_hz)
    b = band_limited(stft_mag(_as_tensor(ref), cfg), cfg.fft_size, sample_rate, limit_hz)
    diff = T.sub(a, b)
    # the magnitude floor keeps the denominator positive; flag references that sit on it
    silent = b.data.reshape(-1, b.shape[-2] * b.shape[-1]).max(axis=-1) <= 1.001 * SILENT_MAG
    if np.any(silent):
        log.warning("spectral convergence: reference has zero energy, denominator held at the magnitude floor")
    if a.ndim == 2:
        num = T.sqrt(T.tsum(T.square(diff)))
        sc = T.div(num, float(np.sqrt(np.sum(np.square(b.data, dtype=np.float64)))))
    else:
        # per-utterance ratio, averaged over the batch
        num = T.sqrt(T.tsum(T.square(diff), axis=(-2, -1)))
        den = np.sqrt(np.sum(np.square(b.data, dtype=np.float64), axis=(-2, -1)))
        sc = T.mean(T.div(num, den.astype(diff.dtype)))
    lm = T.mean(T.tabs(T.sub(T.log(a), T.log(b))))
    return sc, lm


def loss_spectral(x_ntf, x_hat, cfg: StftLossConfig = StftLossConfig()) -> Tensor:
    """``(1/M) sum_m (L_sc^m + L_mag^m)`` over the configured STFT parameter sets."""
    x_ntf, x_hat = _as_tensor(x_ntf), _as_tensor(x_hat)
    if x_ntf.shape != x_hat.shape:
        raise ShapeError(f"signal lengths differ: {x_ntf.shape} vs {x_hat.shape}")
    total = None
    for fft_size, hop, win in cfg.resolutions:
        sc, lm = spectral_terms(x_ntf, x_hat, StftConfig(fft_size, hop, win), cfg.sample_rate, cfg.band_limit_hz)
        term = T.add(sc, lm)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / len(cfg.resolutions))


def combine(l_d, l_s, w_d: float = WEIGHT_D, w_s: float = WEIGHT_S):
    """``L_PF = 100 L_D + 0.1 L_S``; works on floats and tensors."""
    if isinstance(l_d, Tensor) or isinstance(l_s, Tensor):
        return T.add(T.mul(l_d, w_d), T.mul(l_s, w_s))
    return w_d * l_d + w_s * l_s


# ---------------------------------------------------------------- training

@dataclass
class PfTrainConfig:
    steps: int = 500
    lr: float = 1e-4
    schedule: str = "alternate"  # or "joint"
    far_order: str = "high_to_low"
    stft: StftLossConfig = field(default_factory=StftLossConfig)
    sharpen: tuple = (10.0, 10.0, 5.0)
    seed: int = 0


def _require_frozen(net: FarBarNet) -> None:
    if not net.frozen or any(p.requires_grad for p in net.parameters()):
        raise FrozenNetError("the autoregressive network must be frozen before post-filter training")


def teacher_forced_path(pf: PostFilter, net: FarBarNet, batch: Batch, bank: fb.PqmfBank,
                        far_order: str = "high_to_low") -> Tensor:
    dtype = pf.input_proj.weight.dtype
    cond = net.condition(Tensor(batch.mel.astype(dtype)), batch.length)
    cond.pf = pf.condition(cond.f)
    posts = teacher_forced_posteriors(net, batch, cond, far_order)
    x_tf = T.concat([pf(posts[k], cond) for k in range(net.cfg.n_bands)], axis=-2)
    return loss_teacher_forced(x_tf, batch.subbands.astype(dtype), bank)


def free_running_path(pf: PostFilter, net: FarBarNet, batch: Batch, bank: fb.PqmfBank,
                      stft: StftLossConfig, rng: np.random.Generator, far_order: str = "high_to_low",
                      sharpen=(10.0, 10.0, 5.0)) -> Tensor:
    dtype = pf.input_proj.weight.dtype
    cfg = net.cfg
    b, _, length = batch.subbands.shape
    cond = net.condition(Tensor(batch.mel.astype(dtype)), length)
    cond.pf = pf.condition(cond.f)
    x_prev = Tensor(batch.noise.astype(dtype))
    h = Tensor(np.zeros((b, cfg.hidden_channels, length // cfg.group), dtype=dtype))
    outs = {}

    def sampler(k, logit):
        return sample_bit(logit.data, sharpen[k], rng)

    for band in band_order(cfg.n_bands, far_order):
        step = net.far_step(x_prev, h, cond, sampler=sampler)
        x_prev = pf(T.softmax(step.class_logits, axis=1), cond)
        outs[band] = x_prev
        h = step.hidden
    x_ntf = synthesis(bank, T.concat([outs[k] for k in range(cfg.n_bands)], axis=-2))
    x_ref = fb.synthesize_array(bank, batch.subbands).astype(dtype)
    return loss_spectral(x_ntf, x_ref, stft)


def pf_losses(pf: PostFilter, net: FarBarNet, batch: Batch, bank: fb.PqmfBank, cfg: PfTrainConfig,
              rng: np.random.Generator) -> tuple[float, float, float]:
    """Evaluate (L_D, L_S, L_PF) without recording gradients."""
    with T.no_tape():
        l_d = float(teacher_forced_path(pf, net, batch, bank, cfg.far_order).data)
        l_s = float(free_running_path(pf, net, batch, bank, cfg.stft, rng, cfg.far_order, cfg.sharpen).data)
    return l_d, l_s, combine(l_d, l_s)


def pf_train_step(pf: PostFilter, net: FarBarNet, batch: Batch, bank: fb.PqmfBank, opt: Adam,
                  cfg: PfTrainConfig, step: int, rng: np.random.Generator) -> dict:
    _require_frozen(net)
    use_d = cfg.schedule == "joint" or step % 2 == 0
    use_s = cfg.schedule == "joint" or step % 2 == 1
    losses = {}
    with T.Tape() as tape:
        total = None
        if use_d:
            l_d = teacher_forced_path(pf, net, batch, bank, cfg.far_order)
            losses["L_D"] = float(l_d.data)
            total = T.mul(l_d, WEIGHT_D)
        if use_s:
            l_s = free_running_path(pf, net, batch, bank, cfg.stft, rng, cfg.far_order, cfg.sharpen)
            losses["L_S"] = float(l_s.data)
            term = T.mul(l_s, WEIGHT_S)
            total = term if total is None else T.add(total, term)
    grads = tape.backward(total)
    opt.step(grads)
    return losses


def train_postfilter(pf: PostFilter, net: FarBarNet, batches, cfg: PfTrainConfig = PfTrainConfig(),
                     bank: fb.PqmfBank | None = None, opt: Adam | None = None, callback=None) -> PostFilter:
    """Optimize only the post-filter against a frozen network.

    ``batches`` is any iterable of :class:`Batch`; ``cfg.schedule`` chooses
    between alternating the two paths per step and using both every step.
    """
    _require_frozen(net)
    if cfg.schedule not in ("alternate", "joint"):
        raise ValueError(f"unknown schedule {cfg.schedule!r}")
    bank = bank if bank is not None else fb.design_bank(net.cfg.n_bands)
    opt = opt if opt is not None else Adam(dict(pf.named_parameters()), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    it = iter(batches)
    for step in range(cfg.steps):
        losses = pf_train_step(pf, net, next(it), bank, opt, cfg, step, rng)
        if callback is not None:
            callback(step, losses)
    return pf
