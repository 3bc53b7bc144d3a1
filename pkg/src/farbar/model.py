"""Frequency-wise / bit-wise autoregressive vocoder.

One network invocation (:meth:`FarBarNet.far_step`) produces a whole subband
at once, conditioned on the previously generated subband, a carried hidden
state and the upsampled mel features.  Inside a step the three most
significant mu-law bits are predicted one after another by kernel-5 "bit
blocks" before the full 256-way class.  Generating an utterance therefore
costs ``n_bands`` forward passes no matter how long it is.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import filterbank as fb
from . import quantize as q
from . import tensor as T
from .features import FeatureUpsampler, MelSpectrogram, check_frame_rate
from .nn import WN, Conv1d, Module
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

FAR_ORDERS = ("high_to_low", "low_to_high")


@dataclass(frozen=True)
class ModelConfig:
    n_bands: int = 8
    channels: int = 128
    wn_layers: int = 15
    wn_kernel: int = 3
    max_dilation: int = 32
    bit_kernel: int = 5
    hidden_channels: int = 16
    n_classes: int = 256
    mel_dims: int = 80
    upsample_hidden: int = 32
    cond_channels: int = 80
    upsample_rates: tuple = (5, 5)
    hop: int = 200
    group: int = 1
    bar_depth: int = 3
    pf_layers: int = 5
    pf_channels: int = 64

    def __post_init__(self):
        if self.bar_depth not in (0, 2, 3):
            raise ValueError(f"bar_depth must be 0, 2 or 3, got {self.bar_depth}")
        if self.group < 1:
            raise ValueError(f"group must be >= 1, got {self.group}")
        if self.channels <= self.group:
            raise ValueError("channels must exceed the group size (bit channels are carved out of them)")
        object.__setattr__(self, "upsample_rates", tuple(self.upsample_rates))
        check_frame_rate(self.hop, self.n_bands, self.upsample_rates)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["upsample_rates"] = list(self.upsample_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if k == "upsample_rates" else v) for k, v in d.items() if k in known})


def tiny_config(**overrides) -> ModelConfig:
    """A few-thousand-parameter configuration for tests and desk-scale demos."""
    base = dict(channels=16, wn_layers=3, hidden_channels=4, upsample_hidden=8, cond_channels=8,
                pf_layers=2, pf_channels=8)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class GenerationConfig:
    far_order: str = "high_to_low"
    bar_depth: int | None = None  # None: the network's own depth
    use_postfilter: bool = True
    group: int | None = None  # must match the network when given
    sharpen: tuple = (10.0, 10.0, 5.0, 10.0)
    seed: int = 0
    argmax: bool = False

    def __post_init__(self):
        if self.far_order not in FAR_ORDERS:
            raise ValueError(f"far_order must be one of {FAR_ORDERS}")
        if self.bar_depth is not None and self.bar_depth not in (0, 2, 3):
            raise ValueError(f"bar_depth must be 0, 2 or 3, got {self.bar_depth}")


def band_order(n_bands: int, far_order: str = "high_to_low") -> list[int]:
    """Filter-bank channel visit order (channel 0 is the lowest band)."""
    if far_order not in FAR_ORDERS:
        raise ValueError(f"far_order must be one of {FAR_ORDERS}")
    order = list(range(n_bands))
    return order[::-1] if far_order == "high_to_low" else order


@dataclass
class Conditioning:
    f: Tensor  # grouped features (B, C_f * g, T / g)
    wn_a: list
    wn_b: list
    length: int
    pf: list | None = None


@dataclass
class StepOutput:
    bit_logits: list  # each (B, 1, T)
    class_logits: Tensor  # (B, n_classes, T)
    hidden: Tensor  # (B, C_h, T / g)
    bits: list = field(default_factory=list)  # 0/1 arrays (B, 1, T) fed to later stages


class FarBarNet(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        g, c = cfg.group, cfg.channels
        self.upsampler = FeatureUpsampler(cfg.mel_dims, cfg.upsample_hidden, cfg.cond_channels,
                                          cfg.upsample_rates, rng=rng)
        cond = cfg.cond_channels * g
        self.input_proj = Conv1d(g + cfg.hidden_channels, c, 1, rng=rng)
        self.wn_a = WN(c, cond, cfg.wn_layers, cfg.wn_kernel, cfg.max_dilation, rng=rng)
        # each block emits g bit logits in its first channels; the rest go on through Mish
        self.bit_blocks = [Conv1d(c, c, cfg.bit_kernel, rng=rng) for _ in range(cfg.bar_depth)]
        self.wn_b = WN(c, cond, cfg.wn_layers, cfg.wn_kernel, cfg.max_dilation, rng=rng)
        self.hidden_head = Conv1d(c, cfg.hidden_channels, 1, rng=rng)
        self.out1 = Conv1d(c, c, 1, rng=rng)
        self.out2 = Conv1d(c, c, 1, rng=rng)
        self.posterior_head = Conv1d(c, cfg.n_classes * g, 1, rng=rng)
        self.frozen = False
        self.forward_passes = 0
        self.prediction_stages = 0

    def reset_counters(self) -> None:
        self.forward_passes = 0
        self.prediction_stages = 0

    def freeze(self) -> "FarBarNet":
        for p in self.parameters():
            p.requires_grad = False
        self.frozen = True
        return self

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def condition(self, mel: Tensor, length: int) -> Conditioning:
        """Upsample ``mel`` ``(B, dims, frames)`` to ``length`` steps and project it per layer."""
        g = self.cfg.group
        if length % g:
            raise ShapeError(f"subband length {length} not divisible by group size {g}")
        f = self.upsampler(mel, length)
        fg = T.group(f, g)
        return Conditioning(fg, self.wn_a.condition(fg), self.wn_b.condition(fg), length)

    def far_step(self, x_prev: Tensor, h_prev: Tensor, cond: Conditioning,
                 teacher_bits: list | None = None, sampler=None, bar_depth: int | None = None) -> StepOutput:
        """One FAR iteration: previous subband -> bit logits, class logits, next hidden state.

        ``teacher_bits`` (training) supplies ground-truth bit planes; otherwise
        ``sampler(k, logits)`` must return the sampled plane for stage ``k``.
        """
        cfg = self.cfg
        g, c = cfg.group, cfg.channels
        depth = cfg.bar_depth if bar_depth is None else min(bar_depth, cfg.bar_depth)
        length = x_prev.shape[-1]
        if length != cond.length:
            raise ShapeError(f"far_step: x_prev time axis is {length}, features have {cond.length}")
        if h_prev.shape[-1] * g != length:
            raise ShapeError(f"far_step: h_prev time axis is {h_prev.shape[-1]}, expected {length // g}")
        if h_prev.shape[-2] != cfg.hidden_channels:
            raise ShapeError(f"far_step: h_prev channel axis is {h_prev.shape[-2]}, expected {cfg.hidden_channels}")

        z = self.input_proj(T.concat([T.group(x_prev, g), h_prev]))
        z = self.wn_a(z, cond=cond.wn_a)
        bit_logits, bits = [], []
        for k in range(depth):
            y = self.bit_blocks[k](z)
            logit = T.ungroup(T.slice_channels(y, 0, g), g)
            rest = T.mish(T.slice_channels(y, g, c))
            if teacher_bits is not None:
                b = np.asarray(teacher_bits[k], dtype=y.dtype)
            else:
                b = np.asarray(sampler(k, logit), dtype=y.dtype)
            bit_logits.append(logit)
            bits.append(b)
            z = T.concat([T.group(Tensor(b), g), rest])
        z = self.wn_b(z, cond=cond.wn_b)
        hidden = self.hidden_head(z)
        y = T.mish(self.out1(z))
        y = T.mish(self.out2(y))
        class_logits = T.ungroup(self.posterior_head(y), g)
        self.forward_passes += 1
        self.prediction_stages += depth + 1
        return StepOutput(bit_logits, class_logits, hidden, bits)


# ---------------------------------------------------------------- sampling

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sample_bit(logits: np.ndarray, scale: float, rng: np.random.Generator, argmax: bool = False) -> np.ndarray:
    p = _sigmoid(scale * np.asarray(logits, dtype=np.float64))
    if argmax:
        return (p > 0.5).astype(np.int64)
    return (rng.random(p.shape) < p).astype(np.int64)


def sharpened_softmax(logits: np.ndarray, scale: float, axis: int = -2) -> np.ndarray:
    z = scale * np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def sample_class(logits: np.ndarray, scale: float, rng: np.random.Generator, argmax: bool = False) -> np.ndarray:
    """Draw one class per position from ``softmax(scale * logits)`` over axis -2."""
    if argmax:
        return np.argmax(logits, axis=-2)
    p = sharpened_softmax(logits, scale)
    cdf = np.cumsum(p, axis=-2)
    u = rng.random(cdf.shape[:-2] + (1,) + cdf.shape[-1:])
    idx = (cdf < u * cdf[..., -1:, :]).sum(axis=-2)
    return np.minimum(idx, p.shape[-2] - 1)


def sample_outputs(bit_logits: list, class_logits: np.ndarray, cfg: GenerationConfig,
                   rng: np.random.Generator) -> tuple[list, np.ndarray]:
    """Sample bit planes and classes from raw logits with the sharpening scalars."""
    bits = [sample_bit(l, cfg.sharpen[k], rng, cfg.argmax) for k, l in enumerate(bit_logits)]
    return bits, sample_class(class_logits, cfg.sharpen[3], rng, cfg.argmax)


# ---------------------------------------------------------------- generation

def subband_length(frames: int, hop: int, n_bands: int) -> int:
    return frames * hop // n_bands


def _padded_mel(mel: MelSpectrogram, n_bands: int, factor: int, g: int) -> tuple[np.ndarray, int]:
    length = subband_length(mel.frames, mel.hop, n_bands)
    padded = -(-length // g) * g
    values = mel.values
    extra = -(-padded // factor) - mel.frames
    if extra > 0:
        values = np.concatenate([values, np.repeat(values[-1:], extra, axis=0)])
    return values, padded


def generate(net: FarBarNet, mel: MelSpectrogram, cfg: GenerationConfig = GenerationConfig(),
             rng: np.random.Generator | None = None, postfilter=None,
             bank: fb.PqmfBank | None = None) -> np.ndarray:
    """Synthesize a waveform of ``frames * hop`` samples in exactly ``n_bands`` network passes."""
    mcfg = net.cfg
    if cfg.group is not None and cfg.group != mcfg.group:
        raise ValueError(f"group size {cfg.group} incompatible with network group {mcfg.group}")
    if mel.frames < 1:
        raise ValueError("need at least one feature frame")
    if mel.dims != mcfg.mel_dims:
        raise ShapeError(f"features have {mel.dims} dims, network expects {mcfg.mel_dims}")
    check_frame_rate(mel.hop, mcfg.n_bands, mcfg.upsample_rates)
    bank = bank if bank is not None else (fb.default_bank() if mcfg.n_bands == 8 else fb.design_bank(mcfg.n_bands))
    if bank.n_bands != mcfg.n_bands:
        raise ValueError(f"filter bank has {bank.n_bands} bands, network expects {mcfg.n_bands}")
    if cfg.use_postfilter and postfilter is None:
        raise ValueError("use_postfilter is set but no post-filter was given")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    g = mcfg.group
    depth = mcfg.bar_depth if cfg.bar_depth is None else min(cfg.bar_depth, mcfg.bar_depth)
    if depth == 0:
        log.info("bit blocks bypassed (bar_depth=0)")

    values, length = _padded_mel(mel, mcfg.n_bands, net.upsampler.factor, g)
    dtype = net.input_proj.weight.dtype
    mel_t = Tensor(values.T[None].astype(dtype))
    with T.no_tape():
        cond = net.condition(mel_t, length)
        if cfg.use_postfilter:
            cond.pf = postfilter.condition(cond.f)
        x_prev = Tensor(rng.standard_normal((1, 1, length)).astype(dtype))
        h = Tensor(np.zeros((1, mcfg.hidden_channels, length // g), dtype=dtype))
        bands = np.zeros((mcfg.n_bands, length))

        def sampler(k, logit):
            return sample_bit(logit.data, cfg.sharpen[k], rng, cfg.argmax)

        for band in band_order(mcfg.n_bands, cfg.far_order):
            out = net.far_step(x_prev, h, cond, sampler=sampler, bar_depth=depth)
            log.debug("FAR pass %d -> band %d", net.forward_passes, band)
            if cfg.use_postfilter:
                x_i = postfilter(T.softmax(out.class_logits, axis=1), cond).data
            else:
                classes = sample_class(out.class_logits.data, cfg.sharpen[3], rng, cfg.argmax)
                x_i = q.mulaw_decode(classes)[:, None, :].astype(dtype)
            bands[band] = x_i[0, 0]
            x_prev = Tensor(np.asarray(x_i, dtype=dtype))
            h = out.hidden
    wav = fb.synthesize_array(bank, bands)[: mel.frames * mel.hop]
    return np.clip(wav, -1.0, 1.0)


# ---------------------------------------------------------------- training objective

@dataclass
class Batch:
    subbands: np.ndarray  # (B, N, T) ground-truth subbands
    mel: np.ndarray  # (B, dims, frames)
    noise: np.ndarray  # (B, 1, T) stands in for the subband before the first

    @property
    def length(self) -> int:
        return self.subbands.shape[-1]


@dataclass
class Targets:
    classes: np.ndarray  # (B, N, T)
    bits: list  # three (B, N, T) planes


def make_targets(subbands: np.ndarray) -> Targets:
    classes = q.mulaw_encode(subbands)
    planes = q.bit_planes(classes)
    return Targets(classes, [planes.b1, planes.b2, planes.b3])


def teacher_forced_loss(net: FarBarNet, batch: Batch, far_order: str = "high_to_low",
                        per_step: list | None = None) -> Tensor:
    """Mean over FAR steps of ``BCE(b1) + BCE(b2) + BCE(b3) + CE(x)``.

    Each step is conditioned on the ground-truth previous subband (the noise
    for the first step), with the hidden state carried from the previous step.
    """
    cfg = net.cfg
    if batch.subbands.shape[1] != cfg.n_bands:
        raise ShapeError(f"batch has {batch.subbands.shape[1]} bands, network expects {cfg.n_bands}")
    if batch.noise.shape[-1] != batch.length:
        raise ShapeError(f"noise time axis is {batch.noise.shape[-1]}, subbands have {batch.length}")
    dtype = net.input_proj.weight.dtype
    targets = make_targets(batch.subbands)
    b, _, length = batch.subbands.shape
    cond = net.condition(Tensor(batch.mel.astype(dtype)), length)
    x_prev = Tensor(batch.noise.astype(dtype))
    h = Tensor(np.zeros((b, cfg.hidden_channels, length // cfg.group), dtype=dtype))
    total = None
    order = band_order(cfg.n_bands, far_order)
    for band in order:
        tb = [plane[:, band:band + 1] for plane in targets.bits]
        out = net.far_step(x_prev, h, cond, teacher_bits=tb)
        step = T.cross_entropy(out.class_logits, targets.classes[:, band])
        for k, logit in enumerate(out.bit_logits):
            step = T.add(step, T.bce_with_logits(logit, tb[k]))
        if per_step is not None:
            per_step.append(float(step.data))
        total = step if total is None else T.add(total, step)
        x_prev = Tensor(np.clip(batch.subbands[:, band:band + 1], -1.0, 1.0).astype(dtype))
        h = out.hidden
    return T.mul(total, 1.0 / len(order))


def teacher_forced_posteriors(net: FarBarNet, batch: Batch, cond: Conditioning,
                              far_order: str = "high_to_low") -> dict:
    """Class posteriors ``softmax(p_x)`` for each band under teacher forcing."""
    cfg = net.cfg
    dtype = net.input_proj.weight.dtype
    targets = make_targets(batch.subbands)
    b, _, length = batch.subbands.shape
    x_prev = Tensor(batch.noise.astype(dtype))
    h = Tensor(np.zeros((b, cfg.hidden_channels, length // cfg.group), dtype=dtype))
    posts = {}
    for band in band_order(cfg.n_bands, far_order):
        tb = [plane[:, band:band + 1] for plane in targets.bits]
        out = net.far_step(x_prev, h, cond, teacher_bits=tb)
        posts[band] = T.softmax(out.class_logits, axis=1)
        x_prev = Tensor(np.clip(batch.subbands[:, band:band + 1], -1.0, 1.0).astype(dtype))
        h = out.hidden
    return posts
