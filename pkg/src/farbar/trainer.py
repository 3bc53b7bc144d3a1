"""Data pipeline and the two-phase training recipe.

Phase 1 trains the autoregressive network on the teacher-forced
cross-entropy objective.  Phase 2 loads a phase-1 checkpoint, freezes the
network and trains the post-filter.  Batch ``i`` is drawn from an RNG seeded
with ``(seed, i)``, so a resumed run sees exactly the batches an
uninterrupted run would have seen.
"""

from __future__ import annotations

import logging
import queue
import threading
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import filterbank as fb
from . import tensor as T
from .audio import read_wav
from .features import SAMPLE_RATE, FeatureError, mel_spectrogram, read_features
from .model import FAR_ORDERS, Batch, FarBarNet, ModelConfig, teacher_forced_loss, tiny_config
from .optim import Adam
from .postfilter import PfTrainConfig, PostFilter, StftLossConfig, pf_train_step

log = logging.getLogger(__name__)

PHASE1_NAME = "phase1.pvck"
PHASE2_NAME = "phase2.pvck"
LOG_NAME = "train.log"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    corpus: str = "corpus"
    out_dir: str = "run"
    model: str = "tiny"  # "tiny" or "default"
    batch_size: int = 4
    segment: int = 8000  # waveform samples per example
    steps: int = 10000
    lr: float = 1e-4
    lr_decay_every: int = 0  # 0 keeps the rate constant
    lr_decay: float = 0.5
    seed: int = 0
    bar_depth: int = 3
    far_order: str = "high_to_low"
    use_postfilter: bool = True
    group: int = 1
    sample_rate: int = SAMPLE_RATE
    checkpoint_every: int = 1000
    log_every: int = 100
    prefetch: int = 0  # queue depth of the loader thread; 0 loads inline
    threads: int = 1  # BLAS threads; 1 gives bit-reproducible runs
    pf_steps: int = 2000
    pf_lr: float = 1e-4
    pf_schedule: str = "alternate"

    def __post_init__(self):
        if self.model not in ("tiny", "default"):
            raise ConfigError(f"model must be 'tiny' or 'default', got {self.model!r}")
        if self.far_order not in FAR_ORDERS:
            raise ConfigError(f"far_order must be one of {FAR_ORDERS}, got {self.far_order!r}")
        if self.pf_schedule not in ("alternate", "joint"):
            raise ConfigError(f"pf_schedule must be 'alternate' or 'joint', got {self.pf_schedule!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be positive and steps non-negative")
        mc = self.model_config()
        unit = mc.hop * mc.group
        if self.segment % unit:
            raise ConfigError(f"segment {self.segment} must be a multiple of hop x group = {unit}")

    def model_config(self) -> ModelConfig:
        try:
            if self.model == "tiny":
                return tiny_config(bar_depth=self.bar_depth, group=self.group)
            return ModelConfig(bar_depth=self.bar_depth, group=self.group)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def lr_at(self, step: int, base: float | None = None) -> float:
        base = self.lr if base is None else base
        if self.lr_decay_every <= 0:
            return base
        return base * self.lr_decay ** (step // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, kind: type, raw: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str, **overrides) -> TrainConfig:
    """Read ``key = value`` lines (``#`` starts a comment); missing keys keep their defaults."""
    kinds = {f.name: type(f.default) for f in fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key not in kinds:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(kinds)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return TrainConfig(**values)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)


# ---------------------------------------------------------------- data

@dataclass
class Utterance:
    name: str
    wav: np.ndarray
    mel: np.ndarray  # (frames, dims)
    subbands: np.ndarray  # (N, frames * hop / N), zero beyond the waveform


def load_corpus(corpus_dir: str | Path, cfg: TrainConfig) -> list[Utterance]:
    """All ``*.wav`` files in a directory, with ``<stem>.pvfe`` features when present."""
    corpus_dir = Path(corpus_dir)
    files = sorted(corpus_dir.glob("*.wav"))
    if not files:
        raise FileNotFoundError(f"{corpus_dir}: no WAV files")
    mc = cfg.model_config()
    bank = fb.design_bank(mc.n_bands) if mc.n_bands != 8 else fb.default_bank()
    out = []
    for path in files:
        wav, _ = read_wav(path, cfg.sample_rate)
        feat = path.with_suffix(".pvfe")
        if feat.exists():
            m = read_features(feat)
            if m.hop != mc.hop or m.sample_rate != cfg.sample_rate:
                raise FeatureError(f"{feat}: hop/sample rate {m.hop}/{m.sample_rate} do not match the config")
        else:
            m = mel_spectrogram(wav, cfg.sample_rate)
        frames = max(m.frames, cfg.segment // mc.hop)
        mel = np.concatenate([m.values, np.repeat(m.values[-1:], frames - m.frames, axis=0)])
        padded = np.zeros(frames * mc.hop)
        padded[: wav.size] = wav[: padded.size]
        out.append(Utterance(path.stem, wav, mel, fb.analyze_array(bank, padded)))
    return out


class BatchStream:
    """Deterministic, random-access source of training batches."""

    def __init__(self, corpus: list[Utterance], cfg: TrainConfig):
        self.corpus = corpus
        self.cfg = cfg
        self.mc = cfg.model_config()

    def batch(self, step: int) -> Batch:
        cfg, mc = self.cfg, self.mc
        rng = np.random.default_rng([cfg.seed, step])
        seg_frames = cfg.segment // mc.hop
        per_frame = mc.hop // mc.n_bands
        subs, mels = [], []
        for _ in range(cfg.batch_size):
            u = self.corpus[int(rng.integers(len(self.corpus)))]
            start = int(rng.integers(u.mel.shape[0] - seg_frames + 1))
            subs.append(u.subbands[:, start * per_frame:(start + seg_frames) * per_frame])
            mels.append(u.mel[start:start + seg_frames].T)
        length = seg_frames * per_frame
        noise = rng.standard_normal((cfg.batch_size, 1, length))
        return Batch(np.stack(subs), np.stack(mels).astype(np.float32), noise)

    def iterate(self, start: int, stop: int):
        if self.cfg.prefetch <= 0:
            for step in range(start, stop):
                yield self.batch(step)
            return
        q: queue.Queue = queue.Queue(maxsize=self.cfg.prefetch)
        halt = threading.Event()

        def producer():
            for step in range(start, stop):
                if halt.is_set():
                    return
                q.put(self.batch(step))

        worker = threading.Thread(target=producer, daemon=True)
        worker.start()
        try:
            for _ in range(start, stop):
                yield q.get()
        finally:
            halt.set()
            while worker.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    worker.join(0.05)


def make_batches(corpus_dir: str | Path, cfg: TrainConfig) -> BatchStream:
    return BatchStream(load_corpus(corpus_dir, cfg), cfg)


# ---------------------------------------------------------------- checkpoints

def _thread_limit(cfg: TrainConfig):
    if cfg.threads <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=cfg.threads)


def save_checkpoint(path, net: FarBarNet, cfg: TrainConfig, step: int, phase: int, opt: Adam | None = None,
                    pf: PostFilter | None = None) -> None:
    meta = {"model": net.cfg.to_dict(), "train": cfg.to_dict(), "step": step, "phase": phase,
            "adam_step": opt.step_count if opt is not None else 0}
    arrays = ck.prefixed("net/", net.state_dict())
    if pf is not None:
        arrays.update(ck.prefixed("pf/", pf.state_dict()))
    if opt is not None:
        arrays.update(opt.state_arrays())
    ck.save(path, meta, arrays)


@dataclass
class Loaded:
    meta: dict
    arrays: dict
    net: FarBarNet
    pf: PostFilter | None

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    @property
    def phase(self) -> int:
        return int(self.meta["phase"])


def load_checkpoint(path) -> Loaded:
    meta, arrays = ck.load(path)
    try:
        mcfg = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise ck.CheckpointError(f"{path}: incompatible model configuration ({e})") from None
    net = FarBarNet(mcfg)
    net.load_state_dict(ck.strip_prefix("net/", arrays))
    pf = None
    pf_state = ck.strip_prefix("pf/", arrays)
    if pf_state:
        pf = PostFilter.for_net(net)
        pf.load_state_dict(pf_state)
    return Loaded(meta, arrays, net, pf)


def append_log(path: Path, step: int, name: str, value: float) -> None:
    with open(path, "a") as f:
        f.write(f"{step}\t{name}\t{value!r}\n")


def read_log(path: str | Path) -> list[tuple[int, str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        step, name, value = line.split("\t")
        rows.append((int(step), name, float(value)))
    return rows


# ---------------------------------------------------------------- phase 1

@dataclass
class TrainResult:
    net: FarBarNet
    opt: Adam
    step: int
    history: list  # (step, loss)
    checkpoint: Path | None = None


def train_step(net: FarBarNet, batch: Batch, opt: Adam, far_order: str) -> float:
    with T.Tape() as tape:
        loss = teacher_forced_loss(net, batch, far_order)
    opt.step(tape.backward(loss, wrt=net.trainable_parameters()))
    return float(loss.data)


def run_training(cfg: TrainConfig, stream: BatchStream | None = None, resume: str | Path | None = None,
                 callback=None, save: bool = True) -> TrainResult:
    """Phase 1.  ``callback(step, loss)`` may return True to stop early."""
    stream = stream if stream is not None else make_batches(cfg.corpus, cfg)
    out_dir = Path(cfg.out_dir)
    if save:
        out_dir.mkdir(parents=True, exist_ok=True)
    start = 0
    if resume is not None:
        loaded = load_checkpoint(resume)
        if loaded.meta["model"] != cfg.model_config().to_dict():
            raise ck.CheckpointError(f"{resume}: model configuration differs from the training config")
        net = loaded.net
        opt = Adam(dict(net.named_parameters()), lr=cfg.lr)
        opt.load_state_arrays(loaded.arrays, int(loaded.meta["adam_step"]))
        start = loaded.step
    else:
        net = FarBarNet(cfg.model_config(), np.random.default_rng(cfg.seed))
        opt = Adam(dict(net.named_parameters()), lr=cfg.lr)
    history = []
    step = start
    ckpt = out_dir / PHASE1_NAME
    with _thread_limit(cfg):
        for step, batch in enumerate(stream.iterate(start, cfg.steps), start + 1):
            opt.lr = cfg.lr_at(step - 1)
            loss = train_step(net, batch, opt, cfg.far_order)
            history.append((step, loss))
            if save and (step % cfg.log_every == 0 or step == 1):
                append_log(out_dir / LOG_NAME, step, "ce", loss)
            if save and step % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt, net, cfg, step, 1, opt)
            if callback is not None and callback(step, loss):
                break
    if save:
        save_checkpoint(ckpt, net, cfg, step, 1, opt)
    return TrainResult(net, opt, step, history, ckpt if save else None)


# ---------------------------------------------------------------- phase 2

def run_pf_training(cfg: TrainConfig, phase1: str | Path | None, stream: BatchStream | None = None,
                    callback=None, save: bool = True) -> tuple[PostFilter, list, Path | None]:
    """Phase 2: freeze the phase-1 network and fit the post-filter."""
    if phase1 is None or not Path(phase1).exists():
        raise ck.CheckpointError(f"post-filter training needs a phase-1 checkpoint (got {phase1})")
    loaded = load_checkpoint(phase1)
    if loaded.phase != 1:
        raise ck.CheckpointError(f"{phase1}: expected a phase-1 checkpoint, found phase {loaded.phase}")
    net = loaded.net.freeze()
    pf = PostFilter.for_net(net, np.random.default_rng(cfg.seed + 1))
    opt = Adam(ck.prefixed("pf/", dict(pf.named_parameters())), lr=cfg.pf_lr)
    pcfg = PfTrainConfig(steps=cfg.pf_steps, lr=cfg.pf_lr, schedule=cfg.pf_schedule, far_order=cfg.far_order,
                         stft=StftLossConfig(sample_rate=cfg.sample_rate), seed=cfg.seed)
    stream = stream if stream is not None else make_batches(cfg.corpus, cfg)
    bank = fb.design_bank(net.cfg.n_bands) if net.cfg.n_bands != 8 else fb.default_bank()
    rng = np.random.default_rng([cfg.seed, 2])
    out_dir = Path(cfg.out_dir)
    if save:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    with _thread_limit(cfg):
        for step, batch in enumerate(stream.iterate(0, cfg.pf_steps), 1):
            losses = pf_train_step(pf, net, batch, bank, opt, pcfg, step - 1, rng)
            history.append((step, losses))
            if save and (step % cfg.log_every == 0 or step == 1):
                for name, value in losses.items():
                    append_log(out_dir / LOG_NAME, step, name, value)
            if callback is not None and callback(step, losses):
                break
    path = out_dir / PHASE2_NAME if save else None
    if save:
        save_checkpoint(path, net, cfg, loaded.step, 2, opt, pf=pf)
    return pf, history, path
