"""Train a small vocoder on synthetic harmonic clips, then resynthesize one.

Phase 1 trains the autoregressive network on teacher-forced cross-entropy.
Phase 2 freezes it and trains the post-filter.  Finally a held-out clip is
copy-synthesized from its mel features and scored with MCD, next to a
corpus clip.

Takes a few minutes on one core.  Run: python demos/toy_training.py
"""

import tempfile
from pathlib import Path

import numpy as np

from farbar.audio import write_wav
from farbar.features import mel_spectrogram
from farbar.metrics import mcd
from farbar.model import FarBarNet, GenerationConfig, generate
from farbar.trainer import TrainConfig, load_checkpoint, run_pf_training, run_training

SR = 22050


def harmonic_clip(seconds, f0, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * SR)) / SR
    x = sum(0.2 / k * np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 6)) for k in range(1, 15))
    x = x * (0.6 + 0.4 * np.sin(2 * np.pi * 1.5 * t + seed))
    return x + 0.01 * rng.standard_normal(t.size)


work = Path(tempfile.mkdtemp(prefix="farbar-demo-"))
(work / "corpus").mkdir()
for i in range(4):
    write_wav(work / "corpus" / f"clip{i}.wav", harmonic_clip(3.0, 120 + 30 * i, i), SR)
held_out = harmonic_clip(2.0, 165, 99)

cfg = TrainConfig(corpus=str(work / "corpus"), out_dir=str(work / "run"), segment=4000, steps=2000, lr=3e-3,
                  log_every=100, checkpoint_every=500, pf_steps=100, pf_lr=1e-3)
print(f"working in {work}")


def progress(step, loss):
    if step == 1 or step % 100 == 0:
        print(f"step {step:5d}  CE {loss:.3f}")


phase1 = run_training(cfg, callback=progress)
print("phase 2: post-filter on the frozen network")
_, history, phase2 = run_pf_training(cfg, phase1.checkpoint)
print("last post-filter losses:", {k: round(v, 4) for k, v in history[-1][1].items()})

untrained = FarBarNet(cfg.model_config(), np.random.default_rng(cfg.seed))
loaded = load_checkpoint(phase2)
sampled = GenerationConfig(use_postfilter=False)
# a small model learns its corpus well before it generalizes to new pitches
for label, ref in (("corpus clip", harmonic_clip(3.0, 120, 0)), ("held-out clip", held_out)):
    mel = mel_spectrogram(ref)
    print(label)
    for name, wav in (("untrained, sampled", generate(untrained, mel, sampled)),
                      ("trained, sampled", generate(loaded.net, mel, sampled)),
                      ("trained, post-filter", generate(loaded.net, mel, GenerationConfig(), postfilter=loaded.pf))):
        print(f"  {name:22s} MCD {mcd(ref, wav):6.2f} dB")
