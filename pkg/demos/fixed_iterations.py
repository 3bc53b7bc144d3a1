"""Generation cost does not depend on utterance length.

A randomly initialised small network synthesizes 0.5 s, 2 s and 8 s of
audio.  Each takes exactly 8 network passes (one per subband), and each pass
runs at most 4 prediction stages (three bits and the class).

Run: python demos/fixed_iterations.py
"""

import time

import numpy as np

from farbar.features import MelSpectrogram
from farbar.model import FarBarNet, GenerationConfig, generate, tiny_config

net = FarBarNet(tiny_config(), np.random.default_rng(0))
rng = np.random.default_rng(1)

print("seconds  samples  passes  stages  wall_s")
for seconds in (0.5, 2.0, 8.0):
    frames = int(seconds * 22050 / 200)
    mel = MelSpectrogram(rng.standard_normal((frames, 80)).astype(np.float32))
    net.reset_counters()
    t0 = time.perf_counter()
    wav = generate(net, mel, GenerationConfig(use_postfilter=False))
    print(f"{seconds:7.1f}  {wav.size:7d}  {net.forward_passes:6d}  {net.prediction_stages:6d}  "
          f"{time.perf_counter() - t0:6.2f}")

# dropping the bit blocks leaves one stage per pass
net.reset_counters()
generate(net, mel, GenerationConfig(use_postfilter=False, bar_depth=0))
print(f"bar_depth=0: {net.forward_passes} passes, {net.prediction_stages} stages")
