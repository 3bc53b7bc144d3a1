"""Split a signal into 8 subbands and put it back together.

Run: python demos/filterbank_round_trip.py
"""

import numpy as np

from farbar import filterbank as fb

SR = 22050

bank = fb.default_bank()
print(f"{bank.n_bands} bands, {bank.taps}-tap prototype, cutoff {bank.cutoff:.5f} cycles/sample")

# a chirp from 100 Hz to 10 kHz walks through every band in turn
t = np.arange(SR) / SR
x = 0.5 * np.sin(2 * np.pi * (100 * t + 0.5 * 9900 * t ** 2))

bands = fb.analyze_array(bank, x)
print(f"input {x.size} samples -> subbands {bands.shape}")

# energy per band over each tenth of a second shows the chirp climbing
tenth = bands.shape[-1] // 10
for k in range(10):
    seg = bands[:, k * tenth:(k + 1) * tenth]
    row = " ".join(f"{e:5.2f}" for e in np.sqrt((seg ** 2).mean(axis=-1)))
    print(f"{k / 10:.1f}s  {row}")

y = fb.synthesize(bank, bands, source_len=x.size)
print(f"round trip SNR {fb.snr_db(x, y):.1f} dB")
