"""How a sample becomes a class, and how the class splits into bit planes.

The network predicts the three most significant bits first, then the full
class given those bits.

Run: python demos/mulaw_bits.py
"""

import numpy as np

from farbar import quantize as q

for x in (-0.9, -0.05, -0.001, 0.0, 0.001, 0.05, 0.9):
    c = q.mulaw_encode(np.array([x]))
    p = q.bit_planes(c)
    print(f"x={x:+.3f}  class {int(c[0]):3d}  bits {int(p.b1[0])}{int(p.b2[0])}{int(p.b3[0])}  "
          f"decoded {float(q.mulaw_decode(c)[0]):+.5f}")

# companding spends most classes near zero
classes = np.arange(256)
levels = q.mulaw_decode(classes)
print(f"classes with |x| < 0.01: {(np.abs(levels) < 0.01).sum()} of 256")
