import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from farbar import quantize as q


def mulaw_class_oracle(x):
    y = mpmath.sign(x) * mpmath.log(1 + 255 * abs(x)) / mpmath.log(256)
    return min(255, int(mpmath.floor((y + 1) / 2 * 256)))


def test_every_class_round_trips():
    c = np.arange(256)
    np.testing.assert_array_equal(q.mulaw_encode(q.mulaw_decode(c)), c)


def test_msb_is_class_above_127():
    c = np.arange(256)
    p = q.bit_planes(c)
    np.testing.assert_array_equal(p.b1, (c > 127).astype(np.int64))


def test_bit_planes_reassemble():
    c = np.arange(256)
    p = q.bit_planes(c)
    np.testing.assert_array_equal(q.reassemble(p), c)
    np.testing.assert_array_equal(p.b2, (c // 64) % 2)
    np.testing.assert_array_equal(p.b3, (c // 32) % 2)
    assert [x.shape for x in p.planes(2)] == [(256,), (256,)]


@pytest.mark.parametrize("x", [-1.0, -0.5, -0.01, -1e-6, 0.0, 1e-6, 0.003, 0.25, 0.999, 1.0])
def test_encode_matches_scalar_oracle(x):
    assert int(q.mulaw_encode(np.array(x))) == mulaw_class_oracle(x)


def test_zero_maps_to_class_128():
    assert int(q.mulaw_encode(np.array(0.0))) == 128


def test_out_of_range_is_clamped():
    np.testing.assert_array_equal(q.mulaw_encode(np.array([-3.0, 7.0])), [0, 255])


def test_decode_rejects_bad_classes():
    with pytest.raises(q.QuantizeError):
        q.mulaw_decode(np.array([256]))
    with pytest.raises(q.QuantizeError):
        q.mulaw_decode(np.array([-1]))


@given(st.floats(-1.0, 1.0))
def test_decode_stays_inside_cell(x):
    c = q.mulaw_encode(np.array(x))
    y = q.compand(q.mulaw_decode(c))
    lo = float(c) / 128 - 1
    assert lo <= y <= lo + 1 / 128


@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_encode_is_monotone(a, b):
    if a <= b:
        assert q.mulaw_encode(np.array(a)) <= q.mulaw_encode(np.array(b))


def test_compand_expand_inverse():
    x = np.linspace(-1, 1, 1001)
    np.testing.assert_allclose(q.expand(q.compand(x)), x, atol=1e-12)
    assert float(q.compand(np.array(1.0))) == pytest.approx(1.0)
    assert float(q.compand(np.array(0.5))) == pytest.approx(math.log(1 + 127.5) / math.log(256))
