import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farbar import filterbank as fb

from oracles import naive_circular_filter

RNG = np.random.default_rng(7)


@pytest.fixture(scope="module")
def bank():
    return fb.default_bank()


def test_analysis_matches_direct_circular_convolution(bank):
    x = RNG.standard_normal(96)
    origin = (bank.taps - 1) // 2
    expected = np.stack([naive_circular_filter(x, h, origin)[::8] for h in bank.analysis_filters])
    np.testing.assert_allclose(fb.analyze_array(bank, x), expected, atol=1e-12)


def test_synthesis_matches_direct_circular_convolution(bank):
    bands = RNG.standard_normal((8, 12))
    up = np.zeros((8, 96))
    up[:, ::8] = bands
    origin = bank.taps - 1 - (bank.taps - 1) // 2
    expected = 8 * sum(naive_circular_filter(up[k], bank.synthesis_filters[k], origin) for k in range(8))
    np.testing.assert_allclose(fb.synthesize_array(bank, bands), expected, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(200, 3000), st.integers(0, 2**31 - 1))
def test_round_trip_snr_at_least_40_db(length, seed):
    bank = fb.default_bank()
    x = np.random.default_rng(seed).standard_normal(length)
    stack = fb.analyze(bank, x)
    assert stack.bands.shape == (8, -(-length // 8))
    y = fb.synthesize(bank, stack)
    assert y.shape == x.shape
    assert fb.snr_db(x, y) >= 40.0


def test_other_band_counts_reconstruct():
    for n, taps in ((1, 63), (2, 63), (4, 63)):
        bank = fb.design_bank(n, taps)
        x = RNG.standard_normal(400)
        assert fb.round_trip_snr(bank, x) >= 40.0


def test_synthesis_adjoint_dot_product(bank):
    s = RNG.standard_normal((2, 8, 20))
    y = RNG.standard_normal((2, 160))
    lhs = np.sum(fb.synthesize_array(bank, s) * y)
    rhs = np.sum(s * fb.synthesize_adjoint(bank, y))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_dc_lands_in_lowest_band(bank):
    bands = fb.analyze_array(bank, np.ones(800))
    energy = np.sum(bands ** 2, axis=-1)
    assert energy[0] / energy.sum() > 0.999


@pytest.mark.parametrize("k", range(8))
def test_tone_lands_in_its_band(bank, k):
    length = 1600
    # centre of band k in cycles/sample is (k + 0.5) / 16
    t = np.arange(length)
    x = np.cos(2 * np.pi * (k + 0.5) / 16 * t)
    energy = np.sum(fb.analyze_array(bank, x) ** 2, axis=-1)
    assert int(np.argmax(energy)) == k
    assert energy[k] / energy.sum() > 0.99


def test_prototype_is_symmetric_lowpass(bank):
    p = bank.prototype
    np.testing.assert_allclose(p, p[::-1], atol=1e-15)
    assert 0 < bank.cutoff < 0.5 / 8
    assert bank.delay == bank.taps - 1


def test_silence_round_trip_reports_infinite_snr(bank):
    assert fb.round_trip_snr(bank, np.zeros(160)) == float("inf")


def test_length_not_multiple_of_bands_is_trimmed(bank):
    x = RNG.standard_normal(1003)
    y = fb.synthesize(bank, fb.analyze(bank, x))
    assert y.size == 1003
    assert fb.snr_db(x, y) >= 40.0


def test_errors(bank):
    with pytest.raises(fb.FilterbankError):
        fb.analyze(bank, np.zeros(0))
    with pytest.raises(fb.FilterbankError):
        fb.synthesize_array(bank, np.zeros((4, 10)))
    with pytest.raises(fb.FilterbankError):
        fb.design_bank(8, 127, cutoff=0.2)
    with pytest.raises(fb.FilterbankError):
        fb.design_bank(8, 20)


def test_dump_taps_rows(bank):
    rows = bank.dump_taps().strip().split("\n")
    assert len(rows) == 16
    assert all(len(r.split()) == bank.taps for r in rows)
