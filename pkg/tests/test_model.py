import logging

import numpy as np
import pytest

from farbar import filterbank as fb
from farbar import tensor as T
from farbar.features import MelSpectrogram
from farbar.model import (Batch, FarBarNet, GenerationConfig, ModelConfig, band_order, generate, sample_class,
                          teacher_forced_loss, tiny_config)
from farbar.postfilter import PostFilter
from farbar.tensor import ShapeError, Tensor

from oracles import central_diff

RNG = np.random.default_rng(11)


def random_mel(frames=6, seed=0):
    return MelSpectrogram(np.random.default_rng(seed).standard_normal((frames, 80)).astype(np.float32))


def toy_batch(net, b=2, frames=2, seed=0):
    rng = np.random.default_rng(seed)
    length = frames * 25
    t = np.arange(length * 8)
    wav = 0.4 * np.sin(2 * np.pi * 0.013 * t)[None] * rng.uniform(0.5, 1.0, (b, 1))
    sub = fb.analyze_array(fb.default_bank(), wav)
    return Batch(sub, rng.standard_normal((b, 80, frames)).astype(np.float32), rng.standard_normal((b, 1, length)))


@pytest.fixture
def net():
    return FarBarNet(tiny_config(), np.random.default_rng(0))


def test_far_step_shapes(net):
    cond = net.condition(Tensor(np.zeros((2, 80, 4), np.float32)), 100)
    x = Tensor(np.zeros((2, 1, 100), np.float32))
    h = Tensor(np.zeros((2, 4, 100), np.float32))
    out = net.far_step(x, h, cond, sampler=lambda k, logit: np.zeros(logit.shape))
    assert out.class_logits.shape == (2, 256, 100)
    assert [b.shape for b in out.bit_logits] == [(2, 1, 100)] * 3
    assert out.hidden.shape == (2, 4, 100)


def test_far_step_rejects_mismatched_hidden(net):
    cond = net.condition(Tensor(np.zeros((1, 80, 4), np.float32)), 100)
    with pytest.raises(ShapeError, match="channel"):
        net.far_step(Tensor(np.zeros((1, 1, 100), np.float32)), Tensor(np.zeros((1, 3, 100), np.float32)), cond,
                     sampler=lambda k, logit: np.zeros(logit.shape))


@pytest.mark.parametrize("use_pf", [False, True])
def test_generation_takes_eight_passes_of_at_most_four_stages(net, use_pf):
    pf = PostFilter.for_net(net) if use_pf else None
    for frames in (3, 11):
        net.reset_counters()
        wav = generate(net, random_mel(frames), GenerationConfig(use_postfilter=use_pf), postfilter=pf)
        assert wav.shape == (frames * 200,)
        assert net.forward_passes == 8
        assert net.prediction_stages == 32
        assert np.all(np.abs(wav) <= 1.0)


def test_bar_depth_zero_bypasses_bit_blocks(net, caplog):
    with caplog.at_level(logging.INFO):
        generate(net, random_mel(), GenerationConfig(use_postfilter=False, bar_depth=0))
    assert net.prediction_stages == 8
    assert any("bypassed" in r.message for r in caplog.records)


def test_bar2_network_has_two_bit_blocks():
    net = FarBarNet(tiny_config(bar_depth=2))
    generate(net, random_mel(), GenerationConfig(use_postfilter=False))
    assert len(net.bit_blocks) == 2 and net.prediction_stages == 24


def test_band_orders():
    assert band_order(8) == [7, 6, 5, 4, 3, 2, 1, 0]
    assert band_order(8, "low_to_high") == list(range(8))
    with pytest.raises(ValueError):
        band_order(8, "sideways")


def test_same_seed_same_waveform(net):
    a = generate(net, random_mel(), GenerationConfig(use_postfilter=False, seed=5))
    b = generate(net, random_mel(), GenerationConfig(use_postfilter=False, seed=5))
    c = generate(net, random_mel(), GenerationConfig(use_postfilter=False, seed=6))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_grouped_network_generates_full_length():
    net = FarBarNet(tiny_config(group=5), np.random.default_rng(0))
    wav = generate(net, random_mel(7), GenerationConfig(use_postfilter=False))
    assert wav.shape == (1400,) and net.forward_passes == 8
    with pytest.raises(ValueError, match="group"):
        generate(net, random_mel(7), GenerationConfig(use_postfilter=False, group=1))


def test_postfilter_required_when_requested(net):
    with pytest.raises(ValueError, match="post-filter"):
        generate(net, random_mel(), GenerationConfig(use_postfilter=True))


def test_parameter_counts():
    counts = []
    for g in (1, 5, 10):
        net = FarBarNet(ModelConfig(group=g))
        counts.append(net.num_parameters() + PostFilter.for_net(net).num_parameters())
    assert 4.9e6 <= counts[0] <= 6.7e6
    assert counts[0] < counts[1] < counts[2]


def test_config_round_trip_and_validation():
    cfg = tiny_config(group=2, bar_depth=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(bar_depth=1)
    with pytest.raises(ValueError):
        ModelConfig(hop=256)


def test_freeze_keeps_parameters_in_state(net):
    n = len(net.state_dict())
    net.freeze()
    assert net.trainable_parameters() == [] and len(net.state_dict()) == n


def test_teacher_forced_loss_starts_near_uniform(net):
    loss = float(teacher_forced_loss(net, toy_batch(net)).data)
    # CE of a near-uniform 256-way posterior plus three near-uniform bits
    assert loss == pytest.approx(np.log(256) + 3 * np.log(2), rel=0.05)


def test_teacher_forced_gradient_matches_finite_differences():
    net = FarBarNet(tiny_config(), np.random.default_rng(2)).astype(np.float64)
    batch = toy_batch(net, b=1, frames=2)
    params = dict(net.named_parameters())
    with T.Tape() as tape:
        loss = teacher_forced_loss(net, batch)
    grads = tape.backward(loss)
    for name in ("upsampler.layers.0.weight", "wn_a.in_layers.1.weight", "bit_blocks.2.weight",
                 "hidden_head.weight", "posterior_head.bias"):
        p = params[name]
        idx = tuple(RNG.integers(0, s) for s in p.shape)
        flat = p.data.reshape(-1)
        pos = np.ravel_multi_index(idx, p.shape)

        def f():
            with T.no_tape():
                return float(teacher_forced_loss(net, batch).data)

        probe = np.array([flat[pos]])
        view = flat[pos:pos + 1]

        def f_probe():
            view[0] = probe[0]
            return f()

        fd = central_diff(f_probe, probe)[0]
        view[0] = probe[0]
        assert grads[p].reshape(-1)[pos] == pytest.approx(fd, rel=1e-4, abs=1e-8), name


def test_sample_class_follows_distribution():
    logits = np.log(np.array([0.1, 0.6, 0.3]))[None, :, None].repeat(20000, axis=2)
    draws = sample_class(logits, 1.0, np.random.default_rng(0))
    freq = np.bincount(draws.ravel(), minlength=3) / draws.size
    np.testing.assert_allclose(freq, [0.1, 0.6, 0.3], atol=0.015)
    assert np.all(sample_class(logits, 1.0, None, argmax=True) == 1)
