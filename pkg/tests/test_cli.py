import logging

import numpy as np
import pytest

from farbar import cli
from farbar.audio import read_wav, write_wav
from farbar.features import read_features
from farbar.metrics import EvalReport
from farbar.trainer import TrainConfig, run_pf_training, run_training

from conftest import SR, harmonic_clip


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(corpus=str(toy_corpus), out_dir=str(out), segment=2000, batch_size=2, steps=1, pf_steps=1)
    phase1 = run_training(cfg).checkpoint
    _, _, phase2 = run_pf_training(cfg, phase1)
    return phase1, phase2


@pytest.fixture(scope="module")
def feature_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("feat")
    write_wav(d / "a.wav", harmonic_clip(0.5, 150, 0), SR)
    assert cli.main(["features", str(d), str(d / "out")]) == 0
    return d / "out" / "a.pvfe"


def test_features_one_file_per_wav(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    write_wav(src / "x.wav", harmonic_clip(1.0, 150, 0)[:12345], SR)
    code, out, _ = run(capsys, "features", src, tmp_path / "out")
    assert code == 0
    assert out.strip() == f"x.wav\t{-(-12345 // 200)}"
    assert read_features(tmp_path / "out" / "x.pvfe").frames == 62


def test_features_empty_dir_exits_2(tmp_path, capsys):
    code, _, err = run(capsys, "features", tmp_path, tmp_path / "out")
    assert code == cli.EXIT_EMPTY and "no WAV" in err


def test_features_corrupt_wav_exits_3(tmp_path, capsys):
    write_wav(tmp_path / "good.wav", harmonic_clip(0.3, 150, 0), SR)
    (tmp_path / "broken.wav").write_bytes(b"RIFF\x10\x00\x00\x00WAVEjunk")
    code, out, err = run(capsys, "features", tmp_path, tmp_path / "out")
    assert code == cli.EXIT_BAD_WAV
    assert "broken.wav" in err and "good.wav" in out
    assert (tmp_path / "out" / "good.pvfe").exists()


def test_synth_logs_eight_iterations(trained, feature_file, tmp_path, capsys, caplog):
    with caplog.at_level(logging.INFO):
        code, out, _ = run(capsys, "synth", trained[1], feature_file, tmp_path / "o.wav")
    assert code == 0
    assert any("FAR iterations: 8" in r.getMessage() for r in caplog.records)
    wav, sr = read_wav(tmp_path / "o.wav")
    assert sr == SR and wav.size == read_features(feature_file).frames * 200


def test_synth_same_seed_same_file(trained, feature_file, tmp_path, capsys):
    for name in ("a.wav", "b.wav"):
        assert run(capsys, "synth", trained[1], feature_file, tmp_path / name, "--seed", 7)[0] == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_synth_bar_depth_zero_logged(trained, feature_file, tmp_path, capsys, caplog):
    with caplog.at_level(logging.INFO):
        code, _, _ = run(capsys, "synth", trained[1], feature_file, tmp_path / "o.wav", "--bar-depth", 0,
                         "--no-pf")
    assert code == 0
    assert any("bypassed" in r.getMessage() for r in caplog.records)


def test_synth_incompatible_group_fails(trained, feature_file, tmp_path, capsys):
    code, _, err = run(capsys, "synth", trained[1], feature_file, tmp_path / "o.wav", "--g", 2)
    assert code == cli.EXIT_FAIL and "group" in err


def test_synth_phase_one_checkpoint_falls_back_to_sampling(trained, feature_file, tmp_path, capsys, caplog):
    with caplog.at_level(logging.WARNING):
        code, _, _ = run(capsys, "synth", trained[0], feature_file, tmp_path / "o.wav")
    assert code == 0 and any("post-filter" in r.getMessage() for r in caplog.records)


def test_copy_synth_reports_snr(tmp_path, capsys):
    x = harmonic_clip(1.0, 130, 3)[:22001]
    write_wav(tmp_path / "in.wav", x, SR)
    code, out, _ = run(capsys, "copy-synth", tmp_path / "in.wav", tmp_path / "out.wav")
    assert code == 0
    name, value = out.split("\t")
    assert name == "SNR" and float(value.split()[0]) >= 40
    y, _ = read_wav(tmp_path / "out.wav")
    assert y.size == 22001


def test_copy_synth_silence_is_infinite(tmp_path, capsys):
    write_wav(tmp_path / "in.wav", np.zeros(4000), SR)
    code, out, _ = run(capsys, "copy-synth", tmp_path / "in.wav", tmp_path / "out.wav")
    assert code == 0 and out.strip() == "SNR\tinf dB"


def test_bench_counts_eight_passes(capsys):
    code, out, _ = run(capsys, "bench", "--model", "tiny", "--durations", 0.5, 1.0)
    assert code == 0
    header, *rows = out.strip().splitlines()
    assert header.split("\t")[4] == "forward_passes"
    for row in rows:
        cols = row.split("\t")
        assert cols[4] == "8" and float(cols[5]) <= 4


def test_eval_identical_dirs(tmp_path, capsys):
    for d in ("ref", "gen"):
        (tmp_path / d).mkdir()
        for i in range(2):
            write_wav(tmp_path / d / f"u{i}.wav", harmonic_clip(1.0, 140 + 20 * i, i), SR)
    report = tmp_path / "report.txt"
    code, out, _ = run(capsys, "eval", tmp_path / "ref", tmp_path / "gen", "--report", report)
    assert code == 0
    rep = EvalReport.read(report)
    assert rep.mcd == 0.0 and rep.vuv_error == 0.0
    assert out == rep.to_text()


def test_eval_mismatched_sets_fail(tmp_path, capsys):
    for d, names in (("ref", ("a", "b")), ("gen", ("a", "c"))):
        (tmp_path / d).mkdir()
        for n in names:
            write_wav(tmp_path / d / f"{n}.wav", harmonic_clip(1.0, 150, 0), SR)
    code, _, err = run(capsys, "eval", tmp_path / "ref", tmp_path / "gen")
    assert code == cli.EXIT_FAIL and "b.wav" in err and "c.wav" in err


def test_selftest_passes(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0
    assert all(line.startswith("PASS") for line in out.strip().splitlines())

