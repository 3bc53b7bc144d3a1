"""Command-line entry point.

Exit codes: 0 success, 1 general failure, 2 nothing to process (empty input
directory; argparse also uses 2 for usage errors), 3 unreadable or
corrupt WAV input.  Tables and reports go to
stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import filterbank as fb
from . import quantize as q
from .audio import WavError, read_wav, write_wav
from .checkpoint import CheckpointError
from .features import SAMPLE_RATE, FeatureError, mel_spectrogram, read_features, write_features, MelSpectrogram
from .metrics import MetricError, evaluate
from .model import FarBarNet, GenerationConfig, ModelConfig, generate, tiny_config
from .postfilter import PostFilter
from .trainer import ConfigError, TrainConfig, load_checkpoint, load_config, run_pf_training, run_training

log = logging.getLogger("farbar")

EXIT_FAIL, EXIT_EMPTY, EXIT_BAD_WAV = 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _wavs(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"{d}: not a directory")
    files = sorted(d.glob("*.wav"))
    if not files:
        raise CliError(f"{d}: no WAV files", EXIT_EMPTY)
    return files


def cmd_features(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bad = []
    for path in _wavs(args.in_dir):
        try:
            wav, sr = read_wav(path)
        except WavError as e:
            print(f"error: {e}", file=sys.stderr)
            bad.append(path.name)
            continue
        mel = mel_spectrogram(wav, sr)
        write_features(out / (path.stem + ".pvfe"), mel)
        print(f"{path.name}\t{mel.frames}")
    if bad:
        raise CliError(f"unreadable WAV files: {', '.join(bad)}", EXIT_BAD_WAV)
    return 0


def _train_config(args) -> TrainConfig:
    overrides = dict(corpus=args.corpus, out_dir=args.out, steps=args.steps, seed=args.seed)
    if args.config:
        return load_config(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = run_training(cfg, resume=args.resume)
    print(f"step\t{result.step}\nloss\t{result.history[-1][1] if result.history else float('nan')}")
    print(f"checkpoint\t{result.checkpoint}")
    return 0


def cmd_train_pf(args) -> int:
    cfg = _train_config(args)
    _, history, path = run_pf_training(cfg, args.phase1)
    for name, value in (history[-1][1].items() if history else []):
        print(f"{name}\t{value}")
    print(f"checkpoint\t{path}")
    return 0


def _generation_config(args) -> GenerationConfig:
    return GenerationConfig(far_order="low_to_high" if args.inv_far else "high_to_low", bar_depth=args.bar_depth,
                            use_postfilter=not args.no_pf, group=args.g, seed=args.seed, argmax=args.argmax)


def cmd_synth(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    mel = read_features(args.features)
    gcfg = _generation_config(args)
    if gcfg.use_postfilter and loaded.pf is None:
        log.warning("checkpoint has no post-filter; sampling classes instead")
        gcfg.use_postfilter = False
    loaded.net.reset_counters()
    wav = generate(loaded.net, mel, gcfg, postfilter=loaded.pf)
    log.info("FAR iterations: %d (prediction stages: %d)", loaded.net.forward_passes, loaded.net.prediction_stages)
    write_wav(args.out, wav, mel.sample_rate)
    print(f"{args.out}\t{wav.size}")
    return 0


def cmd_copy_synth(args) -> int:
    x, sr = read_wav(args.in_wav)
    bank = fb.default_bank()
    y = fb.synthesize(bank, fb.analyze(bank, x))
    write_wav(args.out_wav, y, sr)
    snr = fb.snr_db(x, y)
    print(f"SNR\t{'inf' if np.isinf(snr) else f'{snr:.2f}'} dB")
    return 0


def cmd_eval(args) -> int:
    refs = {p.name: p for p in _wavs(args.ref_dir)}
    gens = {p.name: p for p in _wavs(args.gen_dir)}
    missing = sorted(set(refs) ^ set(gens))
    if missing:
        raise CliError(f"unpaired files: {', '.join(missing)}")

    def pairs():
        for name in sorted(refs):
            ref, sr = read_wav(refs[name])
            gen, _ = read_wav(gens[name], sr)
            yield Path(name).stem, ref, gen

    report = evaluate(pairs())
    sys.stdout.write(report.to_text())
    if args.report:
        report.write(args.report)
    return 0


def bench_net(args) -> tuple[FarBarNet, PostFilter | None]:
    if args.checkpoint:
        loaded = load_checkpoint(args.checkpoint)
        net, pf = loaded.net, loaded.pf
        if args.g is not None and args.g != net.cfg.group:
            log.warning("--g %d differs from the checkpoint; benchmarking a randomly initialized network", args.g)
            cfg = ModelConfig.from_dict({**net.cfg.to_dict(), "group": args.g})
            net = FarBarNet(cfg, np.random.default_rng(args.seed))
            pf = PostFilter.for_net(net, np.random.default_rng(args.seed + 1))
        return net, pf
    g = args.g or 1
    cfg = tiny_config(group=g) if args.model == "tiny" else ModelConfig(group=g)
    net = FarBarNet(cfg, np.random.default_rng(args.seed))
    return net, PostFilter.for_net(net, np.random.default_rng(args.seed + 1))


def cmd_bench(args) -> int:
    net, pf = bench_net(args)
    rng = np.random.default_rng(args.seed)
    print("duration_s\tsamples\tseconds\tsamples_per_s\tforward_passes\tstages_per_pass")
    for dur in args.durations:
        frames = int(np.ceil(dur * SAMPLE_RATE / net.cfg.hop))
        mel = MelSpectrogram(rng.standard_normal((frames, net.cfg.mel_dims)).astype(np.float32))
        gcfg = GenerationConfig(use_postfilter=pf is not None and not args.no_pf, seed=args.seed)
        net.reset_counters()
        t0 = time.perf_counter()
        wav = generate(net, mel, gcfg, postfilter=pf)
        secs = time.perf_counter() - t0
        passes = net.forward_passes
        print(f"{dur:g}\t{wav.size}\t{secs:.3f}\t{wav.size / secs:.1f}\t{passes}\t{net.prediction_stages / passes:g}")
    return 0


def cmd_selftest(args) -> int:
    from . import tensor as T

    results = []
    bank = fb.default_bank()
    x = np.random.default_rng(0).standard_normal(4000)
    results.append(("filterbank round trip >= 40 dB", fb.round_trip_snr(bank, x) >= 40))
    classes = np.arange(256)
    ok = np.array_equal(q.mulaw_encode(q.mulaw_decode(classes)), classes)
    ok &= np.array_equal(q.bit_planes(classes).b1, (classes > 127).astype(classes.dtype))
    results.append(("mu-law classes and bit planes", bool(ok)))
    a = T.Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    _, (g,) = T.gradients(lambda: T.tsum(T.mish(a)), [a])
    eps = 1e-6
    fd = [(np.sum(_mish(a.data + eps * e)) - np.sum(_mish(a.data - eps * e))) / (2 * eps) for e in np.eye(3)]
    results.append(("mish gradient vs finite differences", bool(np.allclose(g, fd, rtol=1e-5))))
    net = FarBarNet(tiny_config(), np.random.default_rng(0))
    mel = MelSpectrogram(np.zeros((4, 80), dtype=np.float32))
    generate(net, mel, GenerationConfig(use_postfilter=False))
    results.append(("8 FAR passes per utterance", net.forward_passes == 8))
    for name, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}\t{name}")
    return 0 if all(p for _, p in results) else EXIT_FAIL


def _mish(x):
    return x * np.tanh(np.logaddexp(0.0, x))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="farbar", description="Subband-parallel autoregressive vocoder")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--threads", type=int, default=0, help="cap BLAS threads (1 = strict single-threaded mode)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("features", help="compute log-mel feature files for a directory of WAVs")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_features)

    for name, func, help_ in (("train", cmd_train, "phase 1: train the autoregressive network"),
                              ("train-pf", cmd_train_pf, "phase 2: train the post-filter on a frozen network")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key = value training config file")
        s.add_argument("--corpus")
        s.add_argument("--out")
        s.add_argument("--steps", type=int)
        s.add_argument("--seed", type=int)
        if name == "train":
            s.add_argument("--resume", help="continue from a phase-1 checkpoint")
        else:
            s.add_argument("--phase1", required=True, help="phase-1 checkpoint")
        s.set_defaults(func=func)

    s = sub.add_parser("synth", help="generate a WAV from a feature file")
    s.add_argument("checkpoint")
    s.add_argument("features")
    s.add_argument("out")
    s.add_argument("--no-pf", action="store_true", help="sample classes instead of using the post-filter")
    s.add_argument("--g", type=int, help="group size (must match the checkpoint)")
    s.add_argument("--inv-far", action="store_true", help="generate bands low to high")
    s.add_argument("--bar-depth", type=int, choices=(0, 2, 3))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--argmax", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("copy-synth", help="filter-bank analysis/synthesis round trip")
    s.add_argument("in_wav")
    s.add_argument("out_wav")
    s.set_defaults(func=cmd_copy_synth)

    s = sub.add_parser("eval", help="MCD, F0 RMSE and V/UV error between two directories")
    s.add_argument("ref_dir")
    s.add_argument("gen_dir")
    s.add_argument("--report", help="write the key=value report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="generation throughput and iteration counts")
    s.add_argument("--checkpoint")
    s.add_argument("--durations", type=float, nargs="+", default=[2.0, 10.0])
    s.add_argument("--g", type=int)
    s.add_argument("--model", choices=("default", "tiny"), default="default")
    s.add_argument("--no-pf", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("selftest", help="quick built-in consistency checks")
    s.set_defaults(func=cmd_selftest)
    return p


def _configure_logging(verbose: bool) -> None:
    root = logging.getLogger("farbar")
    for h in [h for h in root.handlers if getattr(h, "_farbar_cli", False)]:
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._farbar_cli = True
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        if args.threads > 0:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except WavError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_WAV
    except (CheckpointError, ConfigError, FeatureError, MetricError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
