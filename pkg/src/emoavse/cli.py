"""Speech enhancement pipeline driver: mix, train, enhance, score, report.

Subcommands cover the whole pipeline: mix (corpus to manifest), train,
enhance (one WAV plus optional video), evaluate (manifest to score tables),
report (tables to figures), selftest (dataset-free invariant checks).
Exit codes: 0 success, 1 runtime failure, 2 usage error. Commands refuse to
overwrite an existing --out target unless --force is given.
"""

from __future__ import annotations

import argparse
import re
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .errors import EmoAvseError


class _Parser(argparse.ArgumentParser):
    # accept comma-joined negative numbers ("-9,-6,-3,0,3,6") as values;
    # assigned per instance because the stdlib sets the matcher in __init__
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._negative_number_matcher = re.compile(r"^-\d[\d,.eE+-]*$")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty number list")
    return values


def _fractions(text: str) -> tuple[float, float, float]:
    values = _float_list(text)
    if len(values) != 3:
        raise argparse.ArgumentTypeError("fractions need exactly three values")
    return values


def _snr_range(text: str) -> tuple[float, float]:
    values = _float_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError("SNR range needs exactly two values")
    return values


def _guard_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise EmoAvseError(f"{path} exists; pass --force to overwrite")


def _set_workers(args) -> None:
    workers = getattr(args, "workers", None)
    if workers is not None:
        if workers < 1:
            raise EmoAvseError("--workers must be at least 1")
        import torch

        torch.set_num_threads(workers)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emoavse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("mix", help="plan noisy/clean mixtures over a corpus")
    p.add_argument("--clean", required=True, help="directory of clean speech WAVs")
    p.add_argument(
        "--noise", required=True, help="noise WAV directory, or several joined by commas"
    )
    p.add_argument("--out", required=True, help="manifest JSONL to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--fractions",
        type=_fractions,
        default=(0.75, 0.15, 0.10),
        help="train,val,test source fractions (default 0.75,0.15,0.10)",
    )
    p.add_argument(
        "--train-snr-range",
        type=_snr_range,
        default=(-9.0, 6.0),
        help="lo,hi dB range sampled uniformly for train/val (default -9,6)",
    )
    p.add_argument(
        "--test-snrs",
        type=_float_list,
        default=(-9.0, -6.0, -3.0, 0.0, 3.0, 6.0),
        help="comma list of test SNR levels in dB (default -9,-6,-3,0,3,6)",
    )
    p.add_argument("--segment-seconds", type=float, default=4.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="optimize a model from a TOML run description")
    p.add_argument("--config", required=True, help="train.toml path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--workers", type=int, default=None, help="bound on compute threads")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one WAV with an optional video")
    p.add_argument("--in", dest="infile", required=True, help="noisy 16 kHz WAV")
    p.add_argument("--video", default=None, help="talker video aligned with the audio")
    p.add_argument("--crops", default=None, help="directory of pre-cut face crop PNGs")
    p.add_argument("--emotion-cache", default=None, help="cached embedding file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="enhanced WAV to write")
    p.add_argument(
        "--no-video",
        action="store_true",
        help="assert the checkpoint is audio-only and skip visual sources",
    )
    p.add_argument(
        "--no-emotion",
        action="store_true",
        help="assert the checkpoint has no emotion branch",
    )
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest's test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="directory for score tables")
    p.add_argument("--pesq-bin", default=None, help="external PESQ executable")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render figures from an evaluate directory")
    p.add_argument("--eval", dest="eval_dir", required=True, help="evaluate output dir")
    p.add_argument("--out", default=None, help="figure directory (default: --eval)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="dataset-free invariant checks")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_selftest)
    return parser


def cmd_mix(args) -> int:
    from .mixing import SnrConfig, build_manifest, write_manifest

    out = Path(args.out)
    _guard_out(out, args.force)
    noise_dirs = [d for d in args.noise.split(",") if d]
    snr = SnrConfig(train_range=args.train_snr_range, test_levels=args.test_snrs)
    manifest = build_manifest(
        args.clean,
        noise_dirs,
        fractions=args.fractions,
        snr=snr,
        seed=args.seed,
        segment_seconds=args.segment_seconds,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out)
    counts = {s: len(manifest.split_records(s)) for s in ("train", "val", "test")}
    print(f"wrote {out}: {len(manifest.records)} records {counts}")
    return 0


def cmd_train(args) -> int:
    from .trainer import BEST_NAME, LAST_NAME, TELEMETRY_NAME, load_train_config, train

    _set_workers(args)
    cfg = load_train_config(args.config)
    out_dir = Path(cfg.out_dir)
    existing = [
        out_dir / name
        for name in (LAST_NAME, BEST_NAME, TELEMETRY_NAME)
        if (out_dir / name).exists()
    ]
    if args.resume is None and existing:
        if not args.force:
            raise EmoAvseError(
                f"{out_dir} already holds a run ({existing[0].name}); pass --force "
                "to restart or --resume to continue"
            )
        for path in existing:
            path.unlink()
    last = train(cfg, resume=args.resume)
    print(f"wrote {last}")
    return 0


def cmd_enhance(args) -> int:
    from .dsp import load_wav, save_wav
    from .model import load_model
    from .pipeline import enhance_waveform

    _set_workers(args)
    out = Path(args.out)
    _guard_out(out, args.force)
    model, _ = load_model(args.ckpt)
    cfg = model.config
    if args.no_video and cfg.use_visual:
        raise EmoAvseError(
            "checkpoint was trained with the visual branch; --no-video needs an "
            "audio-only checkpoint"
        )
    if args.no_emotion and cfg.use_emotion:
        raise EmoAvseError(
            "checkpoint was trained with the emotion branch; --no-emotion needs a "
            "checkpoint without it"
        )
    noisy = load_wav(args.infile, target_rate=cfg.stft.sample_rate)
    enhanced = enhance_waveform(
        noisy,
        model,
        video_path=args.video,
        crops_dir=args.crops,
        embedding_cache=args.emotion_cache,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wav(out, enhanced)
    print(f"wrote {out} ({enhanced.duration:.2f}s)")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .mixing import read_manifest
    from .report import SUMMARY_NAME, UTTERANCES_NAME, write_eval_outputs

    _set_workers(args)
    out_dir = Path(args.out)
    for name in (UTTERANCES_NAME, SUMMARY_NAME):
        _guard_out(out_dir / name, args.force)
    manifest = read_manifest(args.manifest)
    report = evaluate(manifest, args.ckpt, pesq_bin=args.pesq_bin)
    paths = write_eval_outputs(report, out_dir)
    print(f"wrote {paths['utterances']} and {paths['summary']}")
    for snr in sorted(report.per_snr):
        stats = report.per_snr[snr]
        pesq = "-" if stats["pesq"] is None else f"{stats['pesq']:.3f}"
        print(
            f"  {snr:+5.1f} dB  n={stats['count']:<3d} stoi={stats['stoi']:.3f} "
            f"sdi={stats['sdi']:.3f} pesq={pesq}"
        )
    overall = report.overall
    pesq = "-" if overall["pesq"] is None else f"{overall['pesq']:.3f}"
    print(
        f"  overall  n={overall['count']:<3d} stoi={overall['stoi']:.3f} "
        f"sdi={overall['sdi']:.3f} pesq={pesq}"
    )
    if report.failures:
        print(f"  {len(report.failures)} record(s) failed; see {paths['summary']}")
    return 0


def cmd_report(args) -> int:
    from .report import PER_SNR_NAME, write_report

    eval_dir = Path(args.eval_dir)
    out_dir = eval_dir if args.out is None else Path(args.out)
    _guard_out(out_dir / PER_SNR_NAME, args.force)
    written = write_report(eval_dir, out_dir)
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def _check_stft_roundtrip() -> None:
    from .dsp import StftParams, Waveform, istft, stft

    x = _selftest_signal(4.0, seed=0)
    params = StftParams()
    wav = Waveform(x, params.sample_rate)
    back = istft(stft(wav, params), target_length=x.size)
    err = np.max(np.abs(back.samples - x)) / np.max(np.abs(x))
    assert err <= 1e-6, f"round-trip error {err:.2e}"


def _check_mix_snr() -> None:
    from .dsp import Waveform
    from .mixing import mix_at_snr

    sr = 16000
    clean = Waveform(_selftest_signal(2.0, seed=1), sr)
    noise = Waveform(0.3 * np.random.default_rng(2).standard_normal(2 * sr), sr)
    for snr in (-6.0, 0.0, 5.0):
        noisy, scale = mix_at_snr(clean, noise, snr)
        added = noisy.samples - clean.samples
        measured = 10.0 * np.log10(
            np.sum(clean.samples**2) / np.sum(added**2)
        )
        assert abs(measured - snr) <= 1e-6, f"measured {measured} target {snr}"


def _check_loss_identities() -> None:
    import torch

    from .losses import mae_loss, modulation_loss, stoi_loss

    x = torch.from_numpy(_selftest_signal(1.0, seed=3))
    assert mae_loss(x, x).item() == 0.0
    assert abs(stoi_loss(x, x).item() + 1.0) <= 1e-6
    assert modulation_loss(x, x).item() <= 1e-9


def _check_metric_identities() -> None:
    from .metrics import sdi_metric, stoi_metric

    x = _selftest_signal(1.0, seed=4)
    assert abs(stoi_metric(x, x, fs=16000) - 1.0) <= 1e-6
    assert abs(sdi_metric(x, 2.0 * x, fs=16000) - 1.0) <= 1e-12
    assert sdi_metric(x, x, fs=16000) == 0.0


def _check_mask_passthrough() -> None:
    from .dsp import Waveform
    from .model import EnhancerNet
    from .pipeline import enhance_waveform

    model = EnhancerNet(_selftest_model_config(mask_activation="one"))
    x = _selftest_signal(4.0, seed=5)
    noisy = Waveform(x, 16000)
    out = enhance_waveform(noisy, model)
    err = np.max(np.abs(out.samples - x)) / np.max(np.abs(x))
    assert err <= 1e-6, f"pass-through error {err:.2e}"


def _check_enhance_determinism() -> None:
    from .dsp import Waveform
    from .model import EnhancerNet
    from .pipeline import enhance_waveform

    model = EnhancerNet(_selftest_model_config())
    noisy = Waveform(_selftest_signal(4.0, seed=6), 16000)
    a = enhance_waveform(noisy, model)
    b = enhance_waveform(noisy, model)
    assert np.array_equal(a.samples, b.samples), "two runs differ"


def _check_emotion_stub() -> None:
    from .emotion import EMBED_DIM, get_emotion_backend

    backend = get_emotion_backend("stub")
    crops = np.random.default_rng(7).integers(0, 256, size=(5, 224, 224, 3), dtype=np.uint8)
    emb = backend.embed(crops)
    assert emb.shape == (EMBED_DIM, 5), f"embed shape {emb.shape}"
    assert emb.dtype == np.float32
    assert np.array_equal(emb, backend.embed(crops)), "embedding not deterministic"


def _check_checkpoint_roundtrip() -> None:
    import torch

    from .model import EnhancerNet, load_model, save_checkpoint

    model = EnhancerNet(_selftest_model_config())
    with tempfile.TemporaryDirectory(prefix="emoavse-selftest-") as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(path, model)
        loaded, _ = load_model(path)
        for (name, a), (_, b) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert torch.equal(a, b), f"parameter {name} changed across save/load"


def _check_shape_ledger() -> None:
    import torch

    from .emotion import get_emotion_backend
    from .model import EnhancerNet
    from .visual import prepare_crop_tensor

    model = EnhancerNet(_selftest_model_config(use_visual=True, use_emotion=True))
    rng = np.random.default_rng(8)
    crops_np = rng.integers(0, 256, size=(10, 224, 224, 3), dtype=np.uint8)
    crops = prepare_crop_tensor(crops_np, model.config.visual_feed_size).unsqueeze(0)
    emotion = torch.from_numpy(get_emotion_backend("stub").embed(crops_np)).unsqueeze(0)
    mag = torch.randn(1, 1, 256, 400).abs()
    with torch.no_grad():
        mask, inter = model(torch.log1p(mag), crops, emotion, return_intermediates=True)
    assert inter["audio"].shape == (1, 512, 8, 100), inter["audio"].shape
    assert inter["fused"].shape == (1, 1536, 8, 100), inter["fused"].shape
    assert inter["bottleneck"].shape == (1, 512, 8, 100), inter["bottleneck"].shape
    assert mask.shape == (1, 1, 256, 400), mask.shape
    assert float(mask.min()) >= 0.0 and float(mask.max()) <= 1.0


def _selftest_signal(seconds: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * 16000)) / 16000.0
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * 3.0 * t)
    carrier = sum(
        a * np.sin(2 * np.pi * f * t)
        for a, f in ((1.0, 220.0), (0.5, 440.0), (0.3, 880.0))
    )
    return 0.2 * envelope * carrier + 0.01 * rng.standard_normal(t.size)


def _selftest_model_config(**overrides):
    from .model import ModelConfig

    defaults = dict(
        channel_plan=(8, 12, 16, 24, 512),
        visual_trunk_channels=(8, 12, 16, 24),
        visual_feed_size=32,
        use_visual=False,
        use_emotion=False,
        seed=0,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


SELFTEST_CHECKS = (
    ("stft round trip", _check_stft_roundtrip),
    ("mixture SNR accuracy", _check_mix_snr),
    ("loss identities", _check_loss_identities),
    ("metric identities", _check_metric_identities),
    ("mask pass-through", _check_mask_passthrough),
    ("enhancement determinism", _check_enhance_determinism),
    ("emotion backend contract", _check_emotion_stub),
    ("checkpoint round trip", _check_checkpoint_roundtrip),
    ("network shape ledger", _check_shape_ledger),
)


def cmd_selftest(args) -> int:
    _set_workers(args)
    failures = 0
    for name, check in SELFTEST_CHECKS:
        start = time.monotonic()
        try:
            check()
        except Exception as exc:
            failures += 1
            print(f"FAIL - {name}: {exc}")
            continue
        print(f"ok - {name} ({time.monotonic() - start:.2f}s)")
    total = len(SELFTEST_CHECKS)
    print(f"selftest: {total - failures}/{total} checks passed")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EmoAvseError as exc:
        print(f"emoavse: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"emoavse: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
