"""Command line contract: exit codes, overwrite protection, end-to-end runs."""

import csv
import warnings

import numpy as np
import pytest
from helpers import SR, lean_config, speech_like

from emoavse.cli import build_parser, main
from emoavse.dsp import Waveform, load_wav, save_wav
from emoavse.mixing import Manifest, MixtureRecord, write_manifest
from emoavse.model import EnhancerNet, save_checkpoint


def _write_corpus(root, n_clean=4, n_noise=4):
    clean_dir = root / "clean"
    noise_dir = root / "noise"
    clean_dir.mkdir()
    noise_dir.mkdir()
    for i in range(n_clean):
        save_wav(clean_dir / f"utt_{i:02d}.wav", Waveform(speech_like(4.0, seed=i), SR))
    for i in range(n_noise):
        rng = np.random.default_rng(100 + i)
        save_wav(
            noise_dir / f"noise_{i:02d}.wav",
            Waveform(0.1 * rng.standard_normal(5 * SR), SR),
        )
    return clean_dir, noise_dir


def _record(clean_path, noise_path, split, snr=0.0):
    return MixtureRecord(
        clean_id=f"{clean_path.stem}.s000",
        clean_path=str(clean_path),
        noise_id=noise_path.stem,
        noise_path=str(noise_path),
        noise_offset=0,
        target_snr_db=snr,
        split=split,
        seed=0,
    )


def test_no_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_negative_snr_grid_parses_after_space():
    args = build_parser().parse_args(
        ["mix", "--clean", "c", "--noise", "n", "--out", "o",
         "--test-snrs", "-9,-6,-3,0,3,6"]
    )
    assert args.test_snrs == (-9.0, -6.0, -3.0, 0.0, 3.0, 6.0)


def test_bad_snr_grid_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["mix", "--clean", "c", "--noise", "n", "--out", "o",
              "--test-snrs", "loud"])
    assert exc.value.code == 2


def test_mix_writes_manifest_and_respects_force(tmp_path, capsys):
    clean_dir, noise_dir = _write_corpus(tmp_path)
    out = tmp_path / "mix.jsonl"
    argv = [
        "mix", "--clean", str(clean_dir), "--noise", str(noise_dir),
        "--out", str(out), "--seed", "3", "--fractions", "0.5,0.25,0.25",
        "--test-snrs", "-3,3",
    ]
    assert main(argv) == 0
    assert out.exists()
    first = out.read_bytes()

    assert main(argv) == 1
    assert "pass --force" in capsys.readouterr().err

    assert main(argv + ["--force"]) == 0
    assert out.read_bytes() == first  # same corpus and seed, same bytes


def test_pipeline_commands_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    cleans, noises = [], []
    for i in range(3):
        c = data / f"utt_{i}.wav"
        n = data / f"noise_{i}.wav"
        save_wav(c, Waveform(speech_like(4.0, seed=i), SR))
        rng = np.random.default_rng(50 + i)
        save_wav(n, Waveform(0.1 * rng.standard_normal(5 * SR), SR))
        cleans.append(c)
        noises.append(n)
    records = [
        _record(cleans[0], noises[0], "train"),
        _record(cleans[1], noises[1], "test", snr=0.0),
        _record(cleans[2], noises[2], "test", snr=3.0),
    ]
    manifest_path = tmp_path / "mix.jsonl"
    write_manifest(Manifest(records), manifest_path)

    run_dir = tmp_path / "run"
    toml = tmp_path / "train.toml"
    toml.write_text(
        "\n".join(
            [
                "version = 1",
                f'manifest = "{manifest_path}"',
                f'out_dir = "{run_dir}"',
                "batch_size = 1",
                "max_steps = 2",
                "eval_every = 2",
                "",
                "[model]",
                "use_visual = false",
                "use_emotion = false",
                "channel_plan = [8, 12, 16, 24, 512]",
                "visual_trunk_channels = [8, 12, 16, 24]",
                "visual_feed_size = 32",
                "",
            ]
        )
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert main(["train", "--config", str(toml)]) == 0
    ckpt = run_dir / "last.ckpt"
    assert ckpt.exists()

    assert main(["train", "--config", str(toml)]) == 1
    assert "already holds a run" in capsys.readouterr().err
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert main(["train", "--config", str(toml), "--force"]) == 0

    noisy_path = tmp_path / "noisy.wav"
    save_wav(noisy_path, Waveform(speech_like(4.0, seed=9), SR))
    out_wav = tmp_path / "enhanced.wav"
    argv = [
        "enhance", "--in", str(noisy_path), "--ckpt", str(ckpt),
        "--out", str(out_wav), "--no-video", "--no-emotion",
    ]
    assert main(argv) == 0
    first = load_wav(out_wav)
    assert len(first) == len(load_wav(noisy_path))

    assert main(argv) == 1
    assert "pass --force" in capsys.readouterr().err
    assert main(argv + ["--force"]) == 0
    assert np.array_equal(load_wav(out_wav).samples, first.samples)

    eval_dir = tmp_path / "eval"
    argv = [
        "evaluate", "--manifest", str(manifest_path), "--ckpt", str(ckpt),
        "--out", str(eval_dir),
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert main(argv) == 0
    out_text = capsys.readouterr().out
    assert "overall" in out_text
    with open(eval_dir / "utterances.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["clip_id", "snr_db", "pesq", "stoi", "sdi"]
    assert len(rows) == 3
    assert (eval_dir / "summary.json").exists()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert main(argv) == 1

    assert main(["report", "--eval", str(eval_dir)]) == 0
    assert (eval_dir / "per_snr.csv").exists()
    assert (eval_dir / "stoi_by_snr.png").exists()
    assert (eval_dir / "sdi_by_snr.png").exists()
    assert main(["report", "--eval", str(eval_dir)]) == 1
    assert main(["report", "--eval", str(eval_dir), "--force"]) == 0


def test_enhance_rejects_contradictory_flags(tmp_path, capsys):
    ckpt = tmp_path / "visual.ckpt"
    save_checkpoint(ckpt, EnhancerNet(lean_config()))
    noisy = tmp_path / "noisy.wav"
    save_wav(noisy, Waveform(speech_like(1.0, seed=0), SR))
    code = main(
        ["enhance", "--in", str(noisy), "--ckpt", str(ckpt),
         "--out", str(tmp_path / "o.wav"), "--no-video"]
    )
    assert code == 1
    assert "audio-only" in capsys.readouterr().err


def test_enhance_missing_input_fails_cleanly(tmp_path, capsys):
    ckpt = tmp_path / "a.ckpt"
    save_checkpoint(ckpt, EnhancerNet(lean_config(use_visual=False, use_emotion=False)))
    code = main(
        ["enhance", "--in", str(tmp_path / "missing.wav"), "--ckpt", str(ckpt),
         "--out", str(tmp_path / "o.wav")]
    )
    assert code == 1
    assert "emoavse: error" in capsys.readouterr().err


def test_workers_must_be_positive(capsys):
    assert main(["selftest", "--workers", "0"]) == 1
    assert "workers" in capsys.readouterr().err


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "ok - stft round trip" in out
    assert "checks passed" in out
    assert "FAIL" not in out
