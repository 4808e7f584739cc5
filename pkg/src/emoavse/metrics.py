"""Objective evaluation measures and test-set scoring.

Intelligibility (STOI) and a speech distortion index are implemented
natively; perceptual quality (PESQ) goes through an adapter around an
external tool or package and is simply absent when neither is installed.
"""

from __future__ import annotations

import math
import os
import re
import subprocess
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from .dsp import Waveform, load_wav, save_wav
from .errors import EmoAvseError
from .losses import (
    STOI_BANDS,
    STOI_BETA_DB,
    STOI_FFT,
    STOI_FRAME,
    STOI_FS,
    STOI_HOP,
    STOI_SEGMENT_FRAMES,
    third_octave_band_matrix,
)

VAD_DYN_RANGE_DB = 40.0
VAD_FRAME = 256
VAD_HOP = 128
PESQ_ENV_VAR = "EMOAVSE_PESQ_BIN"
PESQ_RANGE = (-0.5, 4.5)

_EPS = float(np.finfo(np.float64).eps)


def _to_samples(x, fs: int | None, name: str) -> tuple[np.ndarray, int]:
    if isinstance(x, Waveform):
        return x.samples, x.sample_rate
    samples = np.asarray(x, dtype=np.float64)
    if samples.ndim != 1:
        raise EmoAvseError(f"{name} must be one-dimensional, got shape {samples.shape}")
    if fs is None:
        raise EmoAvseError(f"{name} given as a bare array; pass fs explicitly")
    return samples, fs


def _frame_signal(x: np.ndarray, frame: int, hop: int, window: np.ndarray) -> np.ndarray:
    if x.size < frame:
        raise EmoAvseError(f"signal too short to frame: {x.size} < {frame}")
    starts = np.arange(0, x.size - frame + 1, hop)
    return x[starts[:, None] + np.arange(frame)] * window


def _remove_silent_frames(
    ref: np.ndarray, deg: np.ndarray, dyn_range_db: float = VAD_DYN_RANGE_DB
) -> tuple[np.ndarray, np.ndarray]:
    """Drop low-energy frames, selected on the reference and removed from
    both signals, then rebuild by overlap-add of the windowed frames."""
    window = scipy.signal.get_window("hann", VAD_FRAME, fftbins=True)
    ref_frames = _frame_signal(ref, VAD_FRAME, VAD_HOP, window)
    deg_frames = _frame_signal(deg, VAD_FRAME, VAD_HOP, window)
    energies_db = 20.0 * np.log10(np.linalg.norm(ref_frames, axis=1) + _EPS)
    mask = energies_db > energies_db.max() - dyn_range_db
    if not mask.any():
        raise EmoAvseError("all frames fall below the dynamic-range threshold")
    ref_keep = ref_frames[mask]
    deg_keep = deg_frames[mask]
    out_len = (ref_keep.shape[0] - 1) * VAD_HOP + VAD_FRAME
    ref_out = np.zeros(out_len)
    deg_out = np.zeros(out_len)
    for j in range(ref_keep.shape[0]):
        ref_out[j * VAD_HOP : j * VAD_HOP + VAD_FRAME] += ref_keep[j]
        deg_out[j * VAD_HOP : j * VAD_HOP + VAD_FRAME] += deg_keep[j]
    return ref_out, deg_out


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    window = scipy.signal.get_window("hann", STOI_FRAME, fftbins=True)
    frames = _frame_signal(x, STOI_FRAME, STOI_HOP, window)
    power = np.abs(np.fft.rfft(frames, n=STOI_FFT)) ** 2  # (T, F)
    obm = third_octave_band_matrix()
    return np.sqrt(obm @ power.T)  # (bands, T)


def stoi_metric(ref, deg, fs: int | None = None) -> float:
    """Short-time objective intelligibility of deg against the reference.

    Both signals are resampled to 10 kHz, silent reference frames (more
    than 40 dB below the loudest frame) are removed from both, and the
    mean normalized band-envelope correlation is computed over 15
    one-third-octave bands and 30-frame segments with per-segment energy
    normalization and -15 dB clipping.
    """
    ref_s, ref_fs = _to_samples(ref, fs, "ref")
    deg_s, deg_fs = _to_samples(deg, fs, "deg")
    if ref_fs != deg_fs:
        raise EmoAvseError(f"sample rate mismatch: ref {ref_fs} vs deg {deg_fs}")
    if ref_s.size != deg_s.size:
        raise EmoAvseError(f"length mismatch: ref {ref_s.size} vs deg {deg_s.size}")
    if ref_fs != STOI_FS:
        g = math.gcd(STOI_FS, ref_fs)
        ref_s = scipy.signal.resample_poly(ref_s, STOI_FS // g, ref_fs // g)
        deg_s = scipy.signal.resample_poly(deg_s, STOI_FS // g, ref_fs // g)
    ref_s, deg_s = _remove_silent_frames(ref_s, deg_s)

    x = _band_envelopes(ref_s)
    y = _band_envelopes(deg_s)
    n_frames = x.shape[1]
    if n_frames < STOI_SEGMENT_FRAMES:
        raise EmoAvseError(
            f"too short after silent-frame removal: {n_frames} analysis frames, "
            f"need {STOI_SEGMENT_FRAMES}"
        )
    clip_bound = 1.0 + 10.0 ** (-STOI_BETA_DB / 20.0)
    total = 0.0
    count = 0
    for m in range(STOI_SEGMENT_FRAMES, n_frames + 1):
        x_seg = x[:, m - STOI_SEGMENT_FRAMES : m]
        y_seg = y[:, m - STOI_SEGMENT_FRAMES : m]
        alpha = np.linalg.norm(x_seg, axis=1, keepdims=True) / (
            np.linalg.norm(y_seg, axis=1, keepdims=True) + _EPS
        )
        y_prime = np.minimum(y_seg * alpha, x_seg * clip_bound)
        xc = x_seg - x_seg.mean(axis=1, keepdims=True)
        yc = y_prime - y_prime.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1)
        total += float(((xc * yc).sum(axis=1) / (norms + _EPS)).sum())
        count += STOI_BANDS
    return total / count


def sdi_metric(ref, deg, fs: int | None = None) -> float:
    """Speech distortion index: residual energy over reference energy.
    Zero for a perfect match; lower is better."""
    ref_s, _ = _to_samples(ref, fs if fs is not None else 0, "ref")
    deg_s, _ = _to_samples(deg, fs if fs is not None else 0, "deg")
    if ref_s.size != deg_s.size:
        raise EmoAvseError(f"length mismatch: ref {ref_s.size} vs deg {deg_s.size}")
    ref_energy = float(np.sum(ref_s**2))
    if ref_energy == 0.0:
        raise EmoAvseError("silent reference; distortion index undefined")
    return float(np.sum((deg_s - ref_s) ** 2)) / ref_energy


def _parse_pesq_output(raw: str) -> float:
    """Pull the MOS-LQO value out of the tool's prediction line. Narrowband
    builds print a raw-MOS / MOS-LQO pair; the mapped value is the last."""
    match = re.search(r"Prediction[^=\n]*=\s*(-?\d+\.?\d*)(?:\s+(-?\d+\.?\d*))?", raw)
    if match is None:
        raise EmoAvseError(f"unparseable PESQ output:\n{raw}")
    score = float(match.group(2) or match.group(1))
    if not PESQ_RANGE[0] <= score <= PESQ_RANGE[1]:
        raise EmoAvseError(f"PESQ score {score} outside {PESQ_RANGE}; raw output:\n{raw}")
    return score


def _pesq_via_binary(binary: str, ref_path, deg_path, mode: str, sample_rate: int) -> float:
    cmd = [binary, f"+{sample_rate}"]
    if mode == "wb":
        cmd.append("+wb")
    cmd += [str(ref_path), str(deg_path)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    return _parse_pesq_output(proc.stdout + proc.stderr)


def resolve_pesq_backend(pesq_bin: str | None = None):
    """Return a callable (ref_path, deg_path) -> score, or None when no
    external tool or package is available. Resolution order: explicit
    binary path, the EMOAVSE_PESQ_BIN environment variable, the python
    pesq package."""
    binary = pesq_bin or os.environ.get(PESQ_ENV_VAR)
    if binary:
        return lambda ref_path, deg_path, mode="wb": _pesq_via_binary(
            binary, ref_path, deg_path, mode, 16000
        )
    try:
        from pesq import pesq as pesq_fn
    except ImportError:
        return None

    def _via_package(ref_path, deg_path, mode="wb"):
        ref = load_wav(ref_path)
        deg = load_wav(deg_path)
        return float(pesq_fn(ref.sample_rate, ref.samples, deg.samples, mode))

    return _via_package


def pesq_adapter(ref_path, deg_path, mode: str = "wb", pesq_bin: str | None = None):
    """Score a WAV pair with an external perceptual-quality backend.
    Returns None (with a warning) when no backend is available; the caller
    is expected to carry on without the score."""
    backend = resolve_pesq_backend(pesq_bin)
    if backend is None:
        warnings.warn("no PESQ backend available; score absent", RuntimeWarning, stacklevel=2)
        return None
    return backend(ref_path, deg_path, mode)


@dataclass
class UtteranceScore:
    """Per-mixture objective scores; pesq is None when no backend exists."""

    clip_id: str
    snr_db: float
    stoi: float
    sdi: float
    pesq: float | None = None


@dataclass
class EvalReport:
    utterances: list[UtteranceScore]
    per_snr: dict[float, dict[str, float | None]]
    overall: dict[str, float | None]
    config: dict
    failures: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def _mean_or_none(values: list[float | None]):
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(np.mean(present))


def aggregate_scores(
    utterances: list[UtteranceScore],
) -> tuple[dict[float, dict[str, float | None]], dict[str, float | None]]:
    """Per-SNR and overall mean scores. The overall means are computed
    directly over utterances, so count-weighted per-SNR means recompose
    them exactly."""
    if not utterances:
        raise EmoAvseError("no utterances to aggregate")
    per_snr: dict[float, dict[str, float | None]] = {}
    for snr in sorted({u.snr_db for u in utterances}):
        group = [u for u in utterances if u.snr_db == snr]
        per_snr[snr] = {
            "count": len(group),
            "stoi": float(np.mean([u.stoi for u in group])),
            "sdi": float(np.mean([u.sdi for u in group])),
            "pesq": _mean_or_none([u.pesq for u in group]),
        }
    overall = {
        "count": len(utterances),
        "stoi": float(np.mean([u.stoi for u in utterances])),
        "sdi": float(np.mean([u.sdi for u in utterances])),
        "pesq": _mean_or_none([u.pesq for u in utterances]),
    }
    return per_snr, overall


def evaluate(
    manifest,
    model,
    *,
    pesq_bin: str | None = None,
    pesq_mode: str = "wb",
    segment_seconds: float | None = None,
) -> EvalReport:
    """Enhance and score every test-split record of a manifest.

    Scores each enhanced output against its clean reference with STOI and
    the distortion index, plus PESQ when a backend is available. Failures
    of individual records are collected, not fatal.
    """
    from . import mixing
    from .model import EnhancerNet, load_model
    from .pipeline import enhance_record

    if not isinstance(model, EnhancerNet):
        model, _ = load_model(model)
    records = manifest.split_records("test")
    if not records:
        raise EmoAvseError("manifest has no test split")

    pesq_backend = resolve_pesq_backend(pesq_bin)
    notes: list[str] = []
    if pesq_backend is None:
        notes.append("pesq: unavailable")
        warnings.warn("no PESQ backend available; pesq column will be empty", RuntimeWarning)

    seg_kwargs = {} if segment_seconds is None else {"segment_seconds": segment_seconds}
    utterances: list[UtteranceScore] = []
    failures: list[dict] = []
    for record in records:
        clip_id = f"{record.clean_id}+{record.noise_id}@{record.target_snr_db:+g}dB"
        try:
            noisy, clean = mixing.materialize(record, **seg_kwargs)
            enhanced = enhance_record(record, noisy, model)
            stoi = stoi_metric(clean, enhanced)
            sdi = sdi_metric(clean, enhanced)
            pesq_score = None
            if pesq_backend is not None:
                with tempfile.TemporaryDirectory(prefix="emoavse-pesq-") as tmp:
                    ref_path = Path(tmp) / "ref.wav"
                    deg_path = Path(tmp) / "deg.wav"
                    save_wav(ref_path, clean)
                    save_wav(deg_path, enhanced)
                    pesq_score = pesq_backend(ref_path, deg_path, pesq_mode)
        except EmoAvseError as exc:
            failures.append({"clip_id": clip_id, "error": str(exc)})
            continue
        utterances.append(
            UtteranceScore(
                clip_id=clip_id,
                snr_db=record.target_snr_db,
                stoi=stoi,
                sdi=sdi,
                pesq=pesq_score,
            )
        )
    if not utterances:
        raise EmoAvseError(f"every test record failed; first error: {failures[0]['error']}")
    per_snr, overall = aggregate_scores(utterances)
    return EvalReport(
        utterances=utterances,
        per_snr=per_snr,
        overall=overall,
        config=model.config.to_dict(),
        failures=failures,
        notes=notes,
    )
