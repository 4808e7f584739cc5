"""Selectable training objectives: magnitude MAE, a differentiable
intelligibility surrogate, and a modulation-domain envelope loss.

All three are pure torch functions of (estimate, reference) returning a
LossValue whose scalar keeps the autograd graph. Filter banks and resampling
taps are designed once in float64 numpy and cached per dtype/device.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.signal
import torch
import torch.nn.functional as functional

from .errors import EmoAvseError

STOI_FS = 10000
STOI_FRAME = 256
STOI_FFT = 512
STOI_HOP = 128
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT_FRAMES = 30  # 384 ms at the 10 kHz analysis rate
STOI_BETA_DB = -15.0

MODULATION_BANDS = 20
MODULATION_F_LO = 100.0
MODULATION_F_HI = 8000.0
MODULATION_ENV_CUTOFF_HZ = 30.0
MODULATION_LOG_EPS = 1e-6

_GAMMATONE_LEN = 2048  # 128 ms at 16 kHz
_LOWPASS_TAPS = 513


@dataclass
class LossValue:
    """Scalar objective with optional named sub-terms for logging. The scalar
    is a 0-dim tensor that stays on the autograd graph."""

    scalar: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.scalar.detach())


def _as_batched(x: torch.Tensor, name: str) -> torch.Tensor:
    if x.dim() == 1:
        return x.unsqueeze(0)
    if x.dim() == 2:
        return x
    raise EmoAvseError(f"{name} must be (L,) or (B, L), got shape {tuple(x.shape)}")


def mae_loss(est, ref) -> LossValue:
    """Mean absolute elementwise difference; shapes must match exactly."""
    est = torch.as_tensor(est)
    ref = torch.as_tensor(ref)
    if est.shape != ref.shape:
        raise EmoAvseError(f"shape mismatch: est {tuple(est.shape)} vs ref {tuple(ref.shape)}")
    return LossValue((est - ref).abs().mean())


@lru_cache(maxsize=4)
def _resample_taps_np(up: int, down: int) -> np.ndarray:
    # kaiser-windowed lowpass at the tighter of the two Nyquist bounds
    numtaps = 2 * 10 * max(up, down) + 1
    cutoff = 1.0 / max(up, down)
    return scipy.signal.firwin(numtaps, cutoff, window=("kaiser", 5.0)) * up


def _polyphase_resample(x: torch.Tensor, up: int, down: int) -> torch.Tensor:
    """Differentiable zero-stuff / FIR / decimate chain, (B, L) in and
    (B, ceil(L*up/down)) out."""
    taps_np = _resample_taps_np(up, down)
    taps = torch.as_tensor(taps_np, dtype=x.dtype, device=x.device)
    b, length = x.shape
    stuffed = torch.zeros(b, length * up, dtype=x.dtype, device=x.device)
    stuffed[:, ::up] = x
    pad = (taps.numel() - 1) // 2
    filtered = functional.conv1d(stuffed.unsqueeze(1), taps.view(1, 1, -1), padding=pad)
    out = filtered.squeeze(1)[:, ::down]
    n_out = -(-length * up // down)
    return out[:, :n_out]


@lru_cache(maxsize=4)
def third_octave_band_matrix(
    fs: int = STOI_FS,
    nfft: int = STOI_FFT,
    num_bands: int = STOI_BANDS,
    min_freq: float = STOI_MIN_FREQ,
) -> np.ndarray:
    """Binary matrix (num_bands, nfft//2 + 1) grouping FFT bins into
    one-third-octave bands; band edges snap to the nearest bin."""
    f = np.linspace(0.0, fs / 2.0, nfft // 2 + 1)
    k = np.arange(num_bands, dtype=np.float64)
    freq_low = min_freq * 2.0 ** ((2.0 * k - 1.0) / 6.0)
    freq_high = min_freq * 2.0 ** ((2.0 * k + 1.0) / 6.0)
    matrix = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        lo = int(np.argmin(np.square(f - freq_low[i])))
        hi = int(np.argmin(np.square(f - freq_high[i])))
        matrix[i, lo:hi] = 1.0
    if not matrix.any(axis=1).all():
        raise EmoAvseError("one-third-octave bands leave an empty band; check fs/nfft")
    return matrix


def _stoi_band_envelopes(x: torch.Tensor) -> torch.Tensor:
    """(B, L10) waveform at 10 kHz to (B, bands, frames) band envelopes."""
    window_np = scipy.signal.get_window("hann", STOI_FRAME, fftbins=True)
    window = torch.as_tensor(window_np, dtype=x.dtype, device=x.device)
    frames = x.unfold(-1, STOI_FRAME, STOI_HOP) * window
    power = torch.fft.rfft(frames, n=STOI_FFT).abs().square()  # (B, T, F)
    obm = torch.as_tensor(third_octave_band_matrix(), dtype=x.dtype, device=x.device)
    band_power = torch.einsum("jf,btf->bjt", obm, power)
    return torch.sqrt(band_power.clamp_min(1e-12))


def stoi_loss(est, ref, fs: int = 16000) -> LossValue:
    """Negative differentiable intelligibility surrogate.

    Both signals are resampled to 10 kHz, analysed with a 512-point FFT
    (256 window, 128 hop), grouped into 15 one-third-octave bands from
    150 Hz, cut into 30-frame segments, energy-normalized per segment with
    clipping at the -15 dB bound, and scored by the mean normalized
    correlation d. Returns -d, in [-1, 1]. Silent-frame removal is omitted;
    hard frame selection is not differentiable.
    """
    est = _as_batched(torch.as_tensor(est), "est")
    ref = _as_batched(torch.as_tensor(ref), "ref")
    if est.shape != ref.shape:
        raise EmoAvseError(f"length mismatch: est {est.shape[-1]} vs ref {ref.shape[-1]}")
    if fs != 16000:
        raise EmoAvseError(f"stoi_loss expects 16 kHz input, got {fs}")
    est10 = _polyphase_resample(est, 5, 8)
    ref10 = _polyphase_resample(ref, 5, 8)
    min_len = STOI_FRAME + (STOI_SEGMENT_FRAMES - 1) * STOI_HOP
    if est10.shape[-1] < min_len:
        raise EmoAvseError(
            f"signals too short for one {STOI_SEGMENT_FRAMES}-frame segment "
            f"(need {min_len} samples at {STOI_FS} Hz, got {est10.shape[-1]})"
        )
    x = _stoi_band_envelopes(ref10)  # reference
    y = _stoi_band_envelopes(est10)  # estimate
    x_seg = x.unfold(2, STOI_SEGMENT_FRAMES, 1)  # (B, J, M, N)
    y_seg = y.unfold(2, STOI_SEGMENT_FRAMES, 1)
    eps = torch.finfo(x.dtype).eps
    alpha = x_seg.norm(dim=-1, keepdim=True) / (y_seg.norm(dim=-1, keepdim=True) + eps)
    clip_bound = 1.0 + 10.0 ** (-STOI_BETA_DB / 20.0)
    y_prime = torch.minimum(y_seg * alpha, x_seg * clip_bound)
    xc = x_seg - x_seg.mean(dim=-1, keepdim=True)
    yc = y_prime - y_prime.mean(dim=-1, keepdim=True)
    corr = (xc * yc).sum(-1) / (xc.norm(dim=-1) * yc.norm(dim=-1) + eps)
    d = corr.mean()
    return LossValue(-d, components={"stoi_surrogate": float(d.detach())})


def erb_scale(freq_hz):
    """Auditory (ERB-number) scale."""
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(freq_hz, dtype=np.float64))


def erb_scale_inverse(erb):
    return (10.0 ** (np.asarray(erb, dtype=np.float64) / 21.4) - 1.0) / 0.00437


@lru_cache(maxsize=4)
def _gammatone_bank_np(
    fs: int, n_bands: int, f_lo: float, f_hi: float, length: int = _GAMMATONE_LEN
) -> np.ndarray:
    """FIR gammatone impulse responses (n_bands, length), unit l2 norm,
    centre frequencies equally spaced on the ERB-number scale."""
    centers = erb_scale_inverse(np.linspace(erb_scale(f_lo), erb_scale(f_hi), n_bands))
    bandwidth = 1.019 * 24.7 * (4.37 * centers / 1000.0 + 1.0)
    t = np.arange(length) / fs
    bank = np.zeros((n_bands, length))
    for i, (cf, bw) in enumerate(zip(centers, bandwidth)):
        g = t**3 * np.exp(-2.0 * np.pi * bw * t) * np.cos(2.0 * np.pi * cf * t)
        bank[i] = g / np.linalg.norm(g)
    return bank


@lru_cache(maxsize=4)
def _envelope_lowpass_np(fs: int, cutoff_hz: float, numtaps: int = _LOWPASS_TAPS) -> np.ndarray:
    return scipy.signal.firwin(numtaps, cutoff_hz, fs=fs)


def _hilbert_envelope(bands: torch.Tensor) -> torch.Tensor:
    """Magnitude of the analytic signal along the last axis.

    The FFT is taken over a zero-padded copy twice the signal length so the
    circular wrap of the transform cannot couple the two signal ends; the
    Hilbert kernel decays slowly and the leakage would otherwise distort
    low-level envelope regions near the edges.
    """
    length = bands.shape[-1]
    padded = 2 * length
    spec = torch.fft.fft(bands, n=padded, dim=-1)
    mult = torch.zeros(padded, dtype=bands.dtype, device=bands.device)
    mult[0] = 1.0
    mult[padded // 2] = 1.0
    mult[1 : padded // 2] = 2.0
    analytic = torch.fft.ifft(spec * mult, dim=-1)[..., :length]
    return analytic.abs()


def modulation_loss(
    est,
    ref,
    fs: int = 16000,
    n_bands: int = MODULATION_BANDS,
    f_lo: float = MODULATION_F_LO,
    f_hi: float = MODULATION_F_HI,
    env_cutoff_hz: float = MODULATION_ENV_CUTOFF_HZ,
) -> LossValue:
    """Mean squared difference of log envelopes in an auditory filterbank.

    Gammatone-style FIR analysis into n_bands band-pass channels, envelope by
    magnitude of the analytic signal, low-pass at env_cutoff_hz, then MSE of
    log envelopes averaged over bands and time. Non-negative; zero only when
    the envelopes agree.
    """
    est = _as_batched(torch.as_tensor(est), "est")
    ref = _as_batched(torch.as_tensor(ref), "ref")
    if est.shape != ref.shape:
        raise EmoAvseError(f"length mismatch: est {est.shape[-1]} vs ref {ref.shape[-1]}")
    bank_np = _gammatone_bank_np(fs, n_bands, f_lo, f_hi)
    bank = torch.as_tensor(bank_np, dtype=est.dtype, device=est.device).unsqueeze(1)
    lp_np = _envelope_lowpass_np(fs, env_cutoff_hz)
    lowpass = torch.as_tensor(lp_np, dtype=est.dtype, device=est.device).view(1, 1, -1)

    def log_envelopes(x: torch.Tensor) -> torch.Tensor:
        b, length = x.shape
        bands = functional.conv1d(
            x.unsqueeze(1), bank, padding=bank.shape[-1] // 2
        )[..., :length]
        env = _hilbert_envelope(bands)
        flat = env.reshape(b * n_bands, 1, length)
        smooth = functional.conv1d(flat, lowpass, padding=lowpass.shape[-1] // 2)
        smooth = smooth.reshape(b, n_bands, length).clamp_min(0.0)
        return torch.log(smooth + MODULATION_LOG_EPS)

    diff = log_envelopes(est) - log_envelopes(ref)
    return LossValue(diff.square().mean())


LOSS_FUNCTIONS = {
    "mae": mae_loss,
    "stoi": stoi_loss,
    "modulation": modulation_loss,
}


def get_loss(loss_id: str):
    """Loss function by config id. mae consumes magnitude pairs; stoi and
    modulation consume waveform pairs."""
    if loss_id not in LOSS_FUNCTIONS:
        raise EmoAvseError(f"unknown loss {loss_id!r}; available: {sorted(LOSS_FUNCTIONS)}")
    return LOSS_FUNCTIONS[loss_id]
