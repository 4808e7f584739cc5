"""STFT analysis/synthesis and WAV file IO.

Analysis uses a periodic Hann window zero-padded at the tail of each FFT
frame; synthesis is weighted overlap-add with per-sample normalization by the
squared-window overlap sum. The same framing convention is implemented twice,
once in float64 numpy for the enhancement/metric path and once in torch for
the differentiable training path, and the two agree to float64 round-off.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch
import torch.nn.functional as functional

from .errors import EmoAvseError

DEFAULT_SAMPLE_RATE = 16000

# Floor for the squared-window overlap sum in the synthesis divide. Only the
# padded margins ever get near it; every sample of the analysed signal keeps
# an overlap sum well above 0.1 for the default window/hop.
OVERLAP_EPS = 1e-8


@dataclass(frozen=True)
class StftParams:
    """Analysis/synthesis parameters.

    window_length may be shorter than fft_size; frames are zero-padded at the
    tail before the FFT. center_pad prepends/appends fft_size // 2 zeros so
    the first window is centred near sample 0.
    """

    sample_rate: int = DEFAULT_SAMPLE_RATE
    fft_size: int = 512
    window_length: int = 400
    hop_length: int = 160
    center_pad: bool = True

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.fft_size <= 0 or self.window_length <= 0 or self.hop_length <= 0:
            raise ValueError("fft_size, window_length and hop_length must be positive")
        if self.window_length > self.fft_size:
            raise ValueError(
                f"window_length {self.window_length} exceeds fft_size {self.fft_size}"
            )
        if self.hop_length > self.window_length:
            raise ValueError(
                f"hop_length {self.hop_length} exceeds window_length {self.window_length}"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.fft_size // 2 if self.center_pad else 0


@functools.lru_cache(maxsize=8)
def _hann_periodic(length: int) -> np.ndarray:
    return scipy.signal.get_window("hann", length, fftbins=True).astype(np.float64)


def analysis_window(params: StftParams) -> np.ndarray:
    """Periodic Hann window of window_length samples."""
    return _hann_periodic(params.window_length).copy()


@dataclass
class Waveform:
    """Mono waveform with its sample rate. Samples are finite floats."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("waveform is empty")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """Magnitude/phase pair plus the parameters that produced it.

    magnitude is (num_bins, num_frames) and non-negative; phase is the same
    shape with values in (-pi, pi]. source_length is the length in samples of
    the analysed waveform, used to trim the synthesis output.
    """

    magnitude: np.ndarray
    phase: np.ndarray
    params: StftParams = field(default_factory=StftParams)
    source_length: int = 0

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.magnitude.shape != self.phase.shape:
            raise ValueError(
                f"magnitude shape {self.magnitude.shape} != phase shape {self.phase.shape}"
            )
        if self.magnitude.ndim != 2 or self.magnitude.shape[0] != self.params.num_bins:
            raise ValueError(
                f"expected ({self.params.num_bins}, T) arrays, got {self.magnitude.shape}"
            )
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be non-negative")

    @property
    def num_frames(self) -> int:
        return self.magnitude.shape[1]

    def complex_values(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


def frame_count(n_samples: int, params: StftParams) -> int:
    """Number of analysis frames for a waveform of n_samples."""
    padded = n_samples + 2 * params.pad
    if padded < params.window_length:
        raise EmoAvseError(
            f"waveform of {n_samples} samples is shorter than one analysis window "
            f"({params.window_length} samples) with center_pad={params.center_pad}"
        )
    return 1 + (padded - params.window_length) // params.hop_length


def stft(waveform: Waveform, params: StftParams | None = None) -> Spectrogram:
    """Short-time Fourier transform. Returns (num_bins, T) magnitude/phase."""
    params = params or StftParams()
    if waveform.sample_rate != params.sample_rate:
        raise EmoAvseError(
            f"waveform rate {waveform.sample_rate} != analysis rate {params.sample_rate}"
        )
    x = waveform.samples
    n = x.size
    n_frames = frame_count(n, params)
    if params.pad:
        x = np.pad(x, (params.pad, params.pad))
    window = _hann_periodic(params.window_length)
    frames = np.lib.stride_tricks.sliding_window_view(x, params.window_length)
    frames = frames[:: params.hop_length][:n_frames] * window
    spec = np.fft.rfft(frames, n=params.fft_size, axis=1).T
    magnitude = np.abs(spec)
    phase = np.angle(spec)
    # np.angle can return -pi exactly; fold onto (-pi, pi]
    phase[phase <= -np.pi] = np.pi
    return Spectrogram(magnitude, phase, params, source_length=n)


def squared_window_overlap(params: StftParams, n_frames: int) -> np.ndarray:
    """Per-sample sum of squared synthesis windows over n_frames frames."""
    length = (n_frames - 1) * params.hop_length + params.fft_size
    window = _hann_periodic(params.window_length)
    wsq = np.zeros(length)
    for m in range(n_frames):
        start = m * params.hop_length
        wsq[start : start + params.window_length] += window * window
    return wsq


def istft(spec: Spectrogram, target_length: int | None = None) -> Waveform:
    """Weighted overlap-add synthesis.

    Divides by the squared-window overlap sum per sample, so reconstruction
    of an unmodified spectrogram is exact to round-off even though the window
    and hop do not overlap-add to a constant.
    """
    params = spec.params
    if target_length is None:
        target_length = spec.source_length
    if target_length <= 0:
        raise EmoAvseError("istft needs a positive target_length or source_length")
    n_frames = spec.num_frames
    window = _hann_periodic(params.window_length)
    frames = np.fft.irfft(spec.complex_values().T, n=params.fft_size, axis=1)
    frames = frames[:, : params.window_length] * window
    length = (n_frames - 1) * params.hop_length + params.fft_size
    out = np.zeros(length)
    for m in range(n_frames):
        start = m * params.hop_length
        out[start : start + params.window_length] += frames[m]
    out /= np.maximum(squared_window_overlap(params, n_frames), OVERLAP_EPS)
    out = out[params.pad :]
    if out.size < target_length:
        out = np.pad(out, (0, target_length - out.size))
    return Waveform(out[:target_length], params.sample_rate)


def mixed_phase_resynthesis(
    magnitude: np.ndarray, phase_source: Spectrogram, target_length: int | None = None
) -> Waveform:
    """Synthesize a waveform from a (possibly modified) magnitude and the
    phase of another spectrogram, typically the noisy input."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.shape != phase_source.phase.shape:
        raise EmoAvseError(
            f"magnitude shape {magnitude.shape} does not match phase source "
            f"shape {phase_source.phase.shape}"
        )
    spec = Spectrogram(
        magnitude, phase_source.phase, phase_source.params, phase_source.source_length
    )
    return istft(spec, target_length)


def _torch_window(params: StftParams, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    w = _hann_periodic(params.window_length)
    return torch.as_tensor(w, dtype=dtype, device=device)


def stft_torch(x: torch.Tensor, params: StftParams | None = None) -> torch.Tensor:
    """Differentiable STFT matching stft(). x is (L,) or (B, L); returns a
    complex tensor (B, num_bins, T)."""
    params = params or StftParams()
    if x.dim() == 1:
        x = x.unsqueeze(0)
    if x.dim() != 2:
        raise EmoAvseError(f"expected (L,) or (B, L) input, got shape {tuple(x.shape)}")
    n = x.shape[-1]
    n_frames = frame_count(n, params)
    if params.pad:
        x = functional.pad(x, (params.pad, params.pad))
    frames = x.unfold(-1, params.window_length, params.hop_length)[:, :n_frames]
    window = _torch_window(params, x.dtype, x.device)
    spec = torch.fft.rfft(frames * window, n=params.fft_size, dim=-1)
    return spec.transpose(1, 2)


def istft_torch(
    spec: torch.Tensor, params: StftParams | None = None, target_length: int | None = None
) -> torch.Tensor:
    """Differentiable inverse of stft_torch. spec is complex (B, num_bins, T);
    returns (B, target_length)."""
    params = params or StftParams()
    if spec.dim() != 3:
        raise EmoAvseError(f"expected (B, F, T) spectrogram, got shape {tuple(spec.shape)}")
    if target_length is None or target_length <= 0:
        raise EmoAvseError("istft_torch needs a positive target_length")
    batch, _, n_frames = spec.shape
    frames = torch.fft.irfft(spec.transpose(1, 2), n=params.fft_size)
    real_dtype = frames.dtype
    window = _torch_window(params, real_dtype, spec.device)
    window_padded = functional.pad(window, (0, params.fft_size - params.window_length))
    frames = frames * window_padded
    length = (n_frames - 1) * params.hop_length + params.fft_size
    out = functional.fold(
        frames.transpose(1, 2),
        output_size=(length, 1),
        kernel_size=(params.fft_size, 1),
        stride=(params.hop_length, 1),
    ).reshape(batch, length)
    wsq = functional.fold(
        (window_padded * window_padded).reshape(1, -1, 1).expand(1, -1, n_frames),
        output_size=(length, 1),
        kernel_size=(params.fft_size, 1),
        stride=(params.hop_length, 1),
    ).reshape(1, length)
    out = out / wsq.clamp_min(OVERLAP_EPS)
    out = out[:, params.pad :]
    if out.shape[1] < target_length:
        out = functional.pad(out, (0, target_length - out.shape[1]))
    return out[:, :target_length]


def load_wav(path, target_rate: int = DEFAULT_SAMPLE_RATE, downmix: bool = False) -> Waveform:
    """Read a PCM or IEEE-float WAV file as float64 in [-1, 1).

    Multi-channel input raises unless downmix is set, in which case channels
    are averaged. A file at a different rate is resampled to target_rate.
    """
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise EmoAvseError(f"cannot read WAV file {path}: {exc}") from exc
    if data.ndim == 2:
        if data.shape[1] == 1:
            data = data[:, 0]
        elif downmix:
            data = data.astype(np.float64).mean(axis=1)
        else:
            raise EmoAvseError(
                f"{path} has {data.shape[1]} channels; pass downmix=True to average them"
            )
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise EmoAvseError(f"{path}: unsupported WAV sample format {data.dtype}")
    if samples.size == 0:
        raise EmoAvseError(f"{path}: empty WAV file")
    if rate != target_rate:
        g = np.gcd(int(rate), int(target_rate))
        samples = scipy.signal.resample_poly(samples, target_rate // g, rate // g)
    return Waveform(samples, target_rate)


def save_wav(path, waveform: Waveform) -> None:
    """Write a mono IEEE float32 WAV file."""
    scipy.io.wavfile.write(path, waveform.sample_rate, waveform.samples.astype(np.float32))
