"""STFT analysis/synthesis and WAV IO contracts.

Expected values are produced by independent oracles coded here (direct DFT of
a single frame, loop-counted frame tallies, physical frequency-to-bin
arithmetic) rather than by the implementation under test.
"""

import numpy as np
import pytest
import scipy.io.wavfile
import torch
from hypothesis import given, settings, strategies as st

from emoavse import EmoAvseError, StftParams, Waveform, istft, load_wav, save_wav, stft
from emoavse.dsp import (
    analysis_window,
    frame_count,
    istft_torch,
    mixed_phase_resynthesis,
    squared_window_overlap,
    stft_torch,
)

PARAMS = StftParams()


def _oracle_frame_tally(n_samples, params):
    # independent count: slide window starts until the window falls off the end
    padded = n_samples + (params.fft_size // 2) * 2 * params.center_pad
    count = 0
    start = 0
    while start + params.window_length <= padded:
        count += 1
        start += params.hop_length
    return count


def test_frame_count_matches_loop_tally():
    for n in [400, 401, 16000, 63990, 64000, 64001, 12345]:
        assert frame_count(n, PARAMS) == _oracle_frame_tally(n, PARAMS)


def test_four_second_clip_yields_257_by_401():
    # 64000 samples + 512 center pad = 64512; 1 + (64512 - 400) // 160 = 401
    rng = np.random.default_rng(0)
    w = Waveform(rng.standard_normal(64000) * 0.1, 16000)
    spec = stft(w)
    assert spec.magnitude.shape == (257, 401)
    assert spec.phase.shape == (257, 401)


def test_single_frame_matches_direct_dft():
    # with center_pad off and exactly one window of input there is one frame,
    # equal to the DFT of the windowed samples zero-padded to fft_size
    rng = np.random.default_rng(1)
    params = StftParams(center_pad=False)
    x = rng.standard_normal(params.window_length)
    spec = stft(Waveform(x, 16000), params)
    assert spec.num_frames == 1
    frame = np.zeros(params.fft_size)
    frame[: params.window_length] = x * analysis_window(params)
    oracle = np.array([
        np.sum(frame * np.exp(-2j * np.pi * k * np.arange(params.fft_size) / params.fft_size))
        for k in range(params.num_bins)
    ])
    got = spec.magnitude[:, 0] * np.exp(1j * spec.phase[:, 0])
    np.testing.assert_allclose(got, oracle, atol=1e-9)


def test_one_khz_sine_peaks_at_bin_32():
    # bin = f * fft_size / rate = 1000 * 512 / 16000 = 32 exactly
    t = np.arange(64000) / 16000.0
    w = Waveform(0.5 * np.sin(2 * np.pi * 1000.0 * t), 16000)
    spec = stft(w)
    assert int(np.argmax(spec.magnitude.mean(axis=1))) == 32


def test_round_trip_exact_to_1e6():
    rng = np.random.default_rng(2)
    for n in [747, 16000, 64000]:
        x = rng.standard_normal(n)
        w = Waveform(x, 16000)
        back = istft(stft(w))
        assert len(back) == n
        assert np.max(np.abs(back.samples - x)) <= 1e-6


def test_round_trip_various_params():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(5000)
    for params in [
        StftParams(fft_size=256, window_length=256, hop_length=64),
        StftParams(fft_size=1024, window_length=640, hop_length=160),
    ]:
        back = istft(stft(Waveform(x, 16000), params))
        assert np.max(np.abs(back.samples - x)) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(n=st.integers(min_value=1, max_value=3000), seed=st.integers(0, 2**31 - 1))
def test_round_trip_property(n, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, size=n)
    back = istft(stft(Waveform(x, 16000)))
    assert np.max(np.abs(back.samples - x)) <= 1e-6


def test_framewise_parseval():
    # energy of each windowed frame equals its spectral energy / fft_size,
    # with interior rfft bins counted twice
    rng = np.random.default_rng(4)
    x = rng.standard_normal(8000)
    params = PARAMS
    spec = stft(Waveform(x, 16000), params)
    power = spec.magnitude**2
    spectral = (power[0] + 2.0 * power[1:-1].sum(axis=0) + power[-1]) / params.fft_size
    window = analysis_window(params)
    padded = np.pad(x, (params.pad, params.pad))
    for m in range(spec.num_frames):
        frame = padded[m * params.hop_length : m * params.hop_length + params.window_length]
        direct = np.sum((frame * window) ** 2)
        assert abs(spectral[m] - direct) <= 1e-6 * max(direct, 1e-12)


def test_phase_range_and_magnitude_sign():
    rng = np.random.default_rng(5)
    spec = stft(Waveform(rng.standard_normal(16000), 16000))
    assert np.all(spec.magnitude >= 0)
    assert np.all(spec.phase > -np.pi)
    assert np.all(spec.phase <= np.pi)


def test_squared_window_overlap_bounded_away_from_zero():
    # the synthesis normalizer needs the squared-window overlap sum to be
    # bounded away from zero over the analysed support; the default
    # window/hop keeps it above 0.5 there
    wsq = squared_window_overlap(PARAMS, frame_count(64000, PARAMS))
    pad = PARAMS.pad
    support = wsq[pad : pad + 64000]
    assert support.min() > 0.5


def test_short_input_without_center_pad_raises():
    params = StftParams(center_pad=False)
    with pytest.raises(EmoAvseError):
        stft(Waveform(np.ones(399), 16000), params)


def test_rate_mismatch_raises():
    with pytest.raises(EmoAvseError):
        stft(Waveform(np.ones(8000), 8000), PARAMS)


def test_istft_trims_and_pads_to_target_length():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(4000)
    spec = stft(Waveform(x, 16000))
    assert len(istft(spec, target_length=3000)) == 3000
    assert len(istft(spec, target_length=5000)) == 5000


def test_mixed_phase_resynthesis_identity_and_shape_check():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(16000)
    spec = stft(Waveform(x, 16000))
    out = mixed_phase_resynthesis(spec.magnitude, spec)
    assert np.max(np.abs(out.samples - x)) <= 1e-6
    with pytest.raises(EmoAvseError):
        mixed_phase_resynthesis(spec.magnitude[:, :-1], spec)


def test_torch_path_agrees_with_numpy():
    rng = np.random.default_rng(8)
    x = rng.standard_normal(12000)
    spec_np = stft(Waveform(x, 16000))
    spec_t = stft_torch(torch.tensor(x, dtype=torch.float64))
    got = spec_t[0].numpy()
    np.testing.assert_allclose(np.abs(got), spec_np.magnitude, atol=1e-9)
    back = istft_torch(spec_t, PARAMS, target_length=12000)[0].numpy()
    ref = istft(spec_np).samples
    np.testing.assert_allclose(back, ref, atol=1e-9)
    assert np.max(np.abs(back - x)) <= 1e-6


def test_torch_istft_differentiable():
    rng = np.random.default_rng(9)
    x = torch.tensor(rng.standard_normal(4000), dtype=torch.float64, requires_grad=True)
    spec = stft_torch(x)
    y = istft_torch(spec, PARAMS, target_length=4000)
    y.square().sum().backward()
    assert x.grad is not None
    assert torch.isfinite(x.grad).all()


def test_wav_float_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    w = Waveform(rng.uniform(-0.9, 0.9, 16000), 16000)
    path = tmp_path / "a.wav"
    save_wav(path, w)
    back = load_wav(path)
    assert back.sample_rate == 16000
    # float32 quantization only
    assert np.max(np.abs(back.samples - w.samples)) <= 1e-6


def test_wav_pcm16_load(tmp_path):
    rng = np.random.default_rng(11)
    x = rng.uniform(-0.5, 0.5, 8000)
    path = tmp_path / "b.wav"
    scipy.io.wavfile.write(path, 16000, (x * 32767).astype(np.int16))
    back = load_wav(path)
    assert np.max(np.abs(back.samples - x)) <= 1.0 / 32768 + 1e-4


def test_wav_resample_on_load(tmp_path):
    t = np.arange(8000) / 8000.0
    x = 0.4 * np.sin(2 * np.pi * 440.0 * t)
    path = tmp_path / "c.wav"
    scipy.io.wavfile.write(path, 8000, x.astype(np.float32))
    back = load_wav(path, target_rate=16000)
    assert back.sample_rate == 16000
    assert len(back) == 16000
    spec = stft(back)
    peak = int(np.argmax(spec.magnitude.mean(axis=1)))
    # 440 Hz maps to bin 440 * 512 / 16000 = 14.08
    assert peak in (14, 15)


def test_wav_stereo_requires_downmix(tmp_path):
    x = np.stack([np.ones(4000) * 0.25, np.ones(4000) * 0.75], axis=1)
    path = tmp_path / "d.wav"
    scipy.io.wavfile.write(path, 16000, x.astype(np.float32))
    with pytest.raises(EmoAvseError):
        load_wav(path)
    back = load_wav(path, downmix=True)
    np.testing.assert_allclose(back.samples, 0.5, atol=1e-6)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([np.nan, 0.0]), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), 0)
