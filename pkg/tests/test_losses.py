"""Loss contracts: closed-form cases, invariant ranges, gradient agreement
with central finite differences, and a frozen regression value.

The finite-difference checker is the independent oracle for analytic
gradients; brute-force loops are the oracle for mae.
"""

import numpy as np
import pytest
import torch

from emoavse import EmoAvseError
from emoavse.losses import (
    LossValue,
    get_loss,
    mae_loss,
    modulation_loss,
    stoi_loss,
    third_octave_band_matrix,
)

SR = 16000


def _speech_like(seconds=1.0, seed=0, sr=SR):
    """Harmonic carrier with a slow envelope plus a noise floor."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * sr)) / sr
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi))
    carrier = (
        np.sin(2 * np.pi * 220.0 * t)
        + 0.5 * np.sin(2 * np.pi * 440.0 * t)
        + 0.3 * np.sin(2 * np.pi * 880.0 * t)
    )
    return 0.2 * envelope * carrier + 0.01 * rng.standard_normal(t.size)


def fd_grad_check(fn, x0: torch.Tensor, n_coords: int, seed: int, h=1e-4, rtol=1e-3):
    """Central finite differences vs autograd on random coordinates."""
    x = x0.clone().double().requires_grad_(True)
    fn(x).scalar.backward()
    grad = x.grad.detach().flatten()
    flat = x0.clone().double().flatten()
    rng = np.random.default_rng(seed)
    coords = rng.choice(flat.numel(), size=n_coords, replace=False)
    for i in coords:
        probe = flat.clone()
        probe[i] = flat[i] + h
        f_plus = fn(probe.reshape(x0.shape)).item()
        probe[i] = flat[i] - h
        f_minus = fn(probe.reshape(x0.shape)).item()
        fd = (f_plus - f_minus) / (2.0 * h)
        an = float(grad[i])
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an)) + 1e-8, (
            f"coord {i}: fd {fd} vs analytic {an}"
        )


# mae


def test_mae_trivial_cases():
    x = torch.rand(32, 40, dtype=torch.float64)
    assert mae_loss(x, x).item() == 0.0
    assert abs(mae_loss(x + 0.5, x).item() - 0.5) < 1e-12


def test_mae_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    est = rng.standard_normal((17, 23))
    ref = rng.standard_normal((17, 23))
    total = 0.0
    for i in range(17):
        for j in range(23):
            total += abs(est[i, j] - ref[i, j])
    oracle = total / (17 * 23)
    got = mae_loss(torch.tensor(est), torch.tensor(ref)).item()
    assert abs(got - oracle) < 1e-7


def test_mae_shape_mismatch():
    with pytest.raises(EmoAvseError):
        mae_loss(torch.zeros(3, 4), torch.zeros(4, 3))


def test_mae_gradients():
    rng = np.random.default_rng(2)
    ref = torch.tensor(rng.standard_normal(500))
    diff = rng.standard_normal(500)
    # keep every coordinate at least 1e-2 from the |.| kink so the
    # finite-difference step cannot cross it
    est = ref + torch.tensor(np.sign(diff) * np.maximum(np.abs(diff), 1e-2))
    fd_grad_check(lambda x: mae_loss(x, ref.double()), est, n_coords=16, seed=3)


# stoi surrogate


def test_stoi_identity_is_minus_one():
    x = torch.tensor(_speech_like(seconds=1.0, seed=4))
    lv = stoi_loss(x, x)
    assert abs(lv.item() + 1.0) < 1e-6
    assert "stoi_surrogate" in lv.components


def test_stoi_scale_invariance():
    x = torch.tensor(_speech_like(seconds=1.0, seed=5))
    assert abs(stoi_loss(2.0 * x, x).item() + 1.0) < 1e-6


def test_stoi_sign_invariance_and_regression():
    # band envelopes come from spectral magnitudes, so a sign flip is
    # invisible: the loss stays at its minimum
    x = torch.tensor(_speech_like(seconds=1.0, seed=6))
    assert abs(stoi_loss(-x, x).item() + 1.0) < 1e-6
    # frozen regression pair: noisy estimate vs clean reference
    rng = np.random.default_rng(7)
    noisy = x + torch.tensor(0.3 * rng.standard_normal(x.numel()))
    value = stoi_loss(noisy, x).item()
    assert -1.0 <= value <= 1.0
    assert value == pytest.approx(-0.2639546408, abs=1e-4)


def test_stoi_range_on_random_pairs():
    rng = np.random.default_rng(8)
    for seed in range(3):
        a = torch.tensor(rng.standard_normal(SR))
        b = torch.tensor(_speech_like(seconds=1.0, seed=seed))
        v = stoi_loss(a, b).item()
        assert -1.0 <= v <= 1.0
        assert np.isfinite(v)


def test_stoi_errors():
    short = torch.zeros(1000)
    with pytest.raises(EmoAvseError, match="too short"):
        stoi_loss(short, short)
    with pytest.raises(EmoAvseError, match="mismatch"):
        stoi_loss(torch.zeros(SR), torch.zeros(SR + 1))
    with pytest.raises(EmoAvseError, match="16 kHz"):
        stoi_loss(torch.zeros(SR), torch.zeros(SR), fs=8000)


def test_stoi_gradients():
    ref = torch.tensor(_speech_like(seconds=0.8, seed=9))
    rng = np.random.default_rng(10)
    est = ref + torch.tensor(0.2 * rng.standard_normal(ref.numel()))
    fd_grad_check(lambda x: stoi_loss(x, ref), est, n_coords=12, seed=11)


def test_third_octave_matrix_covers_each_band():
    obm = third_octave_band_matrix()
    assert obm.shape == (15, 257)
    assert obm.min() == 0.0 and obm.max() == 1.0
    assert (obm.sum(axis=1) > 0).all()
    # bands are disjoint and ordered upward in frequency
    assert (obm.sum(axis=0) <= 1.0).all()
    first_bins = [int(np.argmax(row)) for row in obm]
    assert first_bins == sorted(first_bins)


# modulation loss


def test_modulation_identity_zero():
    x = torch.tensor(_speech_like(seconds=1.0, seed=12))
    assert modulation_loss(x, x).item() == 0.0


def test_modulation_one_sample_delay_is_tiny():
    ref = torch.tensor(_speech_like(seconds=1.0, seed=13))
    delayed = torch.empty_like(ref)
    delayed[1:] = ref[:-1]
    delayed[0] = ref[0]
    value = modulation_loss(delayed, ref).item()
    assert 0.0 <= value < 1e-3


def test_modulation_noise_vs_tone_orders_above_match():
    t = np.arange(SR) / SR
    tone = torch.tensor(0.3 * np.sin(2 * np.pi * 300.0 * t))
    noise = torch.tensor(0.3 * np.random.default_rng(14).standard_normal(SR))
    matched = modulation_loss(tone, tone).item()
    mismatched = modulation_loss(noise, tone).item()
    assert mismatched > matched
    assert mismatched > 0.0


def test_modulation_nonnegative_and_finite():
    rng = np.random.default_rng(15)
    for seed in range(3):
        a = torch.tensor(0.2 * rng.standard_normal(8000))
        b = torch.tensor(_speech_like(seconds=0.5, seed=seed))
        v = modulation_loss(a, b).item()
        assert v >= 0.0
        assert np.isfinite(v)


def test_modulation_length_mismatch():
    with pytest.raises(EmoAvseError, match="mismatch"):
        modulation_loss(torch.zeros(100), torch.zeros(101))


def test_modulation_gradients():
    ref = torch.tensor(_speech_like(seconds=0.5, seed=16))
    rng = np.random.default_rng(17)
    est = ref + torch.tensor(0.1 * rng.standard_normal(ref.numel()))
    fd_grad_check(lambda x: modulation_loss(x, ref), est, n_coords=12, seed=18)


# shared properties


@pytest.mark.parametrize("loss_id", ["mae", "stoi", "modulation"])
def test_minimum_at_identity(loss_id):
    fn = get_loss(loss_id)
    ref = torch.tensor(_speech_like(seconds=0.7, seed=19))
    base = fn(ref, ref).item()
    rng = np.random.default_rng(20)
    for k in range(3):
        direction = torch.tensor(rng.standard_normal(ref.numel()))
        direction = direction / direction.norm()
        perturbed = fn(ref + 1e-3 * direction, ref).item()
        assert perturbed >= base - 1e-12


@pytest.mark.parametrize("loss_id", ["mae", "stoi", "modulation"])
def test_determinism(loss_id):
    fn = get_loss(loss_id)
    ref = torch.tensor(_speech_like(seconds=0.7, seed=21))
    est = torch.tensor(_speech_like(seconds=0.7, seed=22))
    assert fn(est, ref).item() == fn(est, ref).item()


def test_get_loss_rejects_unknown():
    with pytest.raises(EmoAvseError):
        get_loss("huber")


def test_loss_value_item():
    lv = LossValue(torch.tensor(0.25))
    assert lv.item() == 0.25
    assert lv.components == {}
