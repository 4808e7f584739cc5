"""Shared lean fixtures: a small model profile that keeps tests fast, and
deterministic signal/crop generators."""

import numpy as np

from emoavse.model import ModelConfig

SR = 16000
LEAN_PLAN = (8, 12, 16, 24, 512)
LEAN_TRUNK = (8, 12, 16, 24)


def lean_config(**overrides) -> ModelConfig:
    defaults = dict(
        channel_plan=LEAN_PLAN,
        visual_feed_size=32,
        visual_trunk_channels=LEAN_TRUNK,
        seed=1,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def speech_like(seconds=1.0, seed=0, sr=SR, floor=0.01):
    """Amplitude-modulated harmonic complex over a small noise floor."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * sr)) / sr
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi))
    carrier = (
        np.sin(2 * np.pi * 220.0 * t)
        + 0.5 * np.sin(2 * np.pi * 440.0 * t)
        + 0.3 * np.sin(2 * np.pi * 880.0 * t)
    )
    return 0.2 * envelope * carrier + floor * rng.standard_normal(t.size)


def random_crops(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, 224, 224, 3), dtype=np.uint8)
