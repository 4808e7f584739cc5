"""Emotion-aware audio-visual speech enhancement.

Mask-based spectral enhancement of noisy speech conditioned on face crops
and a frozen emotion embedding, with SNR-controlled mixture synthesis,
training, metrics, and a command line front end.

Heavier subsystems (model, trainer, metrics, pipeline, report, cli) are
imported from their modules directly so `import emoavse` stays light.
"""

__version__ = "0.1.0"

from .errors import EmoAvseError
from .dsp import (
    StftParams,
    Waveform,
    Spectrogram,
    stft,
    istft,
    mixed_phase_resynthesis,
    load_wav,
    save_wav,
)

__all__ = [
    "EmoAvseError",
    "StftParams",
    "Waveform",
    "Spectrogram",
    "stft",
    "istft",
    "mixed_phase_resynthesis",
    "load_wav",
    "save_wav",
    "__version__",
]
