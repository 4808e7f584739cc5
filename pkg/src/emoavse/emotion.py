"""Frozen emotion embedding backends and their sidecar cache.

A backend maps face crops to a 1280-D embedding per frame and exposes
posteriors over eight emotion labels through a frozen linear head. Backend
weights are plain numpy arrays, never torch parameters, so they cannot enter
any optimizer. The trainable 1280-to-512 projection lives in the model, not
here.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import EmoAvseError
from .visual import CROP_SIZE, FaceCropSequence, temporal_align

EMOTION_LABELS = (
    "Anger",
    "Contempt",
    "Disgust",
    "Fear",
    "Happiness",
    "Neutral",
    "Sadness",
    "Surprise",
)

EMBED_DIM = 1280

# embedding cache: magic, frame count, channel count, float32 LE row-major
CACHE_MAGIC = b"EMO1"

_STUB_SEED = 20240716  # fixed; the stub must give identical output everywhere
_STUB_POOL = 16  # crops are block-averaged to 16x16x3 before projection


def softmax_posteriors(
    embedding: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None
) -> np.ndarray:
    """Softmax of a linear head over emotion labels.

    embedding is (EMBED_DIM,) or (EMBED_DIM, N); returns (8,) or (8, N)
    columns on the probability simplex. A zero head gives the uniform
    distribution.
    """
    e = np.asarray(embedding, dtype=np.float64)
    squeeze = e.ndim == 1
    if squeeze:
        e = e[:, None]
    if e.shape[0] != weight.shape[1]:
        raise ValueError(f"embedding dim {e.shape[0]} != head input dim {weight.shape[1]}")
    z = weight @ e
    if bias is not None:
        z = z + np.asarray(bias, dtype=np.float64)[:, None]
    z = z - z.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    return p[:, 0] if squeeze else p


def _as_crop_array(crops) -> np.ndarray:
    if isinstance(crops, FaceCropSequence):
        crops = crops.crops
    crops = np.asarray(crops)
    if crops.ndim != 4 or crops.shape[1:] != (CROP_SIZE, CROP_SIZE, 3):
        raise EmoAvseError(
            f"expected (N, {CROP_SIZE}, {CROP_SIZE}, 3) crops, got {crops.shape}",
            stage="emotion-features",
        )
    if crops.dtype != np.uint8:
        raise EmoAvseError(f"crops must be uint8, got {crops.dtype}", stage="emotion-features")
    return crops


class StubEmotionBackend:
    """Deterministic stand-in embedder: a fixed random projection of
    block-averaged pixels. Stateless across frames; identical crops give
    bit-identical embeddings on any machine."""

    name = "stub"
    embed_dim = EMBED_DIM
    num_labels = len(EMOTION_LABELS)

    def __init__(self, seed: int = _STUB_SEED):
        rng = np.random.default_rng(seed)
        n_in = _STUB_POOL * _STUB_POOL * 3
        self.projection = (
            rng.standard_normal((EMBED_DIM, n_in)) / np.sqrt(n_in)
        ).astype(np.float32)
        self.head_weight = (
            rng.standard_normal((self.num_labels, EMBED_DIM)) / np.sqrt(EMBED_DIM)
        ).astype(np.float32)
        self.head_bias = np.zeros(self.num_labels, dtype=np.float32)

    def embed(self, crops) -> np.ndarray:
        """Crops (N, 224, 224, 3) uint8 to embeddings (EMBED_DIM, N) float32."""
        arr = _as_crop_array(crops)
        block = CROP_SIZE // _STUB_POOL
        pooled = arr.reshape(
            arr.shape[0], _STUB_POOL, block, _STUB_POOL, block, 3
        ).mean(axis=(2, 4), dtype=np.float64)
        flat = (pooled / 255.0).reshape(arr.shape[0], -1)
        emb = self.projection.astype(np.float64) @ flat.T
        return emb.astype(np.float32)

    def posteriors(self, embedding: np.ndarray) -> np.ndarray:
        return softmax_posteriors(embedding, self.head_weight, self.head_bias)


class PretrainedEmotionBackend:
    """Adapter for the pretrained affect embedder (EfficientNet-B0 trunk with
    an 8-label emotion head). Requires timm and a local weights file; raises
    a clear error when either is missing."""

    name = "enet_b0_8_va_mtl"
    embed_dim = EMBED_DIM
    num_labels = len(EMOTION_LABELS)

    def __init__(self, weights_path=None):
        try:
            import timm  # noqa: F401
        except ImportError as exc:
            raise EmoAvseError(
                "emotion backend 'enet_b0_8_va_mtl' requires the timm package "
                "and a local weights file; install timm and pass weights_path, "
                "or use the 'stub' backend",
                stage="emotion-features",
            ) from exc
        if weights_path is None or not Path(weights_path).exists():
            raise EmoAvseError(
                f"pretrained emotion weights not found at {weights_path!r}",
                stage="emotion-features",
            )
        raise EmoAvseError(
            "loading pretrained emotion weights is not wired up in this build",
            stage="emotion-features",
        )

    def embed(self, crops) -> np.ndarray:
        raise NotImplementedError

    def posteriors(self, embedding: np.ndarray) -> np.ndarray:
        raise NotImplementedError


_EMOTION_BACKENDS = {
    "stub": StubEmotionBackend,
    "enet_b0_8_va_mtl": PretrainedEmotionBackend,
}


def get_emotion_backend(backend: str = "stub", **kwargs):
    if backend not in _EMOTION_BACKENDS:
        raise EmoAvseError(
            f"unknown emotion backend {backend!r}; available: {sorted(_EMOTION_BACKENDS)}",
            stage="emotion-features",
        )
    return _EMOTION_BACKENDS[backend](**kwargs)


def broadcast_upsample(embedding, target_frames: int, n_freq: int = 8):
    """Align per-frame features to spectrogram frames, then replicate across
    the frequency axis.

    embedding is (C, N) numpy or torch; returns (C, n_freq, target_frames) of
    the same kind, with identical values in every frequency slot.
    """
    aligned = temporal_align(embedding, target_frames)
    if isinstance(aligned, np.ndarray):
        return np.repeat(aligned[:, None, :], n_freq, axis=1)
    return aligned.unsqueeze(1).expand(-1, n_freq, -1)


def write_embedding_cache(path, embedding: np.ndarray) -> None:
    """Persist a per-clip embedding matrix (C, N) as a small binary sidecar."""
    emb = np.asarray(embedding, dtype=np.float32)
    if emb.ndim != 2:
        raise ValueError(f"expected (C, N) embedding, got {emb.shape}")
    c, n = emb.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", n, c))
        fh.write(np.ascontiguousarray(emb).tobytes())


def read_embedding_cache(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != CACHE_MAGIC:
        raise EmoAvseError(f"{path}: not an embedding cache (bad magic)")
    n, c = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * n * c
    if len(data) != expected:
        raise EmoAvseError(
            f"{path}: embedding cache truncated or oversized "
            f"({len(data)} bytes, expected {expected})"
        )
    return np.frombuffer(data[12:], dtype="<f4").reshape(c, n).copy()
