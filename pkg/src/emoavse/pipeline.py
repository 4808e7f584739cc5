"""Inference chain: noisy waveform plus optional face and emotion sources
in, enhanced waveform out.

The network sees the first 256 frequency rows and a frame count cropped to
a multiple of four; the Nyquist row and any trailing frames pass through
with their noisy values, and the noisy phase is reused at resynthesis.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .dsp import Waveform, mixed_phase_resynthesis, stft
from .emotion import EMBED_DIM, get_emotion_backend, read_embedding_cache
from .errors import EmoAvseError
from .model import EnhancerNet, compress_magnitude
from .visual import (
    FaceCropSequence,
    FrameSequence,
    get_face_detector,
    load_sidecar_crops,
    prepare_crop_tensor,
    read_frames,
    track_and_crop,
)

EMBEDDING_CACHE_SUFFIX = ".emo"
VIDEO_SUFFIXES = (".mp4", ".avi")


def resolve_visual_source(
    video_path=None, crops_dir=None, face_backend: str = "stub"
) -> FaceCropSequence:
    """Face crops from a sidecar directory of aligned PNGs, or from a video
    file via detection and tracking. The directory wins when both exist."""
    if crops_dir is not None:
        return load_sidecar_crops(crops_dir)
    if video_path is not None:
        frames = read_frames(video_path)
        return track_and_crop(frames, get_face_detector(face_backend))
    raise EmoAvseError(
        "no visual source: pass a video file or a crop directory", stage="video"
    )


def _crop_array(crops) -> np.ndarray:
    if isinstance(crops, FaceCropSequence):
        return crops.crops
    return np.asarray(crops)


def enhance_waveform(
    noisy: Waveform,
    model: EnhancerNet,
    *,
    crops=None,
    video_path=None,
    crops_dir=None,
    embeddings: np.ndarray | None = None,
    embedding_cache=None,
) -> Waveform:
    """Run the full enhancement chain on one waveform.

    Conditioning sources are taken in order of directness: explicit crops or
    embeddings, then an embedding cache file, then a crop directory, then a
    video file. Branches the model was built without need no sources.
    """
    cfg = model.config
    model.eval()
    if noisy.sample_rate != cfg.stft.sample_rate:
        raise EmoAvseError(
            f"expected {cfg.stft.sample_rate} Hz input, got {noisy.sample_rate}",
            stage="stft",
        )
    spec = stft(noisy, cfg.stft)
    mag = spec.magnitude
    usable_frames = (mag.shape[1] // 4) * 4
    if usable_frames == 0:
        raise EmoAvseError(
            f"input too short: {mag.shape[1]} analysis frames, need at least 4",
            stage="stft",
        )
    core = mag[: cfg.num_core_bins, :usable_frames]

    emotion_needs_crops = (
        cfg.use_emotion and embeddings is None and embedding_cache is None
    )
    if crops is None and (cfg.use_visual or emotion_needs_crops):
        crops = resolve_visual_source(video_path, crops_dir, cfg.face_backend)

    crop_tensor = None
    if cfg.use_visual:
        try:
            crop_tensor = prepare_crop_tensor(
                _crop_array(crops), cfg.visual_feed_size
            ).unsqueeze(0)
        except ValueError as exc:
            raise EmoAvseError(str(exc), stage="visual-features") from exc

    emotion_tensor = None
    if cfg.use_emotion:
        if embeddings is None and embedding_cache is not None:
            embeddings = read_embedding_cache(embedding_cache)
        if embeddings is None:
            backend = get_emotion_backend(cfg.emotion_backend)
            embeddings = backend.embed(_crop_array(crops))
        embeddings = np.asarray(embeddings, dtype=np.float32)
        if embeddings.ndim != 2 or embeddings.shape[0] != EMBED_DIM:
            raise EmoAvseError(
                f"expected ({EMBED_DIM}, N) embeddings, got {embeddings.shape}",
                stage="emotion-features",
            )
        emotion_tensor = torch.from_numpy(embeddings.copy()).unsqueeze(0)

    net_input = (
        torch.from_numpy(compress_magnitude(core)).to(torch.float32).reshape(1, 1, *core.shape)
    )
    with torch.no_grad():
        mask = model(net_input, crop_tensor, emotion_tensor)
    mask_np = mask[0, 0].double().numpy()

    enhanced = mag.copy()
    enhanced[: cfg.num_core_bins, :usable_frames] = mask_np * core
    return mixed_phase_resynthesis(enhanced, spec, target_length=len(noisy))


def _slice_frames(frames: FrameSequence, segment_index: int, segment_seconds: float) -> FrameSequence:
    """Frames of one fixed-length audio segment, by time window."""
    start = int(round(segment_index * segment_seconds * frames.fps))
    stop = int(round((segment_index + 1) * segment_seconds * frames.fps))
    start = min(start, frames.frames.shape[0])
    window = frames.frames[start:stop]
    if window.shape[0] == 0:
        raise EmoAvseError(
            f"video has no frames for segment {segment_index} "
            f"({segment_seconds:g} s at {frames.fps:g} fps)",
            stage="video",
        )
    return FrameSequence(window, frames.fps)


def find_record_sources(record, segment_seconds: float = 4.0) -> dict:
    """Conditioning sources for a manifest record, by file convention.

    Next to the clean WAV, a directory named after the clip id holds
    aligned crops; the WAV's stem with a video suffix holds the full clip;
    the clip id plus ".emo" holds cached emotion embeddings.
    """
    clean_path = Path(record.clean_path)
    sources: dict = {}
    crops_dir = clean_path.parent / record.clean_id
    if crops_dir.is_dir():
        sources["crops_dir"] = crops_dir
    for suffix in VIDEO_SUFFIXES:
        candidate = clean_path.with_suffix(suffix)
        if candidate.exists():
            sources["video_path"] = candidate
            break
    cache = clean_path.parent / (record.clean_id + EMBEDDING_CACHE_SUFFIX)
    if cache.exists():
        sources["embedding_cache"] = cache
    sources["segment_seconds"] = segment_seconds
    return sources


def record_conditioning(record, config, segment_seconds: float = 4.0):
    """Resolve the (crops, embeddings) a model needs for one record.

    Either element is None when the corresponding branch is disabled, or for
    embeddings when they are left for the caller to compute from the crops.
    Raises with stage "video" when an enabled branch has no source.
    """
    sources = find_record_sources(record, segment_seconds)
    crops = None
    embeddings = None
    emotion_needs_crops = config.use_emotion and "embedding_cache" not in sources
    if config.use_visual or emotion_needs_crops:
        if "crops_dir" in sources:
            crops = load_sidecar_crops(sources["crops_dir"])
        elif "video_path" in sources:
            frames = read_frames(sources["video_path"])
            segment = _slice_frames(frames, record.segment_index, segment_seconds)
            crops = track_and_crop(segment, get_face_detector(config.face_backend))
        else:
            clean_path = Path(record.clean_path)
            raise EmoAvseError(
                f"record {record.clean_id}: no visual source next to {clean_path.name} "
                f"(looked for directory {record.clean_id}/ and "
                f"{clean_path.stem}{{{','.join(VIDEO_SUFFIXES)}}})",
                stage="video",
            )
    if config.use_emotion:
        if "embedding_cache" in sources:
            embeddings = read_embedding_cache(sources["embedding_cache"])
        else:
            embeddings = get_emotion_backend(config.emotion_backend).embed(crops.crops)
    return crops, embeddings


def enhance_record(
    record, noisy: Waveform, model: EnhancerNet, segment_seconds: float = 4.0
) -> Waveform:
    """Enhance one manifest record, resolving face/emotion sources from the
    files next to the clean WAV."""
    crops, embeddings = record_conditioning(record, model.config, segment_seconds)
    return enhance_waveform(noisy, model, crops=crops, embeddings=embeddings)
