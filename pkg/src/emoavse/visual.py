"""Video frontend: frame reading, face detection and tracking, crop
preparation, and temporal alignment of per-frame features to spectrogram
frames.

Face detection backends are selectable by id. The stub backend is fully
deterministic: a centred square covering 60% of the frame's short side with a
canonical five-point landmark template, confidence 1.0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as functional

from .errors import EmoAvseError

log = logging.getLogger(__name__)

CROP_SIZE = 224

# crop normalization constants expected by pretrained trunks
CROP_MEAN = (0.485, 0.456, 0.406)
CROP_STD = (0.229, 0.224, 0.225)

# five-point landmark template as fractions of the detection square:
# left eye, right eye, nose tip, left mouth corner, right mouth corner
LANDMARK_TEMPLATE = np.array(
    [[0.30, 0.38], [0.70, 0.38], [0.50, 0.60], [0.35, 0.78], [0.65, 0.78]]
)


@dataclass
class FrameSequence:
    """Decoded RGB frames (N, H, W, 3) uint8 plus the stream frame rate."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) frames, got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class FaceDetection:
    """One detected face: pixel bbox (x, y, w, h), five landmarks, confidence."""

    bbox: tuple[int, int, int, int]
    landmarks: np.ndarray
    confidence: float
    frame_index: int = 0

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        if self.landmarks.shape != (5, 2):
            raise ValueError(f"expected (5, 2) landmarks, got {self.landmarks.shape}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass
class CropProvenance:
    """How one crop was obtained: a fresh detection, a held previous box, the
    centre fallback, or a precomputed sidecar file."""

    kind: str
    frame_index: int
    source_index: int | None = None


@dataclass
class FaceCropSequence:
    """Aligned face crops (N, 224, 224, 3) uint8 with per-frame provenance."""

    crops: np.ndarray
    provenance: list[CropProvenance] = field(default_factory=list)
    fps: float | None = None

    def __post_init__(self):
        self.crops = np.asarray(self.crops)
        expected = (self.crops.shape[0], CROP_SIZE, CROP_SIZE, 3)
        if self.crops.ndim != 4 or self.crops.shape != expected:
            raise ValueError(
                f"expected (N, {CROP_SIZE}, {CROP_SIZE}, 3) crops, got {self.crops.shape}"
            )
        if self.crops.dtype != np.uint8:
            raise ValueError(f"crops must be uint8, got {self.crops.dtype}")

    def __len__(self) -> int:
        return self.crops.shape[0]


def read_frames(path) -> FrameSequence:
    """Decode a video file to RGB frames. Raises on files without a video
    stream (including audio-only inputs)."""
    path = Path(path)
    if not path.exists():
        raise EmoAvseError(f"video file not found: {path}", stage="video")
    cap = cv2.VideoCapture(str(path))
    frames = []
    fps = 0.0
    if cap.isOpened():
        fps = float(cap.get(cv2.CAP_PROP_FPS))
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise EmoAvseError(f"no video stream in {path}", stage="video")
    if fps <= 0:
        log.warning("%s reports no frame rate; assuming 30 fps", path)
        fps = 30.0
    return FrameSequence(np.stack(frames), fps)


def _center_square(height: int, width: int) -> tuple[int, int, int, int]:
    side = int(round(0.6 * min(height, width)))
    return (width - side) // 2, (height - side) // 2, side, side


class StubFaceDetector:
    """Deterministic detector: centred square, template landmarks."""

    def detect(self, frame: np.ndarray, frame_index: int = 0) -> FaceDetection:
        h, w = frame.shape[:2]
        x, y, side, _ = _center_square(h, w)
        landmarks = LANDMARK_TEMPLATE * side + np.array([x, y], dtype=np.float64)
        return FaceDetection((x, y, side, side), landmarks, 1.0, frame_index)


class MtcnnFaceDetector:
    """Adapter for the MTCNN detector; needs facenet-pytorch installed."""

    def __init__(self, device: str = "cpu"):
        try:
            from facenet_pytorch import MTCNN
        except ImportError as exc:
            raise EmoAvseError(
                "face-detection backend 'mtcnn' requires the facenet-pytorch "
                "package; install it or use the 'stub' backend",
                stage="face-detection",
            ) from exc
        self._mtcnn = MTCNN(keep_all=True, device=device)

    def detect(self, frame: np.ndarray, frame_index: int = 0) -> FaceDetection | None:
        boxes, probs, points = self._mtcnn.detect(frame, landmarks=True)
        if boxes is None or len(boxes) == 0:
            return None
        best = int(np.argmax(probs))
        x1, y1, x2, y2 = boxes[best]
        return FaceDetection(
            (int(x1), int(y1), int(x2 - x1), int(y2 - y1)),
            points[best],
            float(probs[best]),
            frame_index,
        )


_DETECTOR_BACKENDS = {"stub": StubFaceDetector, "mtcnn": MtcnnFaceDetector}


def get_face_detector(backend: str = "stub"):
    if backend not in _DETECTOR_BACKENDS:
        raise EmoAvseError(
            f"unknown face-detection backend {backend!r}; "
            f"available: {sorted(_DETECTOR_BACKENDS)}",
            stage="face-detection",
        )
    return _DETECTOR_BACKENDS[backend]()


def detect_face(frame: np.ndarray, backend: str = "stub") -> FaceDetection | None:
    return get_face_detector(backend).detect(frame)


def track_and_crop(frames: FrameSequence, detector=None) -> FaceCropSequence:
    """Detect, track, and crop one face per frame to 224x224.

    Frames with no detection reuse the most recent box; if no face has been
    seen yet the centre square is used. Provenance records which of the three
    paths produced each crop.
    """
    detector = detector or StubFaceDetector()
    crops = []
    provenance = []
    last: FaceDetection | None = None
    for i, frame in enumerate(frames.frames):
        detection = detector.detect(frame, i)
        if detection is not None:
            box = detection.bbox
            provenance.append(CropProvenance("detected", i, i))
            last = detection
        elif last is not None:
            box = last.bbox
            provenance.append(CropProvenance("held", i, last.frame_index))
        else:
            box = _center_square(*frame.shape[:2])
            provenance.append(CropProvenance("center-fallback", i, None))
        x, y, w, h = box
        x0, y0 = max(0, x), max(0, y)
        x1, y1 = min(frame.shape[1], x + w), min(frame.shape[0], y + h)
        if x1 <= x0 or y1 <= y0:
            raise EmoAvseError(
                f"frame {i}: face box {box} lies outside the frame", stage="face-detection"
            )
        crop = cv2.resize(
            frame[y0:y1, x0:x1], (CROP_SIZE, CROP_SIZE), interpolation=cv2.INTER_LINEAR
        )
        crops.append(crop)
    return FaceCropSequence(np.stack(crops), provenance, frames.fps)


def load_sidecar_crops(directory) -> FaceCropSequence:
    """Load precomputed 224x224 PNG crops named <frame_index:05d>.png."""
    directory = Path(directory)
    if not directory.is_dir():
        raise EmoAvseError(f"crop directory not found: {directory}", stage="video")
    files = sorted(directory.glob("*.png"))
    if not files:
        raise EmoAvseError(f"no PNG crops in {directory}", stage="video")
    crops = []
    provenance = []
    for i, f in enumerate(files):
        img = cv2.imread(str(f), cv2.IMREAD_COLOR)
        if img is None:
            raise EmoAvseError(f"cannot read crop {f}", stage="video")
        if img.shape != (CROP_SIZE, CROP_SIZE, 3):
            raise EmoAvseError(
                f"crop {f} has shape {img.shape}, expected "
                f"({CROP_SIZE}, {CROP_SIZE}, 3)",
                stage="video",
            )
        crops.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
        provenance.append(CropProvenance("sidecar", i, i))
    return FaceCropSequence(np.stack(crops), provenance)


def normalize_crops(crops: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, 3) crops to float32 (N, 3, H, W), normalized with the
    fixed channel constants."""
    crops = np.asarray(crops)
    if crops.ndim != 4 or crops.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) crops, got {crops.shape}")
    x = torch.from_numpy(np.ascontiguousarray(crops)).to(torch.float32) / 255.0
    x = x.permute(0, 3, 1, 2)
    mean = torch.tensor(CROP_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CROP_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def prepare_crop_tensor(crops: np.ndarray, feed_size: int | None = None) -> torch.Tensor:
    """Normalize crops and optionally average-pool them to the trunk's feed
    resolution. Pooling is a fixed transform, so the result is cacheable."""
    x = normalize_crops(crops)
    if feed_size is not None and feed_size != x.shape[-1]:
        x = functional.adaptive_avg_pool2d(x, feed_size)
    return x


def temporal_align(features, target_length: int):
    """Resample per-frame features (C, N) to (C, target_length) by linear
    interpolation with endpoints mapped to endpoints.

    Accepts a numpy array or torch tensor and returns the same kind. Output
    values stay within the per-channel min/max of the input (convexity).
    """
    if target_length <= 0:
        raise ValueError("target_length must be positive")
    is_numpy = isinstance(features, np.ndarray)
    x = torch.as_tensor(features) if is_numpy else features
    if x.dim() != 2:
        raise ValueError(f"expected (C, N) features, got shape {tuple(x.shape)}")
    n = x.shape[1]
    if n == target_length:
        out = x
    elif n == 1:
        out = x.repeat(1, target_length)
    else:
        out = functional.interpolate(
            x.unsqueeze(0), size=target_length, mode="linear", align_corners=True
        ).squeeze(0)
    return out.numpy() if is_numpy else out
