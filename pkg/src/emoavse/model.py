"""Mask-estimating enhancement network and its checkpoint format.

Audio branch: two stride-2 convolutions then three [conv block + frequency
pool] stages down to 512 channels on an 8-slot frequency axis. Visual branch:
one 3D convolution over stacked crops, a small residual 2D trunk per frame,
and a dilated temporal convolution stack, 512-D per frame. Emotion branch: a
trainable linear projection of the frozen 1280-D embedding. The three are
concatenated to 1536 channels, reduced by a 1x1 bottleneck, and decoded with
skip connections to a sigmoid mask over the 256 non-Nyquist frequency bins.

No normalization layers anywhere: outputs are batch-size invariant and
constant inputs give time-constant features.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as functional
from torch import nn

from .dsp import StftParams
from .emotion import EMBED_DIM
from .errors import EmoAvseError

CHECKPOINT_MAGIC = "EAVSE1"

LOSS_IDS = ("mae", "stoi", "modulation")
MASK_ACTIVATIONS = ("sigmoid", "one")

# frequency slots at the fusion point: 256 bins / 2 (stride) / 2 (stride) / 2^3 (pools)
FUSION_FREQ_SLOTS = 8
VISUAL_DIM = 512


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training-mode switches.

    channel_plan gives the five audio stage widths; it must end at 512 so the
    fusion concatenation is 512 + 512 + 512 channels. visual_feed_size is the
    resolution crops are pooled to before the 3D convolution (224 keeps them
    as-is; smaller values trade accuracy for speed).
    """

    stft: StftParams = field(default_factory=StftParams)
    channel_plan: tuple[int, ...] = (64, 128, 256, 384, 512)
    mask_activation: str = "sigmoid"
    loss: str = "mae"
    seed: int = 0
    use_visual: bool = True
    use_emotion: bool = True
    visual_feed_size: int = 224
    visual_trunk_channels: tuple[int, ...] = (64, 128, 256, 512)
    emotion_backend: str = "stub"
    face_backend: str = "stub"

    def __post_init__(self):
        if len(self.channel_plan) != 5:
            raise ValueError(f"channel_plan needs 5 stage widths, got {self.channel_plan}")
        if self.channel_plan[-1] != VISUAL_DIM:
            raise ValueError(f"channel_plan must end at {VISUAL_DIM}, got {self.channel_plan}")
        if any(c <= 0 for c in self.channel_plan):
            raise ValueError("channel widths must be positive")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ValueError(
                f"mask_activation must be one of {MASK_ACTIVATIONS}, "
                f"got {self.mask_activation!r}"
            )
        if self.loss not in LOSS_IDS:
            raise ValueError(f"loss must be one of {LOSS_IDS}, got {self.loss!r}")
        if self.visual_feed_size < 16 or self.visual_feed_size % 2:
            raise ValueError("visual_feed_size must be an even number of at least 16")
        if len(self.visual_trunk_channels) != 4:
            raise ValueError("visual_trunk_channels needs 4 stage widths")

    @property
    def num_core_bins(self) -> int:
        return self.stft.num_bins - 1  # Nyquist row is detached from the network

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stft"] = asdict(self.stft)
        # canonical JSON form so a checkpoint echo compares equal
        d["channel_plan"] = list(self.channel_plan)
        d["visual_trunk_channels"] = list(self.visual_trunk_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stft"] = StftParams(**d["stft"])
        d["channel_plan"] = tuple(d["channel_plan"])
        d["visual_trunk_channels"] = tuple(d["visual_trunk_channels"])
        return cls(**d)

    def with_mode(self, use_visual: bool, use_emotion: bool) -> "ModelConfig":
        return replace(self, use_visual=use_visual, use_emotion=use_emotion)


def _activation(name: str) -> nn.Module:
    if name == "leaky_relu":
        return nn.LeakyReLU(0.2)
    if name == "identity":
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


def _edge_pad_time(x: torch.Tensor, pad: int, dim: int) -> torch.Tensor:
    """Replicate the first/last slice along dim; works for any length."""
    if pad == 0:
        return x
    first = x.narrow(dim, 0, 1)
    last = x.narrow(dim, x.shape[dim] - 1, 1)
    sizes_first = [-1] * x.dim()
    sizes_first[dim] = pad
    return torch.cat([first.expand(sizes_first), x, last.expand(sizes_first)], dim=dim)


class _ConvBlock(nn.Module):
    """Two 3x3 stride-1 convolutions with activations; the second conv
    changes the channel count."""

    def __init__(self, c_in: int, c_out: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_in, 3, padding=1)
        self.conv2 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.act = _activation(activation)

    def forward(self, x):
        return self.act(self.conv2(self.act(self.conv1(x))))


class AudioEncoder(nn.Module):
    """Spectrogram encoder: (B, 1, 256, T) to (B, 512, 8, T/4) plus skips."""

    def __init__(self, plan: tuple[int, ...], activation: str = "leaky_relu"):
        super().__init__()
        c1, c2, c3, c4, c5 = plan
        self.stem1 = nn.Conv2d(1, c1, 4, stride=2, padding=1)
        self.stem2 = nn.Conv2d(c1, c2, 4, stride=2, padding=1)
        self.block1 = _ConvBlock(c2, c3, activation)
        self.block2 = _ConvBlock(c3, c4, activation)
        self.block3 = _ConvBlock(c4, c5, activation)
        self.pool = nn.MaxPool2d((2, 1))
        self.act = _activation(activation)

    def forward(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 1:
            raise EmoAvseError(f"expected (B, 1, F, T) input, got {tuple(x.shape)}")
        if x.shape[2] % 32 or x.shape[3] % 4:
            raise EmoAvseError(
                f"encoder needs F divisible by 32 and T divisible by 4, "
                f"got F={x.shape[2]}, T={x.shape[3]}"
            )
        s1 = self.act(self.stem1(x))
        s2 = self.act(self.stem2(s1))
        s3 = self.pool(self.block1(s2))
        s4 = self.pool(self.block2(s3))
        out = self.pool(self.block3(s4))
        return out, [s1, s2, s3, s4]


class MaskDecoder(nn.Module):
    """Mirror of the encoder: three [frequency unpool + conv block] stages
    with skip concatenation, two stride-2 transposed convolutions, and a
    1x1 head producing one mask logit per time-frequency cell."""

    def __init__(self, plan: tuple[int, ...], activation: str = "leaky_relu"):
        super().__init__()
        c1, c2, c3, c4, c5 = plan
        self.unpool = nn.Upsample(scale_factor=(2, 1), mode="nearest")
        self.block1 = _ConvBlock(c5 + c4, c4, activation)
        self.block2 = _ConvBlock(c4 + c3, c3, activation)
        self.block3 = _ConvBlock(c3 + c2, c2, activation)
        self.tconv1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.tconv2 = nn.ConvTranspose2d(2 * c1, c1, 4, stride=2, padding=1)
        self.head = nn.Conv2d(c1, 1, 1)
        # Bias the head positive so an untrained model passes audio through
        # (sigmoid(2) is roughly 0.88) instead of starting at half suppression.
        # Early optimisation otherwise tends to collapse into an all-zero mask
        # whose saturated gradients are hard to climb out of.
        nn.init.constant_(self.head.bias, 2.0)
        self.act = _activation(activation)

    def forward(self, z: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        s1, s2, s3, s4 = skips
        h = self.block1(torch.cat([self.unpool(z), s4], dim=1))
        h = self.block2(torch.cat([self.unpool(h), s3], dim=1))
        h = self.block3(torch.cat([self.unpool(h), s2], dim=1))
        h = self.act(self.tconv1(h))
        h = self.act(self.tconv2(torch.cat([h, s1], dim=1)))
        return self.head(h)


class _BasicBlock2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.act = _activation(activation)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.conv2(self.act(self.conv1(x)))
        return self.act(h + self.shortcut(x))


class _TcnBlock(nn.Module):
    """Residual dilated temporal block; edge padding keeps the length and
    keeps constant inputs constant."""

    def __init__(self, channels: int, dilation: int, activation: str, kernel: int = 3):
        super().__init__()
        self.dilation = dilation
        self.pad = dilation * (kernel - 1) // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel, dilation=dilation)
        self.conv2 = nn.Conv1d(channels, channels, kernel, dilation=dilation)
        self.act = _activation(activation)

    def forward(self, x):
        h = self.act(self.conv1(_edge_pad_time(x, self.pad, dim=2)))
        h = self.conv2(_edge_pad_time(h, self.pad, dim=2))
        return self.act(h + x)


class VisualEncoder(nn.Module):
    """Face-crop encoder: 3D convolution over the frame stack, residual 2D
    trunk per frame, global average pooling to 512-D, then a dilated temporal
    stack. Output is (B, 512, N) for N input frames."""

    def __init__(
        self,
        feed_size: int,
        trunk_channels: tuple[int, ...] = (64, 128, 256, 512),
        activation: str = "leaky_relu",
    ):
        super().__init__()
        self.feed_size = feed_size
        self.conv3d = nn.Conv3d(3, 64, (5, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3))
        stages = []
        c_in = 64
        for c_out in trunk_channels:
            stages.append(_BasicBlock2d(c_in, c_out, stride=2, activation=activation))
            c_in = c_out
        self.trunk = nn.Sequential(*stages)
        self.proj = nn.Linear(c_in, VISUAL_DIM)
        self.tcn = nn.Sequential(
            *[_TcnBlock(VISUAL_DIM, 2**i, activation) for i in range(4)]
        )
        self.act = _activation(activation)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        if crops.dim() != 5 or crops.shape[2] != 3:
            raise EmoAvseError(
                f"expected (B, N, 3, H, W) crop tensor, got {tuple(crops.shape)}"
            )
        if crops.shape[-1] != self.feed_size or crops.shape[-2] != self.feed_size:
            raise EmoAvseError(
                f"crop tensor is {tuple(crops.shape[-2:])} but the trunk expects "
                f"{(self.feed_size, self.feed_size)}"
            )
        b, n = crops.shape[:2]
        x = crops.permute(0, 2, 1, 3, 4)  # (B, 3, N, H, W)
        x = _edge_pad_time(x, 2, dim=2)
        x = self.act(self.conv3d(x))  # (B, 64, N, H/2, W/2)
        x = x.permute(0, 2, 1, 3, 4).reshape(b * n, 64, x.shape[3], x.shape[4])
        x = self.trunk(x)
        x = functional.adaptive_avg_pool2d(x, 1).flatten(1)
        x = self.proj(x)  # (B*N, 512)
        x = x.reshape(b, n, VISUAL_DIM).transpose(1, 2)
        return self.tcn(x)


def fuse(
    audio: torch.Tensor, visual: torch.Tensor, emotion: torch.Tensor
) -> torch.Tensor:
    """Concatenate the three branches on the channel axis.

    audio is (B, 512, 8, T'), visual (B, 512, T') broadcast across frequency
    slots here, emotion already (B, 512, 8, T'). Disabled branches pass
    zeros. Raises when the time axes disagree.
    """
    if not (audio.shape[-1] == visual.shape[-1] == emotion.shape[-1]):
        raise EmoAvseError(
            "fusion time-axis mismatch: audio "
            f"{audio.shape[-1]}, visual {visual.shape[-1]}, emotion {emotion.shape[-1]} frames"
        )
    if visual.dim() != 3:
        raise EmoAvseError(f"visual features must be (B, C, T'), got {tuple(visual.shape)}")
    v = visual.unsqueeze(2).expand(-1, -1, audio.shape[2], -1)
    return torch.cat([audio, v, emotion], dim=1)


def align_frames(features: torch.Tensor, target_length: int) -> torch.Tensor:
    """Batched linear resampling (B, C, N) -> (B, C, T'), endpoints mapped to
    endpoints."""
    if features.shape[-1] == target_length:
        return features
    if features.shape[-1] == 1:
        return features.expand(-1, -1, target_length).contiguous()
    return functional.interpolate(
        features, size=target_length, mode="linear", align_corners=True
    )


def compress_magnitude(mag):
    """log1p compression applied to linear magnitudes at the network input."""
    if isinstance(mag, torch.Tensor):
        return torch.log1p(mag)
    return np.log1p(mag)


class EnhancerNet(nn.Module):
    """Full enhancement network; forward maps compressed noisy magnitude (and
    optional conditioning) to a mask over the same cells."""

    def __init__(self, config: ModelConfig, activation: str = "leaky_relu"):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.audio_encoder = AudioEncoder(config.channel_plan, activation)
        self.bottleneck = nn.Conv2d(3 * VISUAL_DIM, VISUAL_DIM, 1)
        self.decoder = MaskDecoder(config.channel_plan, activation)
        if config.use_visual:
            self.visual_encoder = VisualEncoder(
                config.visual_feed_size, config.visual_trunk_channels, activation
            )
        else:
            self.visual_encoder = None
        if config.use_emotion:
            self.emotion_proj = nn.Linear(EMBED_DIM, VISUAL_DIM)
        else:
            self.emotion_proj = None

    def encode_audio(self, mag_comp: torch.Tensor):
        return self.audio_encoder(mag_comp)

    def encode_visual(self, crops: torch.Tensor) -> torch.Tensor:
        if self.visual_encoder is None:
            raise EmoAvseError("visual branch is disabled in this model")
        return self.visual_encoder(crops)

    def project_emotion(self, embedding: torch.Tensor) -> torch.Tensor:
        """(B, 1280, N) frozen embeddings to (B, 512, N) trainable features."""
        if self.emotion_proj is None:
            raise EmoAvseError("emotion branch is disabled in this model")
        if embedding.dim() != 3 or embedding.shape[1] != EMBED_DIM:
            raise EmoAvseError(
                f"expected (B, {EMBED_DIM}, N) embeddings, got {tuple(embedding.shape)}"
            )
        return self.emotion_proj(embedding.transpose(1, 2)).transpose(1, 2)

    def forward(
        self,
        mag_comp: torch.Tensor,
        crops: torch.Tensor | None = None,
        emotion: torch.Tensor | None = None,
        return_intermediates: bool = False,
    ):
        audio, skips = self.encode_audio(mag_comp)
        frames = audio.shape[-1]
        batch = audio.shape[0]
        zeros_like_audio = dict(dtype=audio.dtype, device=audio.device)

        if self.config.use_visual:
            if crops is None:
                raise EmoAvseError(
                    "visual branch enabled but no crops provided", stage="visual-features"
                )
            visual = align_frames(self.encode_visual(crops), frames)
        else:
            visual = torch.zeros(batch, VISUAL_DIM, frames, **zeros_like_audio)

        if self.config.use_emotion:
            if emotion is None:
                raise EmoAvseError(
                    "emotion branch enabled but no embeddings provided",
                    stage="emotion-features",
                )
            projected = align_frames(self.project_emotion(emotion), frames)
            emo = projected.unsqueeze(2).expand(-1, -1, audio.shape[2], -1)
        else:
            emo = torch.zeros(batch, VISUAL_DIM, audio.shape[2], frames, **zeros_like_audio)

        fused = fuse(audio, visual, emo)
        z = self.bottleneck(fused)
        logits = self.decoder(z, skips)
        if self.config.mask_activation == "one":
            mask = torch.ones_like(logits)
        else:
            mask = torch.sigmoid(logits)
        if return_intermediates:
            return mask, {
                "audio": audio,
                "skips": skips,
                "visual": visual,
                "emotion": emo,
                "fused": fused,
                "bottleneck": z,
                "logits": logits,
            }
        return mask

    def saturate_mask_(self, logit: float = 30.0) -> None:
        """Test mode: drive the head to a constant logit so the sigmoid mask
        saturates at (effectively) one."""
        with torch.no_grad():
            self.decoder.head.weight.zero_()
            self.decoder.head.bias.fill_(logit)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def save_checkpoint(path, model: EnhancerNet, extra_arrays=None, extra_meta=None) -> None:
    """Atomically write config echo plus float32 parameter arrays.

    extra_arrays lets the trainer persist optimizer and RNG state under its
    own key prefixes; extra_meta merges into the JSON header.
    """
    meta = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "config": model.config.to_dict(),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {
        f"param::{name}": tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in model.state_dict().items()
    }
    if extra_arrays:
        arrays.update(extra_arrays)
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (meta, arrays) with key prefixes intact."""
    try:
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data:
                raise EmoAvseError(f"{path}: not a model checkpoint (no header)")
            meta = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except (OSError, ValueError) as exc:
        raise EmoAvseError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_MAGIC:
        raise EmoAvseError(
            f"{path}: unrecognized checkpoint format {meta.get('format')!r}"
        )
    return meta, arrays


def load_model(path) -> tuple[EnhancerNet, dict]:
    """Rebuild a model from a checkpoint; parameters load strictly."""
    meta, arrays = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    model = EnhancerNet(config)
    state = {
        k[len("param::") :]: torch.from_numpy(v)
        for k, v in arrays.items()
        if k.startswith("param::")
    }
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta
