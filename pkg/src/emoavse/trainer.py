"""Manifest-driven optimization of the mask network.

Batches are selected by a stateless function of (seed, step), so a resumed
run replays the exact sequence an uninterrupted run would have seen. All
frozen per-record work (analysis transform, crop pooling, emotion
embeddings) is computed once and cached for the run.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dsp import StftParams, istft_torch, stft
from .errors import EmoAvseError
from .losses import get_loss, mae_loss, modulation_loss, stoi_loss
from .mixing import check_no_leakage, materialize, read_manifest
from .model import (
    EnhancerNet,
    ModelConfig,
    compress_magnitude,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import record_conditioning
from .visual import prepare_crop_tensor

CONFIG_VERSION = 1
TELEMETRY_NAME = "telemetry.csv"
LAST_NAME = "last.ckpt"
BEST_NAME = "best.ckpt"


@dataclass
class TrainConfig:
    """Run description: data, architecture, optimization, bookkeeping."""

    manifest: str
    out_dir: str
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 4
    learning_rate: float = 2e-4
    max_steps: int = 1000
    eval_every: int = 100
    grad_clip: float = 5.0
    seed: int = 0
    device: str = "cpu"
    segment_seconds: float = 4.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise EmoAvseError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise EmoAvseError("learning_rate must be positive")
        if self.max_steps < 1:
            raise EmoAvseError("max_steps must be at least 1")
        if self.eval_every < 1:
            raise EmoAvseError("eval_every must be at least 1")
        if self.segment_seconds <= 0:
            raise EmoAvseError("segment_seconds must be positive")

    def to_dict(self) -> dict:
        d = {
            "manifest": str(self.manifest),
            "out_dir": str(self.out_dir),
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "max_steps": self.max_steps,
            "eval_every": self.eval_every,
            "grad_clip": self.grad_clip,
            "seed": self.seed,
            "device": self.device,
            "segment_seconds": self.segment_seconds,
            "model": self.model.to_dict(),
        }
        return d


def _model_config_from_partial(data: dict) -> ModelConfig:
    kwargs = dict(data)
    if "stft" in kwargs:
        kwargs["stft"] = StftParams(**kwargs["stft"])
    for key in ("channel_plan", "visual_trunk_channels"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        return ModelConfig(**kwargs)
    except TypeError as exc:
        raise EmoAvseError(f"bad [model] table: {exc}") from exc


def load_train_config(path) -> TrainConfig:
    """Parse a versioned TOML run description."""
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise EmoAvseError(f"{path}: invalid TOML: {exc}") from exc
    version = data.pop("version", None)
    if version != CONFIG_VERSION:
        raise EmoAvseError(
            f"{path}: config version must be {CONFIG_VERSION}, got {version!r}"
        )
    model = _model_config_from_partial(data.pop("model", {}))
    try:
        return TrainConfig(model=model, **data)
    except TypeError as exc:
        raise EmoAvseError(f"{path}: {exc}") from exc


def batch_indices(seed: int, step: int, n_records: int, batch_size: int) -> np.ndarray:
    """Stateless per-step batch selection (uniform with replacement)."""
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, n_records, size=batch_size)


class _FeatureCache:
    """Per-record frozen features, computed once per run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self._store: dict[str, dict] = {}

    def get(self, record) -> dict:
        key = f"{record.clean_id}|{record.noise_id}|{record.target_snr_db}|{record.seed}"
        if key not in self._store:
            self._store[key] = self._build(record)
        return self._store[key]

    def _build(self, record) -> dict:
        cfg = self.config
        mcfg = cfg.model
        noisy, clean = materialize(record, segment_seconds=cfg.segment_seconds)
        spec = stft(noisy, mcfg.stft)
        clean_spec = stft(clean, mcfg.stft)
        usable = (spec.magnitude.shape[1] // 4) * 4
        if usable == 0:
            raise EmoAvseError(f"record {record.clean_id}: too short for the network")
        bins = mcfg.num_core_bins
        noisy_mag = torch.from_numpy(spec.magnitude).to(torch.float32)
        features = {
            "clip_id": record.clean_id,
            "usable": usable,
            "noisy_mag": noisy_mag,
            "noisy_phase": torch.from_numpy(spec.phase).to(torch.float32),
            "net_input": compress_magnitude(noisy_mag[:bins, :usable]).unsqueeze(0),
            "clean_comp": compress_magnitude(
                torch.from_numpy(clean_spec.magnitude[:bins, :usable]).to(torch.float32)
            ),
            "clean_wave": torch.from_numpy(clean.samples).to(torch.float32),
            "length": len(noisy),
            "crops": None,
            "emotion": None,
        }
        crops, embeddings = record_conditioning(record, mcfg, cfg.segment_seconds)
        if mcfg.use_visual:
            features["crops"] = prepare_crop_tensor(crops.crops, mcfg.visual_feed_size)
        if mcfg.use_emotion:
            features["emotion"] = torch.from_numpy(
                np.asarray(embeddings, dtype=np.float32).copy()
            )
        return features


def _stack_batch(items: list[dict]) -> dict:
    batch = {"clip_ids": [f["clip_id"] for f in items]}
    try:
        for key in ("net_input", "noisy_mag", "noisy_phase", "clean_comp", "clean_wave"):
            batch[key] = torch.stack([f[key] for f in items])
        for key in ("crops", "emotion"):
            if items[0][key] is not None:
                batch[key] = torch.stack([f[key] for f in items])
    except RuntimeError as exc:
        raise EmoAvseError(
            f"records in one batch have mismatched shapes ({exc}); use uniform "
            "conditioning sources or batch_size=1"
        ) from exc
    batch["usable"] = items[0]["usable"]
    batch["length"] = items[0]["length"]
    return batch


def _resynthesize(batch: dict, mask: torch.Tensor, params: StftParams) -> torch.Tensor:
    """Differentiable waveforms from the masked core; the last frequency row
    and any cropped trailing frames keep their noisy values."""
    bins = mask.shape[2]
    usable = batch["usable"]
    est_mag = batch["noisy_mag"].clone()
    est_mag[:, :bins, :usable] = mask[:, 0] * batch["noisy_mag"][:, :bins, :usable]
    spec = torch.polar(est_mag, batch["noisy_phase"])
    return istft_torch(spec, params, target_length=batch["length"])


def compute_batch_loss(model: EnhancerNet, batch: dict, loss_id: str):
    """LossValue for one batch under the configured objective. mae compares
    compressed magnitudes; stoi and modulation compare resynthesized
    waveforms against the clean ones."""
    mask = model(batch["net_input"], batch.get("crops"), batch.get("emotion"))
    if loss_id == "mae":
        est_core = mask[:, 0] * batch["noisy_mag"][:, : mask.shape[2], : batch["usable"]]
        return mae_loss(compress_magnitude(est_core), batch["clean_comp"])
    est_wave = _resynthesize(batch, mask, model.config.stft)
    if loss_id == "stoi":
        return stoi_loss(est_wave, batch["clean_wave"])
    if loss_id == "modulation":
        return modulation_loss(est_wave, batch["clean_wave"])
    get_loss(loss_id)  # raises with the catalogue for unknown ids
    raise EmoAvseError(f"loss {loss_id!r} has no training wiring")


@dataclass
class TrainState:
    step: int = 0
    best_val: float = math.inf
    last_train_loss: float = math.nan


def _save(path, model, optimizer, state: TrainState, cfg: TrainConfig) -> None:
    arrays = {}
    for i, p in enumerate(model.parameters()):
        opt_state = optimizer.state.get(p)
        if opt_state:
            arrays[f"opt{i}::exp_avg"] = opt_state["exp_avg"].detach().numpy()
            arrays[f"opt{i}::exp_avg_sq"] = opt_state["exp_avg_sq"].detach().numpy()
            arrays[f"opt{i}::step"] = np.array([float(opt_state["step"])])
    arrays["rng::torch"] = torch.get_rng_state().numpy()
    meta = {
        "step": state.step,
        "best_val": None if math.isinf(state.best_val) else state.best_val,
        "train_config": cfg.to_dict(),
    }
    save_checkpoint(path, model, extra_arrays=arrays, extra_meta=meta)


def _restore(path, model, optimizer, cfg: TrainConfig) -> TrainState:
    meta, arrays = load_checkpoint(path)
    restored = ModelConfig.from_dict(meta["config"])
    if restored != cfg.model:
        raise EmoAvseError("checkpoint model config differs from the run config")
    state_dict = {
        k[len("param::") :]: torch.from_numpy(v.copy())
        for k, v in arrays.items()
        if k.startswith("param::")
    }
    model.load_state_dict(state_dict, strict=True)
    for i, p in enumerate(model.parameters()):
        key = f"opt{i}::exp_avg"
        if key in arrays:
            optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"opt{i}::step"][0])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt{i}::exp_avg_sq"].copy()),
            }
    if "rng::torch" in arrays:
        torch.set_rng_state(torch.from_numpy(arrays["rng::torch"].copy()))
    best = meta.get("best_val")
    return TrainState(
        step=int(meta["step"]),
        best_val=math.inf if best is None else float(best),
    )


def validate(model: EnhancerNet, records, cache: _FeatureCache, cfg: TrainConfig) -> float:
    """Mean loss over the given records; no parameter mutation."""
    if not records:
        raise EmoAvseError("validation needs at least one record")
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(records), cfg.batch_size):
            chunk = records[start : start + cfg.batch_size]
            batch = _stack_batch([cache.get(r) for r in chunk])
            value = compute_batch_loss(model, batch, cfg.model.loss)
            total += value.item() * len(chunk)
    model.train()
    return total / len(records)


def train(cfg: TrainConfig, resume=None) -> Path:
    """Run the optimization loop; returns the path of the last checkpoint.

    Saves "last" every eval_every steps and at the end, and "best" by
    validation loss. When the manifest has no val split, validation is
    skipped and only "last" is written.
    """
    manifest = read_manifest(cfg.manifest)
    check_no_leakage(manifest)
    train_records = manifest.split_records("train")
    if not train_records:
        raise EmoAvseError("manifest has no train records")
    val_records = manifest.split_records("val")
    if not val_records:
        warnings.warn(
            "manifest has no val split; validation and best-checkpoint "
            "selection are skipped",
            RuntimeWarning,
        )

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    last_path = out_dir / LAST_NAME
    best_path = out_dir / BEST_NAME

    model = EnhancerNet(cfg.model).to(cfg.device)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = TrainState()
    if resume is not None:
        state = _restore(resume, model, optimizer, cfg)

    cache = _FeatureCache(cfg)
    telemetry_path = out_dir / TELEMETRY_NAME
    new_telemetry = not telemetry_path.exists()
    with open(telemetry_path, "a", newline="") as telemetry:
        writer = csv.writer(telemetry)
        if new_telemetry:
            writer.writerow(["step", "split", "loss"])

        for step in range(state.step, cfg.max_steps):
            indices = batch_indices(cfg.seed, step, len(train_records), cfg.batch_size)
            batch = _stack_batch([cache.get(train_records[i]) for i in indices])
            value = compute_batch_loss(model, batch, cfg.model.loss)
            if not torch.isfinite(value.scalar):
                raise EmoAvseError(
                    f"non-finite loss at step {step + 1} on batch {batch['clip_ids']}"
                )
            optimizer.zero_grad()
            value.scalar.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            state.step = step + 1
            state.last_train_loss = value.item()
            writer.writerow([state.step, "train", f"{state.last_train_loss:.8f}"])
            telemetry.flush()

            if state.step % cfg.eval_every == 0 or state.step == cfg.max_steps:
                if val_records:
                    val_loss = validate(model, val_records, cache, cfg)
                    writer.writerow([state.step, "val", f"{val_loss:.8f}"])
                    telemetry.flush()
                    if val_loss < state.best_val:
                        state.best_val = val_loss
                        _save(best_path, model, optimizer, state, cfg)
                _save(last_path, model, optimizer, state, cfg)
    if not last_path.exists():
        _save(last_path, model, optimizer, state, cfg)
    return last_path
