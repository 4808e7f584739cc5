"""SNR-controlled mixture synthesis and the persisted mixture manifest.

A manifest is a JSONL file of mixture records (clean segment, noise file,
cyclic offset, target SNR, split, per-record seed). Building it is fully
deterministic given the corpus and a seed; mixtures themselves are
materialized lazily from the records.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dsp import Waveform, load_wav
from .errors import EmoAvseError

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.75, 0.15, 0.10)
DEFAULT_TEST_SNRS = (-9.0, -6.0, -3.0, 0.0, 3.0, 6.0)
DEFAULT_SEGMENT_SECONDS = 4.0

_SEGMENT_ID_RE = re.compile(r"^(?P<stem>.+)\.s(?P<idx>\d{3,})$")


@dataclass(frozen=True)
class SnrConfig:
    """Target-SNR policy: uniform range for train/val, fixed grid for test."""

    train_range: tuple[float, float] = (-9.0, 6.0)
    test_levels: tuple[float, ...] = DEFAULT_TEST_SNRS

    def __post_init__(self):
        lo, hi = self.train_range
        if not lo < hi:
            raise ValueError(f"empty SNR range {self.train_range}")
        if not self.test_levels:
            raise ValueError("test_levels must be non-empty")


@dataclass
class MixtureRecord:
    """One synthesized noisy/clean pair, addressed by content ids.

    clean_id is "<stem>.sNNN" where NNN indexes the 4 s segment within the
    source file; noise_offset is the cyclic start sample into the noise file.
    """

    clean_id: str
    clean_path: str
    noise_id: str
    noise_path: str
    noise_offset: int
    target_snr_db: float
    split: str
    seed: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.noise_offset < 0:
            raise ValueError("noise_offset must be non-negative")
        if _SEGMENT_ID_RE.match(self.clean_id) is None:
            raise ValueError(f"clean_id {self.clean_id!r} lacks a .sNNN segment suffix")

    @property
    def clean_stem(self) -> str:
        return _SEGMENT_ID_RE.match(self.clean_id).group("stem")

    @property
    def segment_index(self) -> int:
        return int(_SEGMENT_ID_RE.match(self.clean_id).group("idx"))


@dataclass
class Manifest:
    records: list[MixtureRecord]
    meta: dict = field(default_factory=dict)

    def split_records(self, split: str) -> list[MixtureRecord]:
        return [r for r in self.records if r.split == split]


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(np.asarray(x, dtype=np.float64)))))


def mix_at_snr(
    clean: Waveform, noise: Waveform, snr_db: float, noise_offset: int = 0
) -> tuple[Waveform, float]:
    """Add noise to clean at the requested SNR.

    The noise is tiled cyclically from noise_offset to cover the clean
    duration. Returns the mixture and the scale applied to the noise; the
    measured SNR of the result equals snr_db to round-off because the scale
    is computed from the same windowed noise that is added.
    """
    if clean.sample_rate != noise.sample_rate:
        raise EmoAvseError(
            f"rate mismatch: clean {clean.sample_rate} Hz vs noise {noise.sample_rate} Hz"
        )
    clean_rms = rms(clean.samples)
    if clean_rms == 0.0:
        raise EmoAvseError("clean signal has zero energy")
    idx = (noise_offset + np.arange(len(clean))) % len(noise)
    window = noise.samples[idx]
    noise_rms = rms(window)
    if noise_rms == 0.0:
        raise EmoAvseError("noise window has zero energy")
    scale = (clean_rms / noise_rms) * 10.0 ** (-snr_db / 20.0)
    noisy = clean.samples + scale * window
    return Waveform(noisy, clean.sample_rate), scale


def measured_snr_db(clean: Waveform, noisy: Waveform) -> float:
    """SNR of an additive mixture, recovered as energy ratio in dB."""
    residual = noisy.samples - clean.samples
    num = float(np.sum(np.square(clean.samples)))
    den = float(np.sum(np.square(residual)))
    if den == 0.0:
        raise EmoAvseError("mixture equals clean; SNR is unbounded")
    return 10.0 * np.log10(num / den)


def segment_clip(
    waveform: Waveform, segment_seconds: float = DEFAULT_SEGMENT_SECONDS
) -> list[Waveform]:
    """Cut a waveform into fixed-length segments.

    Full segments are kept as-is; a trailing remainder of at least half a
    segment is zero-padded to full length, shorter remainders are dropped.
    An input of exactly one segment comes back unchanged.
    """
    seg_len = int(round(segment_seconds * waveform.sample_rate))
    if seg_len <= 0:
        raise ValueError("segment_seconds too small")
    x = waveform.samples
    out = []
    n_full = len(x) // seg_len
    for k in range(n_full):
        out.append(Waveform(x[k * seg_len : (k + 1) * seg_len], waveform.sample_rate))
    remainder = len(x) - n_full * seg_len
    if remainder * 2 >= seg_len:
        tail = np.zeros(seg_len)
        tail[:remainder] = x[n_full * seg_len :]
        out.append(Waveform(tail, waveform.sample_rate))
    return out


def split_allocation(n: int, fractions: tuple[float, float, float]) -> list[int]:
    """Largest-remainder split of n items into train/val/test counts."""
    if len(fractions) != len(SPLITS):
        raise ValueError(f"need {len(SPLITS)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    quotas = [f * n for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    short = n - sum(counts)
    by_remainder = sorted(range(len(quotas)), key=lambda i: (counts[i] - quotas[i], i))
    for i in by_remainder[:short]:
        counts[i] += 1
    return counts


def _list_wavs(directory: Path) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise EmoAvseError(f"no WAV files in {directory}")
    return files


def _assign_splits(files: list[Path], fractions, rng) -> dict[str, str]:
    stems = [f.stem for f in files]
    if len(set(stems)) != len(stems):
        raise EmoAvseError("duplicate file stems; source ids must be unique")
    counts = split_allocation(len(files), fractions)
    order = rng.permutation(len(files))
    assignment = {}
    cursor = 0
    for split, count in zip(SPLITS, counts):
        for i in order[cursor : cursor + count]:
            assignment[stems[int(i)]] = split
        cursor += count
    return assignment


def build_manifest(
    clean_dir,
    noise_dirs,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    snr: SnrConfig | None = None,
    seed: int = 0,
    segment_seconds: float = DEFAULT_SEGMENT_SECONDS,
) -> Manifest:
    """Plan noisy/clean mixtures over a corpus.

    Clean and noise source files are split disjointly before mixing, then
    each clean segment is paired with a noise file from its own split at a
    target SNR: uniform over the train range for train/val, cycling through
    the configured grid for test. Identical inputs and seed give a
    byte-identical manifest.
    """
    snr = snr or SnrConfig()
    rng = np.random.default_rng(seed)
    clean_files = _list_wavs(Path(clean_dir))
    noise_files = []
    for d in list(noise_dirs) if not isinstance(noise_dirs, (str, Path)) else [noise_dirs]:
        noise_files.extend(_list_wavs(Path(d)))
    noise_files.sort()

    clean_split = _assign_splits(clean_files, fractions, rng)
    noise_split = _assign_splits(noise_files, fractions, rng)
    noise_pool = {s: [] for s in SPLITS}
    noise_len = {}
    for f in noise_files:
        noise_pool[noise_split[f.stem]].append(f)
        noise_len[f.stem] = len(load_wav(f))
    for split in SPLITS:
        if not noise_pool[split]:
            raise EmoAvseError(
                f"noise split {split!r} is empty; need more noise files or other fractions"
            )

    records = []
    test_cursor = 0
    lo, hi = snr.train_range
    for clean_file in clean_files:
        split = clean_split[clean_file.stem]
        segments = segment_clip(load_wav(clean_file), segment_seconds)
        pool = noise_pool[split]
        for k in range(len(segments)):
            noise_file = pool[int(rng.integers(len(pool)))]
            offset = int(rng.integers(noise_len[noise_file.stem]))
            if split == "test":
                target = float(snr.test_levels[test_cursor % len(snr.test_levels)])
                test_cursor += 1
            else:
                target = float(rng.uniform(lo, hi))
            records.append(
                MixtureRecord(
                    clean_id=f"{clean_file.stem}.s{k:03d}",
                    clean_path=str(clean_file.resolve()),
                    noise_id=noise_file.stem,
                    noise_path=str(noise_file.resolve()),
                    noise_offset=offset,
                    target_snr_db=target,
                    split=split,
                    seed=int(rng.integers(2**31 - 1)),
                )
            )
    if not records:
        raise EmoAvseError("corpus produced no mixture records")
    meta = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "fractions": list(fractions),
        "train_snr_range": [lo, hi],
        "test_snr_levels": list(snr.test_levels),
        "segment_seconds": segment_seconds,
        "num_records": len(records),
    }
    manifest = Manifest(records, meta)
    check_no_leakage(manifest)
    return manifest


def check_no_leakage(manifest: Manifest) -> None:
    """Assert no clean source or noise file appears in more than one split."""
    clean_seen: dict[str, str] = {}
    noise_seen: dict[str, str] = {}
    for r in manifest.records:
        for seen, key in ((clean_seen, r.clean_stem), (noise_seen, r.noise_id)):
            if key in seen and seen[key] != r.split:
                raise EmoAvseError(
                    f"split leakage: source {key!r} appears in both "
                    f"{seen[key]!r} and {r.split!r}"
                )
            seen[key] = r.split


def write_manifest(manifest: Manifest, path) -> None:
    """Write records as JSONL plus a .meta.json sidecar.

    The JSONL holds only the per-record fields, so two builds from the same
    inputs and seed produce byte-identical files; run metadata with the
    creation timestamp lives in the sidecar.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    if manifest.meta:
        with open(_meta_path(path), "w", encoding="utf-8") as fh:
            json.dump(manifest.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def read_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(MixtureRecord(**json.loads(line)))
            except (TypeError, ValueError, KeyError) as exc:
                raise EmoAvseError(f"{path}:{line_no}: bad manifest record: {exc}") from exc
    if not records:
        raise EmoAvseError(f"{path}: manifest has no records")
    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text(encoding="utf-8"))
    return Manifest(records, meta)


def materialize(
    record: MixtureRecord, segment_seconds: float = DEFAULT_SEGMENT_SECONDS
) -> tuple[Waveform, Waveform]:
    """Reconstruct the (noisy, clean) pair a record describes.

    A mixture peaking above full scale is brought back inside [-1, 1] by
    scaling noisy and clean together, which preserves the SNR.
    """
    clean_path = Path(record.clean_path)
    if not clean_path.exists():
        raise EmoAvseError(f"record {record.clean_id}: missing clean file {clean_path}")
    noise_path = Path(record.noise_path)
    if not noise_path.exists():
        raise EmoAvseError(f"record {record.clean_id}: missing noise file {noise_path}")
    segments = segment_clip(load_wav(clean_path), segment_seconds)
    if record.segment_index >= len(segments):
        raise EmoAvseError(
            f"record {record.clean_id}: segment {record.segment_index} out of range "
            f"({len(segments)} segments in {clean_path.name})"
        )
    clean = segments[record.segment_index]
    noise = load_wav(noise_path)
    noisy, _ = mix_at_snr(clean, noise, record.target_snr_db, record.noise_offset)
    peak = float(np.max(np.abs(noisy.samples)))
    if peak > 1.0:
        gain = 0.99 / peak
        noisy = Waveform(noisy.samples * gain, noisy.sample_rate)
        clean = Waveform(clean.samples * gain, clean.sample_rate)
    return noisy, clean
