"""Audio ingestion, label manifests, stratified splits, and synthetic clips.

Everything here is deterministic given its inputs (plus an explicit seed for
the random operations), so the whole pipeline can be reproduced from a seed.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, TruncatedError
from .fileio import atomic_write_bytes, atomic_write_text

PCM16_SCALE = 32768.0


@dataclass
class AudioClip:
    """Mono sample buffer in [-1, 1] with its sample rate."""

    id: str
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError(f"clip {self.id!r}: samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise DataError(f"clip {self.id!r}: sample_rate must be positive")
        peak = float(np.max(np.abs(self.samples)))
        if peak > 1.0:
            raise DataError(f"clip {self.id!r}: samples exceed [-1, 1] (peak {peak:.6g})")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    label: int
    path: Path


@dataclass
class Manifest:
    entries: list[ManifestEntry]

    def __post_init__(self) -> None:
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate clip ids in manifest: {dupes}")

    def labels(self) -> dict[str, int]:
        return {e.clip_id: e.label for e in self.entries}

    def ids_by_label(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {0: [], 1: []}
        for e in self.entries:
            out[e.label].append(e.clip_id)
        return out

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: Path | str) -> Manifest:
    """Parse a label manifest CSV.

    Expected columns: ``itemid,hasbird`` with an optional third ``path``
    column. When ``path`` is missing, ``<itemid>.wav`` beside the manifest
    is assumed.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        cols = [c.strip().lower() for c in header]
        if "itemid" not in cols or "hasbird" not in cols:
            raise DataError(f"{path}: header must contain itemid and hasbird columns, got {header}")
        id_col = cols.index("itemid")
        label_col = cols.index("hasbird")
        path_col = cols.index("path") if "path" in cols else None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) <= max(id_col, label_col):
                raise DataError(f"{path}:{lineno}: malformed row {row!r}")
            clip_id = row[id_col].strip()
            raw_label = row[label_col].strip()
            if not clip_id:
                raise DataError(f"{path}:{lineno}: empty itemid")
            if raw_label not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: hasbird must be 0 or 1, got {raw_label!r}")
            if path_col is not None and len(row) > path_col and row[path_col].strip():
                wav_path = Path(row[path_col].strip())
                if not wav_path.is_absolute():
                    wav_path = path.parent / wav_path
            else:
                wav_path = path.parent / f"{clip_id}.wav"
            entries.append(ManifestEntry(clip_id=clip_id, label=int(raw_label), path=wav_path))
    return Manifest(entries=entries)


def save_manifest(manifest: Manifest, path: Path | str) -> None:
    lines = ["itemid,hasbird"]
    lines += [f"{e.clip_id},{e.label}" for e in manifest.entries]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


# --- WAV codec -------------------------------------------------------------
#
# RIFF/WAVE with fmt + data chunks; PCM 16-bit little-endian (format tag 1)
# or IEEE float32 (format tag 3). Multi-channel input is downmixed by mean.


def decode_wav(path: Path | str, clip_id: str | None = None) -> AudioClip:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt: tuple[int, int, int, int] | None = None  # (tag, channels, rate, bits)
    payload: bytes | None = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body_start + 16 > len(data):
                raise TruncatedError(f"{path}: truncated fmt chunk")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, body_start)
            fmt = (tag, channels, rate, bits)
        elif chunk_id == b"data":
            if body_start + chunk_size > len(data):
                raise TruncatedError(f"{path}: data chunk declares {chunk_size} bytes beyond end of file")
            payload = data[body_start : body_start + chunk_size]
        pos = body_start + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if payload is None:
        raise FormatError(f"{path}: missing data chunk")
    tag, channels, rate, bits = fmt
    if channels < 1 or rate <= 0:
        raise FormatError(f"{path}: invalid fmt (channels={channels}, rate={rate})")

    if tag == 1 and bits == 16:
        frames = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)], dtype="<i2")
        samples = frames.astype(np.float64) / PCM16_SCALE
    elif tag == 3 and bits == 32:
        frames = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)], dtype="<f4")
        samples = frames.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported codec (format tag {tag}, {bits}-bit)")

    if samples.size == 0:
        raise DataError(f"{path}: no audio samples")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(id=clip_id or path.stem, samples=samples, sample_rate=rate)


def encode_wav(clip: AudioClip, path: Path | str, sample_format: str = "pcm16") -> None:
    """Write a mono WAV file; float64 samples are quantized for pcm16."""
    if sample_format == "pcm16":
        ints = np.clip(np.round(clip.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        tag, bits = 1, 16
    elif sample_format == "float32":
        payload = clip.samples.astype("<f4").tobytes()
        tag, bits = 3, 32
    else:
        raise ConfigError(f"unknown sample format {sample_format!r}")
    block_align = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, tag, 1, clip.sample_rate, clip.sample_rate * block_align, block_align, bits
    )
    header += b"data" + struct.pack("<I", len(payload))
    atomic_write_bytes(Path(path), header + payload)


# --- stratified splits -----------------------------------------------------


@dataclass
class SplitAssignment:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    seed: int


def _partition_counts(n: int, ratios: tuple[float, float, float]) -> list[int]:
    # Cumulative rounding keeps every per-class count within one item of exact.
    cum = np.cumsum(ratios)
    bounds = [int(round(c * n)) for c in cum]
    bounds[-1] = n
    return [bounds[0], bounds[1] - bounds[0], bounds[2] - bounds[1]]


def make_splits(
    manifest: Manifest,
    ratios: tuple[float, float, float],
    n_splits: int,
    seed: int,
) -> list[SplitAssignment]:
    """Generate ``n_splits`` stratified train/validation/test assignments.

    Each class is shuffled and apportioned independently so per-class
    proportions track ``ratios``. Split ``k`` draws from an independent
    PCG64 stream seeded with ``seed + k``.
    """
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be non-negative and sum to 1, got {ratios}")
    if len(manifest) == 0:
        raise DataError("manifest is empty")
    by_label = manifest.ids_by_label()
    if not by_label[0] or not by_label[1]:
        raise DataError("manifest must contain both classes for a stratified split")
    n_nonempty = sum(1 for r in ratios if r > 0)
    for label, ids in by_label.items():
        if len(ids) < n_nonempty:
            raise DataError(
                f"class {label} has {len(ids)} item(s), fewer than {n_nonempty} non-empty partitions"
            )

    splits = []
    for k in range(n_splits):
        rng = np.random.default_rng(seed + k)
        parts: list[list[str]] = [[], [], []]
        for label in (0, 1):
            ids = sorted(by_label[label])
            rng.shuffle(ids)
            counts = _partition_counts(len(ids), ratios)
            start = 0
            for p, c in enumerate(counts):
                parts[p].extend(ids[start : start + c])
                start += c
        splits.append(
            SplitAssignment(
                train=frozenset(parts[0]),
                validation=frozenset(parts[1]),
                test=frozenset(parts[2]),
                seed=seed + k,
            )
        )
    return splits


def save_splits(
    splits: list[SplitAssignment],
    ratios: tuple[float, float, float],
    seed: int,
    path: Path | str,
) -> None:
    doc = {
        "seed": seed,
        "ratios": list(ratios),
        "splits": [
            {"train": sorted(s.train), "val": sorted(s.validation), "test": sorted(s.test)}
            for s in splits
        ],
    }
    atomic_write_text(Path(path), json.dumps(doc, indent=1) + "\n")


def load_splits(path: Path | str) -> tuple[list[SplitAssignment], tuple[float, float, float], int]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        seed = int(doc["seed"])
        ratios = tuple(float(r) for r in doc["ratios"])
        splits = [
            SplitAssignment(
                train=frozenset(s["train"]),
                validation=frozenset(s["val"]),
                test=frozenset(s["test"]),
                seed=seed + k,
            )
            for k, s in enumerate(doc["splits"])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed split file ({exc})") from exc
    return splits, ratios, seed  # type: ignore[return-value]


# --- synthetic clips -------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic clip.

    Positives carry linear-FM chirps inside ``chirp_band`` on top of
    broadband noise; negatives are noise alone, optionally with a tonal
    distractor below 1 kHz so amplitude cues do not separate the classes.
    """

    positive: bool
    duration_s: float = 2.0
    sample_rate: int = 22050
    n_chirps: tuple[int, int] = (2, 5)
    chirp_band: tuple[float, float] = (2000.0, 8000.0)
    noise_level: float = 0.05
    distractor: bool = False

    def __post_init__(self) -> None:
        low, high = self.chirp_band
        if not (0 < low < high < self.sample_rate / 2):
            raise ConfigError(f"chirp_band must satisfy 0 < low < high < Nyquist, got {self.chirp_band}")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if not (0 <= self.n_chirps[0] <= self.n_chirps[1]):
            raise ConfigError(f"n_chirps range invalid: {self.n_chirps}")


def synth_clip(spec: SynthSpec, seed: int, clip_id: str | None = None) -> tuple[AudioClip, int]:
    """Synthesize one labeled clip, deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    x = spec.noise_level * rng.standard_normal(n)

    if spec.positive:
        count = int(rng.integers(spec.n_chirps[0], spec.n_chirps[1] + 1))
        for _ in range(count):
            dur = float(rng.uniform(0.08, min(0.35, spec.duration_s)))
            onset = float(rng.uniform(0.0, max(spec.duration_s - dur, 1e-6)))
            f0, f1 = rng.uniform(spec.chirp_band[0], spec.chirp_band[1], size=2)
            i0 = int(onset * spec.sample_rate)
            i1 = min(n, i0 + int(dur * spec.sample_rate))
            if i1 <= i0 + 1:
                continue
            tau = t[i0:i1] - t[i0]
            phase = 2 * np.pi * (f0 * tau + (f1 - f0) * tau**2 / (2 * dur))
            envelope = np.hanning(i1 - i0)
            x[i0:i1] += 0.5 * envelope * np.sin(phase)
    elif spec.distractor:
        tone_freq = float(rng.uniform(200.0, 900.0))
        tone_phase = float(rng.uniform(0, 2 * np.pi))
        x += 0.3 * np.sin(2 * np.pi * tone_freq * t + tone_phase)

    peak = float(np.max(np.abs(x)))
    if peak > 0:
        x *= 0.95 / peak
    clip = AudioClip(id=clip_id or f"synth_{seed}", samples=x, sample_rate=spec.sample_rate)
    return clip, int(spec.positive)
