"""Log mel-band energy extraction.

A clip becomes a T x n_mels matrix: Hamming-windowed frames (40 ms, 50%
overlap by default) -> one-sided FFT magnitudes -> triangular mel filterbank
on the power spectrum -> natural log with an additive floor. Per-band
z-scoring statistics are fit on training clips only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .dataset import AudioClip
from .errors import ConfigError, DataError, FormatError, ShapeError, TruncatedError
from .fileio import atomic_write_bytes, atomic_write_text

FEATURE_MAGIC = b"BADF"
FEATURE_VERSION = 1
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureConfig:
    frame_ms: float = 40.0
    overlap_fraction: float = 0.5
    n_mels: int = 40
    fft_size: int = 2048
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist at use time
    log_epsilon: float = 1e-10

    def __post_init__(self) -> None:
        if not (0 <= self.overlap_fraction < 1):
            raise ConfigError("overlap_fraction must lie in [0, 1)")
        if self.fft_size < 1 or self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.frame_ms <= 0 or self.n_mels < 1 or self.log_epsilon <= 0:
            raise ConfigError("frame_ms, n_mels and log_epsilon must be positive")
        if self.fmin < 0:
            raise ConfigError("fmin must be >= 0")

    def frame_length(self, sample_rate: int) -> int:
        return int(round(self.frame_ms / 1000.0 * sample_rate))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.frame_length(sample_rate) * (1.0 - self.overlap_fraction)))


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (T, F) float64
    clip_id: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"clip {self.clip_id!r}: non-finite feature values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]


def frame_signal(clip: AudioClip, config: FeatureConfig) -> np.ndarray:
    """Slice a clip into Hamming-windowed frames, zero-padding the tail.

    Frame t covers samples [t*hop, t*hop + N); the frame count is
    ceil(len/hop) so every frame start lies inside the clip.
    """
    n = config.frame_length(clip.sample_rate)
    hop = config.hop_length(clip.sample_rate)
    if hop < 1:
        raise ConfigError(f"hop length is zero (frame_ms={config.frame_ms}, overlap={config.overlap_fraction})")
    if n > config.fft_size:
        raise ConfigError(f"frame length {n} exceeds fft_size {config.fft_size}")
    total = clip.samples.size
    n_frames = -(-total // hop)  # ceil
    padded = np.zeros((n_frames - 1) * hop + n, dtype=np.float64)
    padded[:total] = clip.samples
    frames = np.lib.stride_tricks.sliding_window_view(padded, n)[::hop][:n_frames]
    return frames * np.hamming(n)


def stft_magnitude(frames: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """One-sided FFT magnitudes, frames zero-padded to fft_size."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError(f"frames must be 2-D, got shape {frames.shape}")
    if frames.shape[1] > config.fft_size:
        raise ConfigError(f"frame length {frames.shape[1]} exceeds fft_size {config.fft_size}")
    return np.abs(np.fft.rfft(frames, n=config.fft_size, axis=1))


def hz_to_mel(f):
    """HTK mel scale: 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class FilterBank:
    weights: np.ndarray  # (n_mels, fft_size//2 + 1)
    center_freqs: np.ndarray  # n_mels + 2 boundary frequencies, Hz

    def __post_init__(self) -> None:
        if np.any(self.weights < 0):
            raise DataError("filterbank weights must be non-negative")
        if np.any(np.diff(self.center_freqs) <= 0):
            raise DataError("filterbank boundary frequencies must be strictly increasing")
        if not np.all(self.weights.max(axis=1) > 0):
            empty = np.flatnonzero(self.weights.max(axis=1) == 0).tolist()
            raise ConfigError(f"filters {empty} have no positive weight; fft_size too small for this band layout")


def mel_filterbank(config: FeatureConfig, sample_rate: int) -> FilterBank:
    """Unit-peak triangular filters, uniformly spaced on the mel scale."""
    nyquist = sample_rate / 2.0
    fmax = nyquist if config.fmax is None else float(config.fmax)
    if fmax > nyquist:
        raise ConfigError(f"fmax {fmax} exceeds Nyquist {nyquist}")
    if config.fmin >= fmax:
        raise ConfigError(f"fmin {config.fmin} must be below fmax {fmax}")
    boundaries = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.n_mels + 2))
    bin_freqs = np.arange(config.fft_size // 2 + 1) * (sample_rate / config.fft_size)
    lower = boundaries[:-2, None]
    center = boundaries[1:-1, None]
    upper = boundaries[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return FilterBank(weights=weights, center_freqs=boundaries)


def log_mel(magnitudes: np.ndarray, bank: FilterBank, config: FeatureConfig, clip_id: str = "") -> FeatureMatrix:
    """Band energies from the power spectrum, floored and logged."""
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    if magnitudes.shape[1] != bank.weights.shape[1]:
        raise ShapeError(
            f"magnitude bins {magnitudes.shape[1]} do not match filterbank bins {bank.weights.shape[1]}"
        )
    energies = magnitudes**2 @ bank.weights.T
    return FeatureMatrix(values=np.log(energies + config.log_epsilon), clip_id=clip_id)


def extract(clip: AudioClip, config: FeatureConfig, bank: FilterBank | None = None) -> FeatureMatrix:
    """Full clip -> log mel-band energy pipeline."""
    if bank is None:
        bank = mel_filterbank(config, clip.sample_rate)
    frames = frame_signal(clip, config)
    return log_mel(stft_magnitude(frames, config), bank, config, clip_id=clip.id)


# --- per-band normalization --------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,), floored at STD_FLOOR

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("mean and std must be 1-D vectors of equal length")


def fit_norm_stats(features: Iterable[FeatureMatrix]) -> NormStats:
    """Per-band mean/std over all frames of the given (training) clips."""
    count = 0
    total = None
    total_sq = None
    for fm in features:
        if total is None:
            total = np.zeros(fm.n_bands)
            total_sq = np.zeros(fm.n_bands)
        total += fm.values.sum(axis=0)
        total_sq += (fm.values**2).sum(axis=0)
        count += fm.n_frames
    if total is None or count == 0:
        raise DataError("cannot fit normalization statistics on an empty feature list")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return NormStats(mean=mean, std=np.maximum(np.sqrt(var), STD_FLOOR))


def normalize(fm: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    if stats.mean.size != fm.n_bands:
        raise ShapeError(f"stats have {stats.mean.size} bands, features have {fm.n_bands}")
    return FeatureMatrix(values=(fm.values - stats.mean) / stats.std, clip_id=fm.clip_id)


def save_norm_stats(stats: NormStats, path: Path | str) -> None:
    doc = {"mean": stats.mean.tolist(), "std": stats.std.tolist(), "n_mels": int(stats.mean.size)}
    atomic_write_text(Path(path), json.dumps(doc) + "\n")


def load_norm_stats(path: Path | str) -> NormStats:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        stats = NormStats(mean=np.array(doc["mean"]), std=np.array(doc["std"]))
        if int(doc["n_mels"]) != stats.mean.size:
            raise DataError(f"{path}: n_mels field disagrees with vector length")
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed normalization stats ({exc})") from exc
    return stats


# --- feature file format -----------------------------------------------------
#
# Little-endian: magic "BADF", version u16, T u32, F u32, T*F float32
# row-major, then u32 byte length + UTF-8 clip id.


def save_features(fm: FeatureMatrix, path: Path | str) -> None:
    header = FEATURE_MAGIC + struct.pack("<HII", FEATURE_VERSION, fm.n_frames, fm.n_bands)
    body = fm.values.astype("<f4").tobytes()
    ident = fm.clip_id.encode("utf-8")
    atomic_write_bytes(Path(path), header + body + struct.pack("<I", len(ident)) + ident)


def load_features(path: Path | str) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad feature-file magic")
    version, n_frames, n_bands = struct.unpack_from("<HII", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature-file version {version}")
    body_end = 14 + 4 * n_frames * n_bands
    if body_end + 4 > len(data):
        raise TruncatedError(f"{path}: truncated feature payload")
    values = np.frombuffer(data[14:body_end], dtype="<f4").reshape(n_frames, n_bands)
    (id_len,) = struct.unpack_from("<I", data, body_end)
    ident = data[body_end + 4 : body_end + 4 + id_len]
    if len(ident) != id_len:
        raise TruncatedError(f"{path}: truncated clip id field")
    return FeatureMatrix(values=values.astype(np.float64), clip_id=ident.decode("utf-8"))
