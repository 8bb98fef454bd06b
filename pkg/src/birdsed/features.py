"""Log-Mel spectrograms and fixed-length model input windows."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioClip
from .errors import BandCountMismatch, ConfigError, DataError, DegenerateBand, ShapeMismatch
from .labelgrid import n_segments

EPS = 1e-10
STD_FLOOR = 1e-6
CACHE_MAGIC = b"BSMF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    fft_size: int = 1024
    hop: int = 320
    window: str = "hann"
    n_mels: int = 128
    fmin: float = 50.0
    fmax: float = 14000.0
    sample_rate: int = 32000
    db_floor: float = -80.0
    segment_window_s: int = 5
    mel_norm: str | None = None  # None: peak-1 triangles; "slaney": unit-area

    def __post_init__(self):
        if self.sample_rate % self.hop:
            raise ConfigError(f"hop {self.hop} must divide sample_rate {self.sample_rate}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(f"need 0 <= fmin < fmax <= Nyquist, got {self.fmin}, {self.fmax}")
        if self.n_mels < 2:
            raise ConfigError("n_mels must be at least 2")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        if self.mel_norm not in (None, "slaney"):
            raise ConfigError(f"unknown mel_norm {self.mel_norm!r}")
        if self.segment_window_s < 1:
            raise ConfigError("segment_window_s must be >= 1")

    @property
    def fps(self) -> int:
        return self.sample_rate // self.hop

    @property
    def window_frames(self) -> int:
        return self.segment_window_s * self.fps

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class MelSpectrogram:
    values: np.ndarray  # F x n_mels, dB
    fps: int
    config_echo: FeatureConfig


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)

    @classmethod
    def identity(cls, n_mels):
        return cls(np.zeros(n_mels), np.ones(n_mels))


@dataclass
class InputWindow:
    features: np.ndarray  # frames x n_mels
    targets: np.ndarray   # frames x C
    valid_mask: np.ndarray
    origin: tuple         # (recording id, start segment)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    if len(x) < fft_size:
        x = np.pad(x, (0, fft_size - len(x)))
    n_frames = (len(x) - fft_size) // hop + 1
    return np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, fft_size), strides=(x.strides[0] * hop, x.strides[0]), writeable=False)


def stft_power(clip, cfg: FeatureConfig) -> np.ndarray:
    """F x (fft_size/2 + 1) power spectrogram of Hann-windowed frames."""
    samples = clip.samples if isinstance(clip, AudioClip) else clip
    frames = frame_signal(np.asarray(samples, dtype=np.float64), cfg.fft_size, cfg.hop)
    spec = np.fft.rfft(frames * hann(cfg.fft_size), axis=1)
    return spec.real ** 2 + spec.imag ** 2


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """n_mels x n_bins triangular filters.

    Peaks sit at ``n_mels`` mel-equidistant frequencies from ``fmin`` to ``fmax``
    inclusive; each triangle falls to zero at its neighbours' peaks and the two
    outer triangles are cut at the band edges.
    """
    centers = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels))
    centers[0], centers[-1] = cfg.fmin, cfg.fmax  # undo mel round-trip error at the band edges
    bins = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    fb = np.zeros((cfg.n_mels, cfg.n_bins))
    for k in range(cfg.n_mels):
        c = centers[k]
        if k > 0:
            lo = centers[k - 1]
            rise = (bins - lo) / (c - lo)
            sel = (bins > lo) & (bins <= c)
            fb[k, sel] = rise[sel]
        else:
            fb[k, bins == c] = 1.0
        if k < cfg.n_mels - 1:
            hi = centers[k + 1]
            fall = (hi - bins) / (hi - c)
            sel = (bins >= c) & (bins < hi)
            fb[k, sel] = fall[sel]
        if cfg.mel_norm == "slaney":
            lo = centers[max(k - 1, 0)]
            hi = centers[min(k + 1, cfg.n_mels - 1)]
            fb[k] *= 2.0 / (hi - lo)
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if len(empty):
        raise DegenerateBand(
            f"mel filters {empty.tolist()} cover no FFT bin; lower n_mels or raise fft_size")
    return fb


def log_mel(power: np.ndarray, filterbank: np.ndarray, cfg: FeatureConfig) -> MelSpectrogram:
    if power.ndim != 2 or power.shape[1] != filterbank.shape[1]:
        raise ShapeMismatch(f"power {power.shape} vs filterbank {filterbank.shape}")
    mel_power = power @ filterbank.T
    values = np.maximum(10.0 * np.log10(mel_power + EPS), cfg.db_floor)
    return MelSpectrogram(values.astype(np.float32), cfg.fps, cfg)


_FB_CACHE = {}


def _cached_filterbank(cfg):
    if cfg not in _FB_CACHE:
        _FB_CACHE[cfg] = mel_filterbank(cfg)
    return _FB_CACHE[cfg]


def featurize(clip: AudioClip, cfg: FeatureConfig) -> MelSpectrogram:
    """Log-Mel spectrogram with exactly ``ceil(duration) * fps`` frames.

    The clip is zero-padded so the frame grid covers every whole second, which
    keeps one-second label segments aligned to blocks of ``fps`` frames.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise DataError(f"clip at {clip.sample_rate} Hz, features expect {cfg.sample_rate} Hz")
    T = n_segments(clip.duration_seconds)
    if T == 0:
        return MelSpectrogram(np.zeros((0, cfg.n_mels), np.float32), cfg.fps, cfg)
    need = T * cfg.sample_rate + cfg.fft_size - cfg.hop
    x = np.zeros(need, dtype=np.float64)
    x[:len(clip)] = clip.samples
    power = stft_power(x, cfg)
    return log_mel(power, _cached_filterbank(cfg), cfg)


def compute_stats(spectrograms) -> StandardizationStats:
    total, sq, n = 0.0, 0.0, 0
    for s in spectrograms:
        v = np.asarray(s.values if isinstance(s, MelSpectrogram) else s, dtype=np.float64)
        total = total + v.sum(axis=0)
        sq = sq + (v * v).sum(axis=0)
        n += v.shape[0]
    if n == 0:
        raise DataError("no frames to compute statistics from")
    mean = total / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    return StandardizationStats(mean, np.sqrt(var))


def standardize(spec, stats: StandardizationStats) -> np.ndarray:
    v = np.asarray(spec.values if isinstance(spec, MelSpectrogram) else spec, dtype=np.float64)
    if v.shape[1] != len(stats.mean):
        raise BandCountMismatch(f"{v.shape[1]} bands vs stats for {len(stats.mean)}")
    return ((v - stats.mean) / stats.std).astype(np.float32)


def window_into_inputs(features: np.ndarray, frame_labels: np.ndarray | None, cfg: FeatureConfig,
                       recording_id: str = "") -> list:
    """Split a standardized F x M matrix into consecutive non-overlapping windows.

    The last window is zero-padded; its pad frames are masked out.
    """
    F = features.shape[0]
    W = cfg.window_frames
    n_classes = frame_labels.shape[1] if frame_labels is not None else 0
    if frame_labels is not None and frame_labels.shape[0] != F:
        raise ShapeMismatch(f"{F} feature frames vs {frame_labels.shape[0]} label frames")
    windows = []
    for start in range(0, F, W):
        stop = min(start + W, F)
        n = stop - start
        feats = np.zeros((W, features.shape[1]), dtype=np.float32)
        feats[:n] = features[start:stop]
        targets = np.zeros((W, n_classes), dtype=np.float32)
        if frame_labels is not None:
            targets[:n] = frame_labels[start:stop]
        mask = np.zeros(W, dtype=bool)
        mask[:n] = True
        windows.append(InputWindow(feats, targets, mask, (recording_id, start // cfg.fps)))
    return windows


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------

def save_feature_cache(path, spec: MelSpectrogram) -> None:
    path = Path(path)
    v = np.ascontiguousarray(spec.values, dtype="<f4")
    header = CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, v.shape[0], v.shape[1])
    path.write_bytes(header + v.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(asdict(spec.config_echo), sort_keys=True), encoding="utf-8")


def load_feature_cache(path) -> MelSpectrogram:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise DataError(f"{path} is not a feature cache file")
    version, F, M = struct.unpack("<III", raw[4:16])
    if version != CACHE_VERSION:
        raise DataError(f"unsupported feature cache version {version}")
    if len(raw) - 16 != F * M * 4:
        raise DataError(f"{path} is truncated")
    values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(F, M).astype(np.float32)
    cfg = FeatureConfig(**json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8")))
    return MelSpectrogram(values, cfg.fps, cfg)
