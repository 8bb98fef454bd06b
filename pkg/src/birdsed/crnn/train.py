"""Training loop with early stopping, and per-second inference."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .. import audio_io, features, labelgrid
from ..errors import ClipTooShort, ConfigError, DivergedLoss, EmptySplit
from ..features import FeatureConfig
from . import layers as L
from .model import ArchitecturePreset, ModelParams, bce_with_logits, forward, init_model, loss_and_grads, segment_pool
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    max_epochs: int = 300
    patience: int = 10
    min_delta: float = 1e-4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    seed: int = 0
    threshold_default: float = 0.5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1 (0 would stop after the first epoch)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie strictly between 0 and 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class Recording:
    """A featurized recording: raw log-Mel values and its one-second label matrix."""
    rec_id: str
    mel: np.ndarray       # F x n_mels, dB
    segments: np.ndarray  # T x C


def feature_config_for(preset: ArchitecturePreset, base: FeatureConfig | None = None) -> FeatureConfig:
    base = base or FeatureConfig()
    return FeatureConfig(**{**asdict(base), "n_mels": preset.n_mels, "segment_window_s": preset.window_s})


def load_recordings(dataset, fcfg: FeatureConfig) -> list:
    recs = []
    for rec in dataset.records:
        clip = audio_io.read_wav(dataset.audio_path(rec), fcfg.sample_rate)
        mel = features.featurize(clip, fcfg)
        seg = labelgrid.to_segment_matrix(dataset.load_track(rec), len(dataset.species))
        recs.append(Recording(rec.background_ref, mel.values, seg))
    return recs


def make_windows(rec: Recording, stats, fcfg: FeatureConfig) -> list:
    frames = labelgrid.upsample_to_frames(rec.segments, fcfg.fps, rec.mel.shape[0])
    return features.window_into_inputs(features.standardize(rec.mel, stats), frames, fcfg, rec.rec_id)


def _batch(windows):
    x = np.stack([w.features for w in windows])
    y = np.stack([w.targets for w in windows])
    m = np.stack([w.valid_mask for w in windows])
    return x, y, m


def _segment_targets(y, fps):
    B, T, C = y.shape
    return y.reshape(B, T // fps, fps, C)[:, :, 0, :]


def batch_loss(params: ModelParams, x, y, m, fps, cfg: TrainConfig):
    if params.preset.head == "segment":
        return loss_and_grads(params, x, _segment_targets(y, fps), m, fps, cfg.bn_momentum)
    return loss_and_grads(params, x, y, m, fps, cfg.bn_momentum)


def evaluate_loss(params: ModelParams, windows, fps: int, batch_size: int = 8) -> float:
    """Inference-mode loss averaged over every valid cell of ``windows``."""
    total, cells = 0.0, 0
    for i in range(0, len(windows), batch_size):
        x, y, m = _batch(windows[i:i + batch_size])
        logits = forward(params, x, m, training=False, return_logits=True)
        if params.preset.head == "segment":
            logits, m, _ = segment_pool(logits, m, fps)
            y = _segment_targets(y, fps)
        n = int(m.sum()) * y.shape[-1]
        if n == 0:
            continue
        loss, _ = bce_with_logits(logits, y, m)
        total += loss * n
        cells += n
    return total / cells if cells else float("nan")


def split_recordings(recordings, val_fraction, seed):
    if len(recordings) < 2:
        raise EmptySplit(f"need at least 2 recordings to split, got {len(recordings)}")
    order = np.random.default_rng(seed).permutation(len(recordings))
    n_val = min(max(1, int(round(val_fraction * len(recordings)))), len(recordings) - 1)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [recordings[i] for i in train], [recordings[i] for i in val]


def history_digest(history) -> str:
    return hashlib.sha256(json.dumps(history, sort_keys=True).encode()).hexdigest()


def train_recordings(recordings, species, preset: ArchitecturePreset, cfg: TrainConfig,
                     fcfg: FeatureConfig | None = None, progress=None):
    """Train on featurized recordings. Returns ``(best_params, history)``.

    ``history`` has one row per epoch; row 0 evaluates the initial weights.
    """
    fcfg = feature_config_for(preset, fcfg)
    train_recs, val_recs = split_recordings(recordings, cfg.val_fraction, cfg.seed)
    stats = features.compute_stats([r.mel for r in train_recs])
    train_w = [w for r in train_recs for w in make_windows(r, stats, fcfg)]
    val_w = [w for r in val_recs for w in make_windows(r, stats, fcfg)]
    if not train_w or not val_w:
        raise EmptySplit("a split produced no windows")

    params = init_model(preset, len(species), cfg.seed, species, stats, fcfg)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState()
    history = [{"epoch": 0, "train_loss": evaluate_loss(params, train_w, fcfg.fps),
                "val_loss": evaluate_loss(params, val_w, fcfg.fps)}]
    best, best_loss, best_epoch, wait = params.copy(), history[0]["val_loss"], 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_w))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            x, y, m = _batch([train_w[j] for j in order[i:i + cfg.batch_size]])
            loss, grads = batch_loss(params, x, y, m, fcfg.fps, cfg)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size}")
            params.tensors = adam_step(params.tensors, grads, state, cfg.learning_rate,
                                       cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            losses.append(loss)
        val_loss = evaluate_loss(params, val_w, fcfg.fps)
        if not np.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        if progress:
            progress(history[-1])
        log.info("epoch %d train %.4f val %.4f", epoch, history[-1]["train_loss"], val_loss)
        if val_loss < best_loss - cfg.min_delta:
            best, best_loss, best_epoch, wait = params.copy(), val_loss, epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    best.history_digest = history_digest(history)
    best.best_epoch = best_epoch
    return best, history


def train(dataset, preset: ArchitecturePreset, cfg: TrainConfig, fcfg: FeatureConfig | None = None,
          progress=None):
    fcfg = feature_config_for(preset, fcfg)
    recordings = load_recordings(dataset, fcfg)
    return train_recordings(recordings, dataset.species.common_names, preset, cfg, fcfg, progress)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_features(params: ModelParams, mel: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Per-second probabilities (T x C) from a raw log-Mel matrix of T * fps frames."""
    fcfg = params.feature_config
    fps = fcfg.fps
    windows = features.window_into_inputs(features.standardize(mel, params.stats), None, fcfg)
    rows = []
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        x = np.stack([w.features for w in chunk])
        m = np.stack([w.valid_mask for w in chunk])
        logits = forward(params, x, m, training=False, return_logits=True).astype(np.float64)
        if params.preset.head == "segment":
            seg, seg_mask, _ = segment_pool(logits, m, fps)
            probs = L.sigmoid(seg)
            rows += [p[sm] for p, sm in zip(probs, seg_mask)]
        else:
            probs = L.sigmoid(logits)
            B, W, C = probs.shape
            masked = np.where(m[..., None], probs, -np.inf).reshape(B, W // fps, fps, C).max(axis=2)
            seg_mask = m.reshape(B, W // fps, fps).any(axis=2)
            rows += [p[sm] for p, sm in zip(masked, seg_mask)]
    T = mel.shape[0] // fps
    out = np.concatenate(rows, axis=0) if rows else np.zeros((0, params.n_classes))
    return out[:T]


def predict_recording(params: ModelParams, clip: audio_io.AudioClip, batch_size: int = 8) -> np.ndarray:
    """Per-second species probabilities, ``ceil(duration)`` rows."""
    fcfg = params.feature_config
    if clip.sample_rate != fcfg.sample_rate:
        clip = audio_io.resample(clip, fcfg.sample_rate)
    if len(clip) < fcfg.hop:
        raise ClipTooShort(f"clip of {len(clip)} samples is shorter than one frame hop")
    mel = features.featurize(clip, fcfg)
    return predict_features(params, mel.values, batch_size)
