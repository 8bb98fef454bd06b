"""CRNN for sound event detection: conv blocks -> bidirectional GRU -> dense -> sigmoid.

Parameters live in a flat ``name -> ndarray`` dict inside :class:`ModelParams`.
Batch-norm running statistics are stored there too but are not trainable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import AllMasked, ConfigError, ShapeMismatch
from ..features import FeatureConfig, StandardizationStats
from . import layers as L

PROB_CLIP = 1e-7
HEADS = ("frame", "segment")


@dataclass(frozen=True)
class ArchitecturePreset:
    """Model shape.

    ``head`` selects the supervision grid: ``"frame"`` trains on per-frame
    targets and pools seconds by max probability; ``"segment"`` averages frame
    logits over each second and trains on the one-second labels directly.
    """
    name: str
    n_mels: int
    window_s: int
    conv_filters: tuple = (64, 64, 64)
    pool_factors: tuple = (4, 4, 4)
    gru_hidden: int = 64
    gru_layers: int = 1
    head: str = "frame"

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "pool_factors", tuple(int(p) for p in self.pool_factors))
        if len(self.conv_filters) != len(self.pool_factors) or not self.conv_filters:
            raise ConfigError("conv_filters and pool_factors need equal, nonzero length")
        if self.n_mels % int(np.prod(self.pool_factors)):
            raise ConfigError(f"pool factors {self.pool_factors} do not divide n_mels={self.n_mels}")
        if self.gru_hidden < 1 or self.gru_layers < 1:
            raise ConfigError("gru_hidden and gru_layers must be >= 1")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")

    @property
    def conv_blocks(self):
        return [(f, 3, p) for f, p in zip(self.conv_filters, self.pool_factors)]

    @property
    def final_freq(self):
        return self.n_mels // int(np.prod(self.pool_factors))

    def scaled(self, **changes) -> "ArchitecturePreset":
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["pool_factors"] = list(self.pool_factors)
        return d


PRESETS = {
    "sed_crnn": ArchitecturePreset("sed_crnn", 40, 5, (64, 64, 64), (5, 4, 2), 64, 1),
    "adapted_sed_crnn": ArchitecturePreset("adapted_sed_crnn", 128, 5, (64, 64, 64), (4, 4, 4), 64, 1),
    "seldnet_sed": ArchitecturePreset("seldnet_sed", 128, 32, (64, 64, 64), (4, 4, 4), 128, 2),
}


def get_preset(name: str, **overrides) -> ArchitecturePreset:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return preset.scaled(**overrides) if overrides else preset


@dataclass
class ModelParams:
    preset: ArchitecturePreset
    species: list
    tensors: dict
    stats: StandardizationStats
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    history_digest: str = ""
    best_epoch: int = 0

    @property
    def n_classes(self):
        return len(self.species)

    @property
    def dtype(self):
        return self.tensors["dense.weight"].dtype

    def trainable(self):
        return [k for k in self.tensors if not k.endswith(("running_mean", "running_var"))]

    def copy(self) -> "ModelParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return replace(self, tensors={k: v.astype(dtype) for k, v in self.tensors.items()})


def gru_input_dim(preset: ArchitecturePreset, layer: int) -> int:
    if layer == 0:
        return preset.conv_filters[-1] * preset.final_freq
    return 2 * preset.gru_hidden


def init_model(preset: ArchitecturePreset, n_classes: int, seed: int = 0, species=None,
               stats: StandardizationStats | None = None, feature_config: FeatureConfig | None = None,
               dtype=np.float32) -> ModelParams:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights and biases; BN at identity."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    t = {}
    cin = 1
    for i, cout in enumerate(preset.conv_filters):
        t[f"conv{i}.weight"] = uniform((cout, cin, 3, 3), cin * 9)
        t[f"conv{i}.bias"] = uniform((cout,), cin * 9)
        t[f"bn{i}.scale"] = np.ones(cout, dtype)
        t[f"bn{i}.shift"] = np.zeros(cout, dtype)
        t[f"bn{i}.running_mean"] = np.zeros(cout, dtype)
        t[f"bn{i}.running_var"] = np.ones(cout, dtype)
        cin = cout
    H = preset.gru_hidden
    for layer in range(preset.gru_layers):
        D = gru_input_dim(preset, layer)
        for d in ("fwd", "bwd"):
            p = f"gru{layer}.{d}"
            t[f"{p}.W"] = uniform((3 * H, D), D)
            t[f"{p}.U"] = uniform((3 * H, H), H)
            t[f"{p}.bx"] = uniform((3 * H,), D)
            t[f"{p}.bh"] = uniform((3 * H,), H)
    t["dense.weight"] = uniform((2 * H, n_classes), 2 * H)
    t["dense.bias"] = uniform((n_classes,), 2 * H)
    species = list(species) if species is not None else [f"class_{k}" for k in range(n_classes)]
    if len(species) != n_classes:
        raise ConfigError("species list length differs from n_classes")
    fc = feature_config or FeatureConfig(n_mels=preset.n_mels, segment_window_s=preset.window_s)
    return ModelParams(preset, species, t, stats or StandardizationStats.identity(preset.n_mels), fc)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward(params: ModelParams, x, mask=None, training=False, bn_momentum=0.9,
            return_logits=False):
    """Frame probabilities ``(B, T, C)`` for features ``(B, T, n_mels)``.

    A 2-D input is treated as a single window and a 2-D result is returned.
    In training mode batch-norm uses masked batch statistics and updates the
    running statistics in ``params`` in place; the cache for :func:`backward`
    is returned as a second value.
    """
    t = params.tensors
    pre = params.preset
    dtype = params.dtype
    single = np.ndim(x) == 2
    x = np.asarray(x, dtype=dtype)
    if single:
        x = x[None]
    if x.shape[2] != pre.n_mels:
        raise ShapeMismatch(f"expected {pre.n_mels} mel bands, got {x.shape[2]}")
    B, T, _ = x.shape
    mask = np.ones((B, T), bool) if mask is None else np.asarray(mask, bool).reshape(B, T)
    caches = []
    h = x[..., None]
    for i, (_, _, pool) in enumerate(pre.conv_blocks):
        h, c_conv = L.conv_forward(h, t[f"conv{i}.weight"], t[f"conv{i}.bias"])
        h, c_bn = L.bn_forward(h, t[f"bn{i}.scale"], t[f"bn{i}.shift"], mask,
                               t[f"bn{i}.running_mean"], t[f"bn{i}.running_var"], training)
        if training:
            _, _, _, _, _, mean, var = c_bn
            rm, rv = t[f"bn{i}.running_mean"], t[f"bn{i}.running_var"]
            rm *= bn_momentum
            rm += (1 - bn_momentum) * mean.astype(rm.dtype)
            rv *= bn_momentum
            rv += (1 - bn_momentum) * var.astype(rv.dtype)
        h, c_relu = L.relu_forward(h)
        h, c_pool = L.freq_pool_forward(h, pool)
        caches.append((c_conv, c_bn, c_relu, c_pool))
    conv_shape = h.shape
    h = h.reshape(B, T, -1)
    gru_caches = []
    for layer in range(pre.gru_layers):
        p = f"gru{layer}"
        hf, cf = L.gru_forward(h, mask, t[f"{p}.fwd.W"], t[f"{p}.fwd.U"], t[f"{p}.fwd.bx"], t[f"{p}.fwd.bh"])
        hb, cb = L.gru_forward(h, mask, t[f"{p}.bwd.W"], t[f"{p}.bwd.U"], t[f"{p}.bwd.bx"], t[f"{p}.bwd.bh"],
                               reverse=True)
        h = np.concatenate([hf, hb], axis=2)
        gru_caches.append((cf, cb))
    logits, c_dense = L.dense_forward(h, t["dense.weight"], t["dense.bias"])
    probs = L.sigmoid(logits)
    out = logits if return_logits else probs
    if single:
        out = out[0]
    if training:
        return out, (caches, conv_shape, gru_caches, c_dense, mask)
    return out


def backward(params: ModelParams, dlogits, cache) -> dict:
    """Gradients of every trainable tensor from the gradient w.r.t. frame logits."""
    t = params.tensors
    pre = params.preset
    caches, conv_shape, gru_caches, c_dense, _ = cache
    grads = {}
    dh, grads["dense.weight"], grads["dense.bias"] = L.dense_backward(dlogits, c_dense)
    H = pre.gru_hidden
    for layer in range(pre.gru_layers - 1, -1, -1):
        p = f"gru{layer}"
        cf, cb = gru_caches[layer]
        dxf, *gf = L.gru_backward(np.ascontiguousarray(dh[..., :H]), cf)
        dxb, *gb = L.gru_backward(np.ascontiguousarray(dh[..., H:]), cb)
        for d, g in (("fwd", gf), ("bwd", gb)):
            for name, val in zip(("W", "U", "bx", "bh"), g):
                grads[f"{p}.{d}.{name}"] = val
        dh = dxf + dxb
    dh = dh.reshape(conv_shape)
    for i in range(len(pre.conv_blocks) - 1, -1, -1):
        c_conv, c_bn, c_relu, c_pool = caches[i]
        dh = L.freq_pool_backward(dh, c_pool)
        dh = L.relu_backward(dh, c_relu)
        dh, grads[f"bn{i}.scale"], grads[f"bn{i}.shift"] = L.bn_backward(dh, c_bn)
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = L.conv_backward(dh, c_conv, need_dx=i > 0)
    return {k: grads[k].astype(t[k].dtype, copy=False) for k in params.trainable()}


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _cell_mask(mask, shape):
    return np.broadcast_to(np.asarray(mask, bool).reshape(shape[:-1] + (1,)), shape)


def bce_loss(probs, targets, mask=None):
    """Mean binary cross-entropy over valid cells, and its gradient w.r.t. ``probs``.

    ``mask`` marks valid rows (frames or segments); it broadcasts over classes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs targets {targets.shape}")
    valid = np.ones(probs.shape, bool) if mask is None else _cell_mask(mask, probs.shape)
    n = int(valid.sum())
    if n == 0:
        raise AllMasked("every cell is masked")
    p = np.clip(probs, PROB_CLIP, 1 - PROB_CLIP)
    cell = -(targets * np.log(p) + (1 - targets) * np.log(1 - p))
    loss = float(cell[valid].sum() / n)
    inside = (probs > PROB_CLIP) & (probs < 1 - PROB_CLIP)
    dprobs = np.where(valid & inside, (p - targets) / (p * (1 - p)), 0.0) / n
    return loss, dprobs


def bce_with_logits(logits, targets, mask=None):
    """Same loss as :func:`bce_loss` on ``sigmoid(logits)``, gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = L.sigmoid(logits)
    loss, _ = bce_loss(probs, targets, mask)
    valid = np.ones(probs.shape, bool) if mask is None else _cell_mask(mask, probs.shape)
    inside = (probs > PROB_CLIP) & (probs < 1 - PROB_CLIP)
    dlogits = np.where(valid & inside, probs - targets, 0.0) / valid.sum()
    return loss, dlogits


def segment_pool(logits, mask, fps):
    """Average frame logits over each block of ``fps`` frames (valid frames only).

    Returns ``(segment_logits, segment_mask, cache)``.
    """
    B, T, C = logits.shape
    if T % fps:
        raise ShapeMismatch(f"{T} frames is not a whole number of {fps}-frame segments")
    m = np.asarray(mask, dtype=logits.dtype).reshape(B, T // fps, fps)
    counts = m.sum(axis=2)
    seg_mask = counts > 0
    safe = np.where(seg_mask, counts, 1.0)
    seg = (logits.reshape(B, T // fps, fps, C) * m[..., None]).sum(axis=2) / safe[..., None]
    return seg, seg_mask, (m, safe, fps)


def segment_pool_backward(dseg, cache):
    m, safe, fps = cache
    d = (dseg / safe[..., None])[:, :, None, :] * m[..., None]
    B, S, _, C = d.shape
    return d.reshape(B, S * fps, C)


def loss_and_grads(params: ModelParams, x, targets, mask, fps: int = 100, bn_momentum=0.9):
    """One training step's loss and gradients (batch-norm in training mode).

    ``targets`` are per-frame ``(B, T, C)`` for the frame head and per-segment
    ``(B, T // fps, C)`` for the segment head.
    """
    logits, cache = forward(params, x, mask, training=True, bn_momentum=bn_momentum, return_logits=True)
    if params.preset.head == "segment":
        seg, seg_mask, pcache = segment_pool(logits, mask, fps)
        loss, dseg = bce_with_logits(seg, targets, seg_mask)
        dlogits = segment_pool_backward(dseg, pcache)
    else:
        loss, dlogits = bce_with_logits(logits, targets, mask)
    return loss, backward(params, dlogits.astype(params.dtype), cache)
