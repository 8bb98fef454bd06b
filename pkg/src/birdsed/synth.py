"""Soundscape synthesis: embed labeled snippets into background recordings.

The plan/render split keeps all randomness in :func:`plan_embeddings`;
rendering is a deterministic sample-wise sum, so the label track is exactly
the list of placements.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import audio_io
from .audio_io import AudioClip
from .errors import ConfigError, DataError, EmptySpeciesPool, PlanOutOfRange, ZeroLengthBackground
from .ingest import SCHEMA_VERSION, PoolManifest, SpeciesList

log = logging.getLogger(__name__)

MAX = "max"
PEAK_TARGET = 0.9


@dataclass(frozen=True)
class GainMode:
    kind: str = "peak_norm_uniform_gain"
    lo: float = 0.25
    hi: float = 1.0
    snr_db: float = 0.0

    def __post_init__(self):
        if self.kind not in ("raw_add", "peak_norm_uniform_gain", "target_snr_db"):
            raise ConfigError(f"unknown gain mode {self.kind!r}")
        if self.kind == "peak_norm_uniform_gain" and not 0 < self.lo <= self.hi <= 1:
            raise ConfigError(f"gain range needs 0 < lo <= hi <= 1, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class SynthesisConfig:
    fill_density: object = 50  # int >= 1 or "max"
    species: SpeciesList | None = None
    seed: int = 0
    gain_mode: GainMode = GainMode()
    clip_policy: str = "hard_clamp"

    def __post_init__(self):
        fd = self.fill_density
        if isinstance(fd, str):
            if fd.lower() != MAX:
                raise ConfigError(f"fill_density must be a positive integer or 'max', got {fd!r}")
            object.__setattr__(self, "fill_density", MAX)
        elif isinstance(fd, bool) or int(fd) != fd or fd < 1:
            raise ConfigError(f"fill_density must be a positive integer or 'max', got {fd!r}")
        else:
            object.__setattr__(self, "fill_density", int(fd))
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if self.clip_policy != "hard_clamp":
            raise ConfigError(f"unknown clip policy {self.clip_policy!r}")


@dataclass(frozen=True)
class Placement:
    pool_index: int
    species_id: int
    start_sample: int
    gain: float
    trimmed_len_samples: int


@dataclass
class EmbeddingPlan:
    placements: list
    background_ref: str = ""
    seed_echo: int = 0
    background_len_samples: int = 0

    def species_counts(self, n_species: int):
        counts = [0] * n_species
        for p in self.placements:
            counts[p.species_id] += 1
        return counts


@dataclass
class LabelTrack:
    events: list  # (species_id, start_s, end_s)
    recording_duration_s: float

    def __post_init__(self):
        self.events = [(int(s), float(a), float(b)) for s, a, b in self.events]
        for s, a, b in self.events:
            if not 0 <= a < b <= self.recording_duration_s + 1e-9:
                raise DataError(f"event ({s}, {a}, {b}) outside [0, {self.recording_duration_s}]")

    def to_csv(self, species: SpeciesList) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["species", "start_s", "end_s"])
        for s, a, b in self.events:
            w.writerow([species.common_names[s], f"{a:.3f}", f"{b:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, species: SpeciesList, duration_s: float) -> "LabelTrack":
        rows = csv.DictReader(io.StringIO(text))
        if rows.fieldnames is None or list(rows.fieldnames)[:3] != ["species", "start_s", "end_s"]:
            raise DataError("label CSV needs header species,start_s,end_s")
        events = []
        for r in rows:
            try:
                sid = species.index_of(r["species"])
            except KeyError:
                raise DataError(f"unknown species {r['species']!r} in label file") from None
            events.append((sid, float(r["start_s"]), min(float(r["end_s"]), duration_s)))
        return cls(events, duration_s)


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def file_seed(seed: int, source_ref: str) -> int:
    return (int(seed) ^ stable_hash64(source_ref)) & (2 ** 64 - 1)


def _gain(mode: GainMode, entry, rng, background_rms):
    if mode.kind == "raw_add":
        return 1.0
    if mode.kind == "peak_norm_uniform_gain":
        u = float(rng.uniform(mode.lo, mode.hi))
        return u * PEAK_TARGET / entry.peak if entry.peak > 0 else u
    if background_rms is None:
        raise ConfigError("target_snr_db gain needs the background RMS")
    if entry.rms <= 0:
        return 0.0
    return background_rms / entry.rms * 10 ** (mode.snr_db / 20)


def plan_embeddings(pool: PoolManifest, background_len_samples: int, cfg: SynthesisConfig,
                    rate: int = audio_io.CANONICAL_RATE, background_rms: float | None = None,
                    background_ref: str = "") -> EmbeddingPlan:
    """Choose snippets, offsets and gains for one background.

    Species are visited round-robin in a seeded random order, so per-species
    counts differ by at most one. In ``max`` mode every usable pool entry is
    placed exactly once, in manifest order.
    """
    if background_len_samples <= 0:
        raise ZeroLengthBackground("background has no samples")
    rng = np.random.default_rng(int(cfg.seed))
    groups = pool.by_species()

    if cfg.fill_density == MAX:
        chosen = [i for g in groups for i in g]
        chosen.sort()
    else:
        for sid, g in enumerate(groups):
            if not g:
                raise EmptySpeciesPool(sid)
        order = rng.permutation(len(groups))
        chosen = []
        for k in range(cfg.fill_density):
            g = groups[order[k % len(groups)]]
            chosen.append(g[int(rng.integers(len(g)))])

    placements = []
    for idx in chosen:
        entry = pool.entries[idx]
        length = entry.canonical_length(rate)
        if length <= 0:
            raise DataError(f"pool entry {entry.source_ref} has no samples")
        trimmed = min(length, background_len_samples)
        start = int(rng.integers(0, background_len_samples - trimmed + 1))
        gain = _gain(cfg.gain_mode, entry, rng, background_rms)
        placements.append(Placement(idx, entry.species_id, start, gain, trimmed))
    return EmbeddingPlan(placements, background_ref, int(cfg.seed), background_len_samples)


def render_mixture(background: AudioClip, plan: EmbeddingPlan, snippets) -> tuple:
    """Sum the planned snippets into ``background`` and clamp to [-1, 1].

    ``snippets`` maps pool index to an :class:`AudioClip` at the background's rate.
    Returns ``(mixture, LabelTrack)``; events follow placement order.
    """
    rate = background.sample_rate
    n = len(background)
    mix = background.samples.copy()
    events = []
    for p in plan.placements:
        end = p.start_sample + p.trimmed_len_samples
        if p.start_sample < 0 or end > n:
            raise PlanOutOfRange(f"placement [{p.start_sample}, {end}) exceeds background of {n} samples")
        snip = snippets[p.pool_index]
        if snip.sample_rate != rate:
            raise PlanOutOfRange(f"snippet {p.pool_index} at {snip.sample_rate} Hz, background at {rate} Hz")
        if len(snip) < p.trimmed_len_samples:
            raise PlanOutOfRange(f"snippet {p.pool_index} shorter than its planned length")
        # sum in float64, round to float32 once per placement
        seg = mix[p.start_sample:end].astype(np.float64)
        seg += p.gain * snip.samples[:p.trimmed_len_samples].astype(np.float64)
        mix[p.start_sample:end] = seg
        events.append((p.species_id, p.start_sample / rate, end / rate))
    np.clip(mix, -1.0, 1.0, out=mix)
    out = AudioClip(mix, rate, background.source_id)
    return out, LabelTrack(events, n / rate)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class DatasetRecord:
    audio: str
    labels: str
    duration_s: float
    background_ref: str
    seed: int
    n_events: int


@dataclass
class DatasetManifest:
    species: SpeciesList
    records: list = field(default_factory=list)
    root: Path | None = None
    info: dict = field(default_factory=dict)

    def dumps(self) -> str:
        header = {"schema_version": SCHEMA_VERSION, "kind": "dataset",
                  "species": self.species.to_json(), **self.info}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "dataset_manifest.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        header = json.loads(lines[0])
        if header.get("schema_version") != SCHEMA_VERSION or header.get("kind") != "dataset":
            raise DataError(f"{path} is not a dataset manifest")
        info = {k: v for k, v in header.items() if k not in ("schema_version", "kind", "species")}
        records = [DatasetRecord(**json.loads(ln)) for ln in lines[1:]]
        return cls(SpeciesList(header["species"]), records, path.parent, info)

    def audio_path(self, rec: DatasetRecord) -> Path:
        return self.root / rec.audio

    def load_track(self, rec: DatasetRecord) -> LabelTrack:
        text = (self.root / rec.labels).read_text(encoding="utf-8")
        return LabelTrack.from_csv(text, self.species, rec.duration_s)


def synth_dataset(backgrounds: PoolManifest, pool: PoolManifest, cfg: SynthesisConfig, out_dir,
                  pool_root, background_root, jobs: int = 1,
                  rate: int = audio_io.CANONICAL_RATE) -> DatasetManifest:
    """Render one labeled soundscape per background file into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    species = cfg.species or pool.species
    if backgrounds.entries and not pool.usable():
        raise DataError("labeled pool is empty")
    cache = {}

    def snippet(idx):
        if idx not in cache:
            cache[idx] = audio_io.read_wav(Path(pool_root) / pool.entries[idx].local_path, rate)
        return cache[idx]

    def one(entry):
        bg = audio_io.read_wav(Path(background_root) / entry.local_path, rate)
        seed = file_seed(cfg.seed, entry.source_ref)
        rms = float(np.sqrt(np.mean(bg.samples.astype(np.float64) ** 2))) if len(bg) else 0.0
        plan = plan_embeddings(pool, len(bg), replace(cfg, seed=seed), rate, rms, entry.source_ref)
        mix, track = render_mixture(bg, plan, {p.pool_index: snippet(p.pool_index) for p in plan.placements})
        stem = Path(entry.local_path).stem
        audio_io.write_wav(out_dir / f"{stem}_synth.wav", mix)
        (out_dir / f"{stem}_labels.csv").write_text(track.to_csv(species), encoding="utf-8")
        return DatasetRecord(f"{stem}_synth.wav", f"{stem}_labels.csv", track.recording_duration_s,
                             entry.source_ref, seed, len(track.events))

    usable = backgrounds.usable()
    # warm the cache serially so worker threads only read it
    if jobs > 1:
        for i in range(len(pool.entries)):
            if pool.entries[i].status == "ok":
                snippet(i)
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(one, usable))
    else:
        records = [one(e) for e in usable]
    info = {"fill_density": cfg.fill_density, "seed": int(cfg.seed), "sample_rate": rate,
            "gain_mode": asdict(cfg.gain_mode)}
    manifest = DatasetManifest(species, records, out_dir, info)
    manifest.save()
    return manifest
