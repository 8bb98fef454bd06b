"""Experiment configuration file (YAML).

Relative paths are resolved against the directory holding the config file.
``to_dict(load(...))`` is a fixpoint: loading what was dumped gives the same
configuration back.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .crnn.model import PRESETS, ArchitecturePreset, get_preset
from .crnn.train import TrainConfig
from .errors import ConfigError
from .features import FeatureConfig
from .ingest import DEFAULT_SPECIES, QUALITY_GRADES, XENO_CANTO_API, SpeciesList
from .synth import GainMode, SynthesisConfig


@dataclass
class ArchiveConfig:
    base_url: str = XENO_CANTO_API
    queries: list = field(default_factory=list)  # empty: one query per species common name
    quality: list = field(default_factory=lambda: list(QUALITY_GRADES[:5]))
    params: dict = field(default_factory=dict)


@dataclass
class PoolsConfig:
    labeled: str = "pool"
    backgrounds: str = "backgrounds"
    archive: ArchiveConfig = field(default_factory=ArchiveConfig)


@dataclass
class ModelConfig:
    preset: str = "adapted_sed_crnn"
    overrides: dict = field(default_factory=dict)  # preset name -> field overrides

    def architecture(self, name: str | None = None) -> ArchitecturePreset:
        name = name or self.preset
        return get_preset(name, **self.overrides.get(name, {}))


@dataclass
class EvalConfig:
    threshold: float = 0.5
    field_threshold: float = 0.1
    thresholds: list | None = None
    audio: list = field(default_factory=list)
    labels: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    species: SpeciesList = DEFAULT_SPECIES
    pools: PoolsConfig = field(default_factory=PoolsConfig)
    synthesis: dict = field(default_factory=lambda: {"fill_density": 50, "gain_mode": asdict(GainMode())})
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_root: str = "runs"
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False)

    # -- derived objects -------------------------------------------------
    def synthesis_config(self, fill_density=None) -> SynthesisConfig:
        gm = GainMode(**self.synthesis.get("gain_mode", {}))
        fd = self.synthesis.get("fill_density", 50) if fill_density is None else fill_density
        return SynthesisConfig(fd, self.species, self.seed, gm)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": self.seed})

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def out(self) -> Path:
        return self.path(self.output_root)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "species": self.species.to_json(),
            "pools": asdict(self.pools),
            "synthesis": json.loads(json.dumps(self.synthesis)),
            "features": asdict(self.features),
            "model": {"preset": self.model.preset,
                      "overrides": {k: _plain(v) for k, v in self.model.overrides.items()}},
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "output_root": self.output_root,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)} - {"base_dir"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        cfg = cls(base_dir=Path(base_dir))
        if "species" in d:
            cfg.species = _wrap("species", lambda: SpeciesList.from_names(d["species"]))
        if "pools" in d:
            pools = dict(d["pools"] or {})
            archive = _build("pools.archive", ArchiveConfig, pools.pop("archive", {}) or {})
            cfg.pools = _build("pools", PoolsConfig, {**pools, "archive": archive})
            for i, q in enumerate(cfg.pools.archive.quality):
                if q not in QUALITY_GRADES:
                    raise ConfigError(f"pools.archive.quality[{i}]: unknown grade {q!r}")
        if "synthesis" in d:
            syn = dict(d["synthesis"] or {})
            unknown = set(syn) - {"fill_density", "gain_mode"}
            if unknown:
                raise ConfigError(f"synthesis: unknown keys {sorted(unknown)}")
            cfg.synthesis = {"fill_density": syn.get("fill_density", 50),
                             "gain_mode": asdict(_build("synthesis.gain_mode", GainMode, syn.get("gain_mode", {})))}
            _wrap("synthesis.fill_density", lambda: SynthesisConfig(cfg.synthesis["fill_density"]))
        if "features" in d:
            cfg.features = _build("features", FeatureConfig, d["features"])
        if "model" in d:
            cfg.model = _build("model", ModelConfig, d["model"])
            if cfg.model.preset not in PRESETS:
                raise ConfigError(f"model.preset: unknown preset {cfg.model.preset!r}")
            for name, ov in cfg.model.overrides.items():
                _wrap(f"model.overrides.{name}", lambda: get_preset(name, **ov))
        if "train" in d:
            cfg.train = _build("train", TrainConfig, d["train"])
        if "eval" in d:
            cfg.eval = _build("eval", EvalConfig, d["eval"])
        cfg.output_root = str(d.get("output_root", cfg.output_root))
        cfg.seed = _wrap("seed", lambda: int(d.get("seed", 0)))
        if not 0 <= cfg.seed < 2 ** 63:
            raise ConfigError("seed: must be a nonnegative 63-bit integer")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, path.parent)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def _plain(v):
    return json.loads(json.dumps(v))


def _wrap(where, fn):
    try:
        return fn()
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build(where, cls, value):
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return _wrap(where, lambda: cls(**value))
