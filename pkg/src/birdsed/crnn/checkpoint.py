"""Checkpoint files.

Layout: the 8-byte magic ``BSEDCKPT``, a little-endian uint64 header length,
a UTF-8 JSON header, then every tensor as little-endian float32 row-major in
the order listed in the header's ``tensors`` manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..features import FeatureConfig, StandardizationStats
from .model import ArchitecturePreset, ModelParams

MAGIC = b"BSEDCKPT"
SCHEMA_VERSION = 1


def dumps(params: ModelParams) -> bytes:
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()]
    header = {
        "schema_version": SCHEMA_VERSION,
        "preset": params.preset.to_dict(),
        "species": list(params.species),
        "feature_config": asdict(params.feature_config),
        "stats": {"mean": params.stats.mean.tolist(), "std": params.stats.std.tolist()},
        "history_digest": params.history_digest,
        "best_epoch": params.best_epoch,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.tensors.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + blobs


def loads(raw: bytes) -> ModelParams:
    if raw[:8] != MAGIC:
        raise DataError("not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported checkpoint schema {header.get('schema_version')!r}")
    offset = 16 + n
    tensors = {}
    for item in header["tensors"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise DataError("checkpoint truncated")
        tensors[item["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise DataError("trailing bytes after the last tensor")
    return ModelParams(
        preset=ArchitecturePreset(**header["preset"]),
        species=header["species"],
        tensors=tensors,
        stats=StandardizationStats(np.array(header["stats"]["mean"]), np.array(header["stats"]["std"])),
        feature_config=FeatureConfig(**header["feature_config"]),
        history_digest=header["history_digest"],
        best_epoch=header.get("best_epoch", 0),
    )


def save(path, params: ModelParams) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params))
    return path


def load(path) -> ModelParams:
    return loads(Path(path).read_bytes())
