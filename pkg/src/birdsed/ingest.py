"""Labeled snippet pools and background pools: archive client and manifests.

A pool manifest is a JSON-lines file. Line one is a header record
(``schema_version``, ``pool_kind``, ``species``, ``created_at``); each further
line is one :class:`PoolEntry`. Entries are always written sorted by
``(species_id, source_ref)`` so a manifest is a pure function of its inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import audio_io
from .errors import (ArchiveSchemaChanged, ChecksumMismatch, DataError, NetworkError,
                     UnknownSpeciesDirectory)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
QUALITY_GRADES = ("A", "B", "C", "D", "E", "Unrated")
BACKGROUND = -1  # species_id sentinel for background pools
LABELED = "labeled_snippets"
BACKGROUNDS = "backgrounds"

# Six-species pool with the per-species record counts of the reference export.
REFERENCE_SPECIES = (
    ("Brown-hooded Kingfisher", "Halcyon albiventris"),
    ("Dark-capped Bulbul", "Pycnonotus tricolor"),
    ("Hadada Ibis", "Bostrychia hagedash"),
    ("Olive Thrush", "Turdus olivaceus"),
    ("Red-eyed Dove", "Streptopelia semitorquata"),
    ("Village Weaver", "Ploceus cucullatus"),
)
REFERENCE_POOL_COUNTS = (70, 346, 177, 49, 129, 134)

XENO_CANTO_API = "https://xeno-canto.org/api/2/recordings"


def snake_case(name: str) -> str:
    return re.sub(r"[^0-9a-z]+", "_", name.lower()).strip("_")


@dataclass(frozen=True)
class SpeciesList:
    entries: tuple

    def __post_init__(self):
        entries = tuple((str(c), str(l)) for c, l in self.entries)
        if not entries:
            raise DataError("species list must not be empty")
        commons = [c for c, _ in entries]
        if len(set(commons)) != len(commons) or len(set(map(snake_case, commons))) != len(commons):
            raise DataError("species names must be unique")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_names(cls, names):
        return cls(tuple((n, "") if isinstance(n, str) else tuple(n) for n in names))

    def __len__(self):
        return len(self.entries)

    @property
    def common_names(self):
        return [c for c, _ in self.entries]

    def index_of(self, name: str) -> int:
        key = snake_case(name)
        for i, (common, latin) in enumerate(self.entries):
            if key in (snake_case(common), snake_case(latin)):
                return i
        raise KeyError(name)

    def to_json(self):
        return [list(e) for e in self.entries]


DEFAULT_SPECIES = SpeciesList(REFERENCE_SPECIES)


@dataclass
class PoolEntry:
    species_id: int
    source_ref: str
    quality: str = "Unrated"
    duration_s: float = 0.0
    local_path: str = ""
    n_samples: int = 0
    sample_rate: int = 0
    peak: float = 0.0
    rms: float = 0.0
    sha256: str = ""
    status: str = "ok"
    error: str = ""

    def __post_init__(self):
        if self.quality not in QUALITY_GRADES:
            raise DataError(f"unknown quality grade {self.quality!r}")
        if self.duration_s < 0:
            raise DataError("duration_s must be nonnegative")

    def canonical_length(self, rate: int) -> int:
        """Sample count after resampling to ``rate`` (same rounding as audio_io.resample)."""
        if self.sample_rate == rate or self.sample_rate == 0:
            return self.n_samples
        return int(round(self.n_samples * rate / self.sample_rate))


@dataclass
class PoolManifest:
    species: SpeciesList
    entries: list = field(default_factory=list)
    pool_kind: str = LABELED
    created_at: str = "1970-01-01T00:00:00Z"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pool_kind not in (LABELED, BACKGROUNDS):
            raise DataError(f"unknown pool kind {self.pool_kind!r}")
        for e in self.entries:
            if self.pool_kind == LABELED and not 0 <= e.species_id < len(self.species):
                raise DataError(f"species_id {e.species_id} out of range for {e.source_ref}")
            if self.pool_kind == BACKGROUNDS and e.species_id != BACKGROUND:
                raise DataError("background entries must carry species_id -1")
        self.entries = sorted(self.entries, key=lambda e: (e.species_id, e.source_ref))

    def usable(self):
        return [e for e in self.entries if e.status == "ok"]

    def by_species(self):
        groups = [[] for _ in range(len(self.species))]
        for i, e in enumerate(self.entries):
            if e.status == "ok" and e.species_id >= 0:
                groups[e.species_id].append(i)
        return groups

    def dumps(self) -> str:
        header = {"schema_version": SCHEMA_VERSION, "pool_kind": self.pool_kind,
                  "created_at": self.created_at, "species": self.species.to_json()}
        header.update(self.extra)
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def loads(cls, text: str) -> "PoolManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise DataError("empty manifest")
        header = json.loads(lines[0])
        if header.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported manifest schema {header.get('schema_version')!r}")
        extra = {k: v for k, v in header.items()
                 if k not in ("schema_version", "pool_kind", "created_at", "species")}
        return cls(SpeciesList(header["species"]), [PoolEntry(**json.loads(ln)) for ln in lines[1:]],
                   header["pool_kind"], header["created_at"], extra)

    @classmethod
    def load(cls, path) -> "PoolManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def describe_wav(path, species_id: int, source_ref: str, quality="Unrated", root=None) -> PoolEntry:
    """Build a manifest entry by decoding ``path`` (levels measured at the file's own rate)."""
    path = Path(path)
    clip = audio_io.decode_wav(path.read_bytes(), source_id=path.name)
    x = clip.samples.astype(np.float64)
    return PoolEntry(
        species_id=species_id, source_ref=source_ref, quality=quality,
        duration_s=clip.duration_seconds,
        local_path=str(path.relative_to(root)) if root is not None else str(path),
        n_samples=len(clip), sample_rate=clip.sample_rate,
        peak=float(np.abs(x).max()) if len(x) else 0.0,
        rms=float(np.sqrt(np.mean(x * x))) if len(x) else 0.0,
        sha256=_sha256(path))


def build_pool_manifest(root, species: SpeciesList, layout: str = LABELED,
                        created_at: str | None = None) -> PoolManifest:
    """Scan a pool directory.

    ``layout`` is ``"labeled_snippets"`` (``<root>/<species_snake_case>/*.wav``) or
    ``"backgrounds"`` (``<root>/background/*.wav``, or ``<root>/*.wav`` when that
    subdirectory is absent). ``local_path`` is stored relative to ``root``.
    Unreadable files are skipped and counted in the header's ``skipped``.
    """
    root = Path(root)
    files = []  # (species_id, path)
    if layout == LABELED:
        names = {snake_case(c): i for i, c in enumerate(species.common_names)}
        for sub in sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []:
            if sub.name == "background":
                continue
            if sub.name not in names:
                raise UnknownSpeciesDirectory(f"{sub} does not name a species in the list")
            files += [(names[sub.name], f) for f in sorted(sub.glob("*.wav"))]
    elif layout == BACKGROUNDS:
        bg = root / "background"
        src = bg if bg.is_dir() else root
        files = [(BACKGROUND, f) for f in sorted(src.glob("*.wav"))] if src.exists() else []
    else:
        raise DataError(f"unknown layout {layout!r}")

    entries, skipped, newest = [], 0, 0.0
    for sid, f in files:
        try:
            entries.append(describe_wav(f, sid, f.stem, root=root))
        except (DataError, OSError) as exc:
            log.warning("skipping unreadable %s: %s", f, exc)
            skipped += 1
            continue
        newest = max(newest, f.stat().st_mtime)
    if created_at is None:
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        created_at = _iso(float(epoch) if epoch else newest)
    extra = {"skipped": skipped} if skipped else {}
    return PoolManifest(species, entries, layout, created_at, extra)


# ---------------------------------------------------------------------------
# Archive client
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RemoteRecording:
    catalog_id: str
    species: str
    quality: str
    url: str
    duration_s: float


def parse_length(text: str) -> float:
    """'m:ss' or 'h:mm:ss' to seconds."""
    seconds = 0.0
    for part in str(text).split(":"):
        seconds = seconds * 60 + float(part or 0)
    return seconds


def _quality(q) -> str:
    q = (q or "").strip().upper()
    return q if q in ("A", "B", "C", "D", "E") else "Unrated"


def _descriptor(rec: dict) -> RemoteRecording:
    missing = [k for k in ("id", "en", "q", "file", "length") if k not in rec]
    if missing:
        raise ArchiveSchemaChanged(f"archive record lacks fields {missing}")
    url = rec["file"]
    if url.startswith("//"):
        url = "https:" + url
    return RemoteRecording(str(rec["id"]), rec["en"], _quality(rec["q"]), url, parse_length(rec["length"]))


def query_archive(species_query: str, quality_filter, session=None, base_url: str = XENO_CANTO_API,
                  extra_params: dict | None = None, timeout: float = 30.0) -> list:
    """All archive records matching ``species_query`` whose grade is in ``quality_filter``.

    Follows ``page``/``numPages`` paging. ``session`` is anything with a
    ``requests``-style ``get``; recorded fixtures substitute for the network in tests.
    """
    quality_filter = set(quality_filter)
    if not quality_filter:
        return []
    if not species_query.strip():
        raise DataError("species query must not be empty")
    if session is None:
        import requests
        session = requests.Session()

    found, page, pages = [], 1, 1
    while page <= pages:
        params = {"query": species_query, "page": page}
        params.update(extra_params or {})
        try:
            resp = session.get(base_url, params=params, timeout=timeout)
        except Exception as exc:  # requests raises its own hierarchy
            raise NetworkError(f"archive query failed: {exc}") from exc
        if resp.status_code != 200:
            raise NetworkError(f"archive returned HTTP {resp.status_code}")
        body = resp.json()
        if "recordings" not in body or "numPages" not in body:
            raise ArchiveSchemaChanged("response lacks 'recordings' or 'numPages'")
        pages = int(body["numPages"])
        found += [d for d in map(_descriptor, body["recordings"]) if d.quality in quality_filter]
        page += 1
    return found


def download_pool(descriptors, dest_dir, species: SpeciesList, session=None, jobs: int = 4,
                  target_rate: int = audio_io.CANONICAL_RATE, timeout: float = 60.0) -> PoolManifest:
    """Fetch, convert to canonical WAV and catalog ``descriptors`` under ``dest_dir``.

    Files already listed with a matching checksum in ``dest_dir/pool_manifest.jsonl``
    are not fetched again. Per-entry failures are recorded (``status="failed"``)
    and do not stop the run.
    """
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    manifest_path = dest / "pool_manifest.jsonl"
    previous = {}
    if manifest_path.exists():
        previous = {e.source_ref: e for e in PoolManifest.load(manifest_path).entries if e.status == "ok"}
    if session is None and descriptors:
        import requests
        session = requests.Session()

    known, unknown = [], 0
    for d in descriptors:
        try:
            known.append((species.index_of(d.species), d))
        except KeyError:
            log.warning("skipping XC%s: %r is not in the species list", d.catalog_id, d.species)
            unknown += 1

    def fetch(item) -> PoolEntry:
        sid, d = item
        ref = f"XC{d.catalog_id}"
        rel = Path(snake_case(species.common_names[sid])) / f"{ref}.wav"
        path = dest / rel
        old = previous.get(ref)
        if old is not None and path.exists():
            try:
                if _sha256(path) != old.sha256:
                    raise ChecksumMismatch(f"{path} differs from recorded checksum")
                return old
            except ChecksumMismatch as exc:
                log.warning("%s; fetching again", exc)
        try:
            try:
                resp = session.get(d.url, timeout=timeout)
            except Exception as exc:
                raise NetworkError(str(exc)) from exc
            if resp.status_code != 200:
                raise NetworkError(f"HTTP {resp.status_code} for {d.url}")
            clip = audio_io.decode_wav(resp.content, source_id=ref)
            clip = audio_io.resample(clip, target_rate).clamp()
            path.parent.mkdir(parents=True, exist_ok=True)
            audio_io.write_wav(path, clip)
            entry = describe_wav(path, sid, ref, d.quality, root=dest)
            return entry
        except (NetworkError, DataError) as exc:
            log.warning("failed to fetch %s: %s", ref, exc)
            return PoolEntry(sid, ref, d.quality, 0.0, str(rel), status="failed", error=str(exc))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        entries = list(pool.map(fetch, known))
    stamp = max([0.0] + [(dest / e.local_path).stat().st_mtime for e in entries if e.status == "ok"])
    manifest = PoolManifest(species, entries, LABELED, _iso(stamp), {"skipped": unknown} if unknown else {})
    manifest.save(manifest_path)
    return manifest
