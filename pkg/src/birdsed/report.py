"""Per-second prediction timelines and their static exports."""

from __future__ import annotations

import csv
import html
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeMismatch


@dataclass
class PredictionTimeline:
    """Row ``t`` covers ``[t, t + 1)`` seconds of the recording."""

    recording_id: str
    species: list
    probs: np.ndarray  # T x C
    threshold: float | None = 0.5
    stored_flags: np.ndarray | None = None  # flags read from a file; used when threshold is None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[1] != len(self.species):
            raise ShapeMismatch(f"{self.probs.shape} probabilities for {len(self.species)} species")
        if self.threshold is None and (self.stored_flags is None or self.stored_flags.shape != self.probs.shape):
            raise ShapeMismatch("a timeline without a threshold needs a flag matrix of the same shape")

    @property
    def flags(self) -> np.ndarray:
        if self.threshold is None:
            return self.stored_flags.astype(np.uint8)
        return (self.probs >= self.threshold).astype(np.uint8)

    def __len__(self):
        return self.probs.shape[0]

    def header(self):
        cols = ["t_start_s", "t_end_s"]
        for name in self.species:
            cols += [f"{name}_prob", f"{name}_flag"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        flags = self.flags
        for t in range(len(self)):
            row = [t, t + 1]
            for c in range(len(self.species)):
                row += [f"{self.probs[t, c]:.6f}", int(flags[t, c])]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, recording_id: str = "", threshold: float | None = None) -> "PredictionTimeline":
        """Parse a timeline CSV.

        With ``threshold=None`` the flag columns are kept as written; otherwise
        flags are recomputed from the probabilities.
        """
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise DataError("empty timeline file")
        head = rows[0]
        if head[:2] != ["t_start_s", "t_end_s"] or (len(head) - 2) % 2:
            raise DataError("not a timeline CSV")
        species = [h[: -len("_prob")] for h in head[2::2]]
        probs = np.array([[float(v) for v in r[2::2]] for r in rows[1:]]).reshape(-1, len(species))
        flags = np.array([[int(v) for v in r[3::2]] for r in rows[1:]]).reshape(-1, len(species))
        for t, r in enumerate(rows[1:]):
            if (float(r[0]), float(r[1])) != (t, t + 1):
                raise DataError(f"timeline rows must be contiguous 1-second steps (row {t + 1})")
        return cls(recording_id, species, probs, threshold, flags.astype(np.uint8))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, threshold: float | None = None) -> "PredictionTimeline":
        path = Path(path)
        rid = path.stem.removesuffix("_timeline")
        return cls.from_csv(path.read_text(encoding="utf-8"), rid, threshold)


def _threshold_text(tl) -> str:
    return "flags as exported" if tl.threshold is None else f"threshold {tl.threshold:g}"


def _shade(p: float) -> str:
    # white -> dark green
    lo, hi = np.array([255, 255, 255]), np.array([0, 100, 40])
    r, g, b = (lo + (hi - lo) * float(np.clip(p, 0, 1))).round().astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


CSS = """
body { font-family: sans-serif; margin: 1.5em; }
table.heat { border-collapse: collapse; font-size: 11px; margin-bottom: 2em; }
table.heat th { font-weight: normal; padding: 0 4px; text-align: right; white-space: nowrap; }
table.heat td { width: 12px; height: 16px; padding: 0; }
table.heat td.on { outline: 1px solid #000; outline-offset: -1px; }
table.heat tr.axis td { font-size: 9px; color: #666; }
"""


def timeline_table(tl: PredictionTimeline) -> str:
    out = ['<table class="heat">']
    flags = tl.flags
    for c, name in enumerate(tl.species):
        cells = []
        for t in range(len(tl)):
            p = tl.probs[t, c]
            cls = ' class="on"' if flags[t, c] else ""
            cells.append(f'<td{cls} style="background:{_shade(p)}" title="{t}-{t + 1} s: {p:.3f}"></td>')
        out.append(f"<tr><th>{html.escape(name)}</th>{''.join(cells)}</tr>")
    ticks = "".join(f"<td>{t if t % 10 == 0 else ''}</td>" for t in range(len(tl)))
    out.append(f'<tr class="axis"><th>s</th>{ticks}</tr>')
    out.append("</table>")
    return "\n".join(out)


def render_html(timelines, title="Detections", images=None) -> str:
    """One self-contained page; ``images`` maps recording id to a relative PNG path."""
    images = images or {}
    parts = [f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{html.escape(title)}</title>",
             f"<style>{CSS}</style></head><body>", f"<h1>{html.escape(title)}</h1>"]
    for tl in timelines:
        n_det = int(tl.flags.sum())
        parts.append(f"<h2>{html.escape(tl.recording_id)}</h2>")
        parts.append(f"<p>{len(tl)} s, {_threshold_text(tl)}, {n_det} flagged species-seconds</p>")
        parts.append(timeline_table(tl))
        if tl.recording_id in images:
            parts.append(f'<p><img src="{html.escape(images[tl.recording_id])}" alt="timeline"></p>')
    parts.append("</body></html>\n")
    return "\n".join(parts)
