"""Segment-level multi-label metrics and threshold sweeps.

Precision, recall and F1 that would divide by zero are reported as ``None``
(rendered ``—``) rather than 0, unless ``coerce_zero`` is requested.
Pooled figures are micro-averages: counts are summed over species first.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import labelgrid
from .errors import ShapeMismatch, SpeciesListMismatch

UNDEFINED = "—"
DEFAULT_THRESHOLDS = tuple(round(0.01 * k, 2) for k in range(101))


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ConfusionCounts:
    per_species: tuple
    pooled: Counts


@dataclass(frozen=True)
class MetricSet:
    precision: float | None
    recall: float | None
    f1: float | None
    accuracy: float | None

    def coerced(self) -> "MetricSet":
        return MetricSet(*(0.0 if v is None else v for v in asdict(self).values()))


def binarize(probs, threshold: float) -> np.ndarray:
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    tn = (~pred & ~truth).sum(axis=0)
    per = tuple(Counts(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, fp, fn, tn))
    pooled = Counts(int(tp.sum()), int(fp.sum()), int(fn.sum()), int(tn.sum()))
    return ConfusionCounts(per, pooled)


def metrics(counts: Counts) -> MetricSet:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = None
    accuracy = (tp + tn) / counts.total if counts.total else None
    return MetricSet(precision, recall, f1, accuracy)


def f1_from(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall)


@dataclass
class SweepCurve:
    points: list  # (threshold, MetricSet)

    def best(self):
        """(threshold, MetricSet) with the highest defined F1; the lowest threshold wins ties."""
        scored = [(m.f1, -i) for i, (_, m) in enumerate(self.points) if m.f1 is not None]
        if not scored:
            return None
        _, neg_i = max(scored)
        return self.points[-neg_i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall", "f1", "accuracy"])
        for tau, m in self.points:
            w.writerow([f"{tau:.2f}"] + [_fmt(getattr(m, k)) for k in ("precision", "recall", "f1", "accuracy")])
        return buf.getvalue()


def sweep(probs, truth, thresholds=DEFAULT_THRESHOLDS) -> SweepCurve:
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    return SweepCurve([(t, metrics(confusion(binarize(probs, t), truth).pooled)) for t in thresholds])


@dataclass
class EvaluationReport:
    species: list
    threshold: float
    counts: ConfusionCounts
    per_species: list  # MetricSet per species
    pooled: MetricSet

    def rows(self, coerce_zero=False):
        out = []
        for name, c, m in zip(self.species + ["pooled"], self.counts.per_species + (self.counts.pooled,),
                              self.per_species + [self.pooled]):
            m = m.coerced() if coerce_zero else m
            out.append({"species": name, "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, **asdict(m)})
        return out

    def to_csv(self, coerce_zero=False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ["species", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "accuracy"]
        w.writerow(keys)
        for r in self.rows(coerce_zero):
            w.writerow([r["species"], r["tp"], r["fp"], r["fn"], r["tn"]] + [_fmt(r[k]) for k in keys[5:]])
        return buf.getvalue()

    def to_json(self, coerce_zero=False) -> str:
        return json.dumps({"threshold": self.threshold, "rows": self.rows(coerce_zero)}, indent=2, sort_keys=True)


def _fmt(v):
    return UNDEFINED if v is None else f"{v:.6f}"


def report_from_matrices(probs, truth, threshold: float, species) -> EvaluationReport:
    counts = confusion(binarize(probs, threshold), truth)
    return EvaluationReport(list(species), threshold, counts,
                            [metrics(c) for c in counts.per_species], metrics(counts.pooled))


def evaluate_recording(model_output, truth_track, threshold: float, species, truth_species=None) -> EvaluationReport:
    """Per-species and pooled metrics of a T x C probability matrix against a label track."""
    species = list(species)
    if truth_species is not None and list(truth_species) != species:
        raise SpeciesListMismatch(f"model species {species} vs truth species {list(truth_species)}")
    probs = np.asarray(model_output)
    if probs.ndim != 2 or probs.shape[1] != len(species):
        raise SpeciesListMismatch(f"{probs.shape} output for {len(species)} species")
    truth = labelgrid.to_segment_matrix(truth_track, len(species))
    if truth.shape != probs.shape:
        raise ShapeMismatch(f"{probs.shape[0]} predicted seconds vs {truth.shape[0]} labeled")
    return report_from_matrices(probs, truth, threshold, species)
