"""Accuracy, precision-recall curves and the occlusion probe."""

from __future__ import annotations

import csv
import json
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence

import numpy as np

from .data import MISSING, Dataset
from .errors import ConfigurationError, UndefinedMetricError
from .models import predict

RECALL_GRID = np.round(np.arange(21) * 0.05, 10)


def display_round(value: float, places: int = 2) -> float:
    """Half-up rounding of the shortest decimal form (``75.565 -> 75.57``)."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


def _label_array(labels) -> np.ndarray:
    return np.array([MISSING if v is None else v for v in labels], dtype=np.int64)


def attribute_accuracy(predictions, labels) -> float:
    """Percentage of correct predictions over samples whose label is present."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    lab = _label_array(labels)
    if pred.shape != lab.shape:
        raise ConfigurationError(f"{pred.size} predictions for {lab.size} labels")
    present = lab != MISSING
    if not present.any():
        raise UndefinedMetricError("no labelled samples to score")
    return 100.0 * float(np.sum(pred[present] == lab[present])) / float(present.sum())


def overall_accuracy(per_attribute: Sequence[float]) -> float:
    """Unweighted mean of per-attribute accuracies."""
    vals = list(per_attribute)
    if not vals:
        raise UndefinedMetricError("overall accuracy of an empty attribute list")
    return float(sum(vals) / len(vals))


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def _column(scores, cls) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    return s[:, cls] if s.ndim == 2 else s.reshape(-1)


def precision_recall_curve(scores, labels, cls: int) -> list[PRPoint]:
    """One-vs-rest PR points at each distinct score, thresholds ascending.

    A sample counts as predicted positive when its score is ``>=`` the
    threshold. ``scores`` is either ``N x C`` or the ``N`` scores of ``cls``.
    """
    s = _column(scores, cls)
    pos = np.asarray(labels, dtype=np.int64).reshape(-1) == cls
    total_pos = int(pos.sum())
    if total_pos == 0:
        raise UndefinedMetricError(f"class {cls} has no positive samples")
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    points = [PRPoint(float(s_sorted[e]), int(tp[e]) / (int(tp[e]) + int(fp[e])),
                      int(tp[e]) / total_pos) for e in ends]
    return points[::-1]


def precision_recall_brute_force(scores, labels, cls: int) -> list[PRPoint]:
    """Reference implementation: recount at every distinct threshold."""
    s = _column(scores, cls)
    pos = np.asarray(labels, dtype=np.int64).reshape(-1) == cls
    total_pos = int(pos.sum())
    if total_pos == 0:
        raise UndefinedMetricError(f"class {cls} has no positive samples")
    out = []
    for t in sorted(set(s.tolist())):
        predicted = s >= t
        tp = int(np.sum(predicted & pos))
        fp = int(np.sum(predicted & ~pos))
        out.append(PRPoint(float(t), tp / (tp + fp), tp / total_pos))
    return out


def interpolated_precision(curve: Sequence[PRPoint], grid=RECALL_GRID) -> np.ndarray:
    """Highest precision reached at recall >= r, for each grid recall r."""
    rec = np.array([p.recall for p in curve])
    prec = np.array([p.precision for p in curve])
    out = np.zeros(len(grid))
    for i, r in enumerate(grid):
        mask = rec >= r - 1e-12
        out[i] = prec[mask].max() if mask.any() else 0.0
    return out


@dataclass
class MacroPR:
    grid: np.ndarray
    precision: np.ndarray
    curves: "OrderedDict[int, list[PRPoint]]"


def macro_average(curves: Sequence[Sequence[PRPoint]], grid=RECALL_GRID) -> np.ndarray:
    if not curves:
        raise UndefinedMetricError("no curves to average")
    return np.mean([interpolated_precision(c, grid) for c in curves], axis=0)


def macro_pr(scores, labels, num_classes: int, grid=RECALL_GRID) -> MacroPR:
    """Per-class curves and their grid average; classes without positives are skipped."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    curves = OrderedDict()
    for c in range(num_classes):
        if not np.any(labels == c):
            warnings.warn(f"class {c} has no positive samples; left out of the macro average")
            continue
        curves[c] = precision_recall_curve(scores, labels, c)
    return MacroPR(np.asarray(grid), macro_average(list(curves.values()), grid), curves)


@dataclass
class EvalReport:
    per_attribute: "OrderedDict[str, float]"
    counts: "OrderedDict[str, int]"
    pr: "OrderedDict[str, MacroPR]" = field(default_factory=OrderedDict)

    @property
    def overall(self) -> float:
        return overall_accuracy(list(self.per_attribute.values()))

    def to_dict(self) -> dict:
        return {
            "per_attribute": {a: v for a, v in self.per_attribute.items()},
            "per_attribute_display": {a: display_round(v) for a, v in self.per_attribute.items()},
            "overall": self.overall,
            "overall_display": display_round(self.overall),
            "counts": dict(self.counts),
            "pr_macro": {a: {"recall": m.grid.tolist(), "precision": m.precision.tolist()}
                         for a, m in self.pr.items()},
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def pr_rows(self, schema=None) -> list[tuple]:
        rows = []
        for attr, m in self.pr.items():
            for c, curve in m.curves.items():
                name = schema[attr].class_names[c] if schema is not None else c
                rows += [(attr, name, p.threshold, p.precision, p.recall) for p in curve]
        return rows

    def write_pr_table(self, path, schema=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["attribute", "class", "threshold", "precision", "recall"])
            for attr, name, t, p, r in self.pr_rows(schema):
                w.writerow([attr, name, repr(t), repr(p), repr(r)])


def _predict_batched(model, features: np.ndarray, batch_size: int = 256):
    probs = OrderedDict()
    for i in range(0, len(features), batch_size):
        for a, p in model.predict_proba(features[i:i + batch_size]).items():
            probs.setdefault(a, []).append(p)
    return OrderedDict((a, np.concatenate(v)) for a, v in probs.items())


def evaluate(model, dataset: Dataset, with_pr: bool = True, batch_size: int = 256) -> EvalReport:
    """Accuracy (and PR curves) for every attribute the model predicts."""
    probs = _predict_batched(model, dataset.features, batch_size)
    acc, counts, pr = OrderedDict(), OrderedDict(), OrderedDict()
    for attr, p in probs.items():
        k = dataset.schema.index(attr)
        labels = dataset.labels[:, k]
        acc[attr] = attribute_accuracy(p.argmax(axis=1), labels)
        present = labels != MISSING
        counts[attr] = int(present.sum())
        if with_pr:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pr[attr] = macro_pr(p[present], labels[present], p.shape[1])
    return EvalReport(acc, counts, pr)


@dataclass
class OcclusionResult:
    attributes: list
    regions: list
    clean: "OrderedDict[str, float]"
    occluded: np.ndarray  # n x R accuracies
    delta: np.ndarray     # n x R, clean minus occluded


def occlusion_probe(model, dataset: Dataset, regions: Sequence[tuple]) -> OcclusionResult:
    """Accuracy drop per attribute when each row band of the image is zeroed."""
    height = dataset.feature_shape[1]
    for a, b in regions:
        if not 0 <= a < b <= height:
            raise ConfigurationError(f"region ({a}, {b}) outside the {height}-row image")
    clean = evaluate(model, dataset, with_pr=False).per_attribute
    attrs = list(clean)
    occluded = np.zeros((len(attrs), len(regions)))
    for r, (a, b) in enumerate(regions):
        feats = dataset.features.copy()
        feats[:, :, a:b, :] = 0
        acc = evaluate(model, dataset.with_features(feats), with_pr=False).per_attribute
        occluded[:, r] = [acc[x] for x in attrs]
    delta = np.array([[clean[x]] for x in attrs]) - occluded
    return OcclusionResult(attrs, [tuple(r) for r in regions], clean, occluded, delta)
