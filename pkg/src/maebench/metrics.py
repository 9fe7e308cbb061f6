"""Classification and detection metrics with macro averaging and bootstrap intervals.

Metrics that are undefined on a sample (e.g. AUROC with a single class
present, AP50 for a class with no ground truth) raise
:class:`UndefinedMetricError`; report builders record them as absent and
leave them out of macro averages. Unannotated labels are ``NaN`` and are
dropped per class before scoring.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .errors import DegenerateSampleError, UndefinedMetricError, ValidationError
from .rng import seeded_rng

logger = logging.getLogger(__name__)

METRIC_NAMES = ("auc", "aupr", "f1", "acc", "ap50")


def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    keep = ~np.isnan(labels)
    return scores[keep], labels[keep] > 0.5


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum over score thresholds of recall gain times precision."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # end of each tie group
    tps = np.cumsum(y)[last]
    precision = tps / (last + 1)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_and_acc(scores, labels, threshold: float = 0.5) -> tuple:
    """F1 and accuracy of ``score >= threshold``; F1 is 0 when it would be 0/0."""
    s, y = _binary_inputs(scores, labels)
    if s.size == 0:
        raise UndefinedMetricError("no annotated samples")
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    denom = 2 * tp + fp + fn
    if denom == 0:
        logger.debug("F1 undefined (no predicted or actual positives); using 0")
    f1 = 2 * tp / denom if denom else 0.0
    acc = float(np.mean(pred == y))
    return float(f1), acc


def macro_average(per_class: Mapping | Sequence) -> float:
    """Mean over present classes; ``None``/``NaN`` entries are absent."""
    values = per_class.values() if isinstance(per_class, Mapping) else per_class
    present = [float(v) for v in values if v is not None and not math.isnan(float(v))]
    if not present:
        raise UndefinedMetricError("macro average over zero present classes")
    return math.fsum(present) / len(present)


def round_half_up(value: float, digits: int = 1) -> float:
    """Display rounding, half away from zero at ``digits`` decimals.

    Binary floating-point noise is removed first (by rounding to 9 decimals)
    so that e.g. a mean of exactly 74.675 rounds to 74.7.
    """
    clean = Decimal(repr(value)).quantize(Decimal("1e-9"), rounding=ROUND_HALF_UP)
    return float(clean.quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP))


def format_value(value: Optional[float], digits: int = 1, scale: float = 1.0) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "/"
    return f"{round_half_up(value * scale, digits):.{digits}f}"


def bootstrap_ci(metric_fn: Callable, scores, labels, n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0, max_attempts: int = 10) -> tuple:
    """Percentile bootstrap interval over resampled (score, label) rows.

    Resample ``i`` uses a generator keyed by ``(seed, i, attempt)``; a
    resample on which the metric is undefined is redrawn, up to
    ``max_attempts`` times.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    metric_fn(scores, labels)  # must be defined on the full sample
    n = scores.shape[0]
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        for attempt in range(max_attempts):
            idx = seeded_rng(seed, i, attempt).integers(0, n, n)
            try:
                values[i] = metric_fn(scores[idx], labels[idx])
                break
            except UndefinedMetricError:
                continue
        else:
            raise DegenerateSampleError(
                f"metric undefined on {max_attempts} consecutive resamples (resample {i})"
            )
    alpha = 1.0 - level
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


# -- boxes ---------------------------------------------------------------
def _check_box(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64).reshape(-1)
    if b.size != 4 or not (b[0] < b[2] and b[1] < b[3]):
        raise ValidationError(f"invalid box {list(b)} (need x_min < x_max, y_min < y_max)")
    return b


def iou(box_a, box_b) -> float:
    a, b = _check_box(box_a), _check_box(box_b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter))


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: tuple
    class_id: int
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: tuple
    class_id: int


@dataclass(frozen=True)
class BoxMatch:
    prediction: int
    ground_truth: int  # -1 when unmatched
    iou: float
    matched: bool


def match_boxes(predictions: Sequence[Detection], ground_truths: Sequence[GroundTruth],
                iou_threshold: float = 0.5) -> list:
    """Greedy matching in descending-score order (stable on ties)."""
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    pb = np.array([_check_box(predictions[i].box) for i in order]).reshape(-1, 4)
    gb = np.array([_check_box(g.box) for g in ground_truths]).reshape(-1, 4)
    pi = np.array([predictions[i].image_id for i in order], dtype=np.int64)
    gi = np.array([g.image_id for g in ground_truths], dtype=np.int64)
    assigned = kernels.match_detections(pb, pi, gb, gi, iou_threshold)
    out = []
    for rank, i in enumerate(order):
        g = int(assigned[rank])
        v = iou(pb[rank], gb[g]) if g >= 0 else 0.0
        out.append(BoxMatch(i, g, v, g >= 0))
    return out


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-ordered true-positive vector."""
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    mrec = np.r_[0.0, recall, 1.0]
    mpre = np.r_[0.0, precision, 0.0]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap50(predictions: Sequence[Detection], ground_truths: Sequence[GroundTruth], class_id: int,
         iou_threshold: float = 0.5) -> float:
    """Average precision for one class, a prediction counting when IoU >= 0.5."""
    preds = [p for p in predictions if p.class_id == class_id]
    gts = [g for g in ground_truths if g.class_id == class_id]
    if not gts:
        raise UndefinedMetricError(f"class {class_id} has no ground-truth boxes")
    if not preds:
        return 0.0
    matches = match_boxes(preds, gts, iou_threshold)
    tp = np.array([m.matched for m in matches], dtype=np.float64)
    return average_precision(tp, len(gts))


# -- reports -------------------------------------------------------------
def _absent(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


@dataclass
class MetricReport:
    classes: list
    per_class: dict
    macro: dict
    ci: dict = field(default_factory=dict)
    n_samples: int = 0
    seed: int = 0
    dataset: str = ""
    task: str = ""

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset, "task": self.task, "classes": self.classes,
            "per_class": self.per_class, "macro": self.macro,
            "ci": {k: list(v) for k, v in self.ci.items()},
            "n_samples": self.n_samples, "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(classes=list(obj["classes"]), per_class=dict(obj["per_class"]),
                   macro=dict(obj.get("macro", {})),
                   ci={k: tuple(v) for k, v in obj.get("ci", {}).items()},
                   n_samples=int(obj.get("n_samples", 0)), seed=int(obj.get("seed", 0)),
                   dataset=str(obj.get("dataset", "")), task=str(obj.get("task", "")))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def macro_of(per_class: dict, metric: str) -> Optional[float]:
    return _absent(macro_average, [v.get(metric) for v in per_class.values()])


def _macro_auc(scores, labels):
    return macro_average([_absent(auroc, scores[:, k], labels[:, k]) for k in range(scores.shape[1])])


def classification_report(scores, labels, classes: Sequence[str], threshold: float = 0.5,
                          n_bootstrap: int = 0, level: float = 0.95, seed: int = 0,
                          dataset: str = "", task: str = "") -> MetricReport:
    """Per-class AUROC/AUPR/F1/ACC and their macro means; ``labels`` may hold NaN."""
    scores = np.asarray(scores, dtype=np.float64).reshape(len(scores), -1)
    labels = np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)
    per_class = {}
    for k, name in enumerate(classes):
        s, y = scores[:, k], labels[:, k]
        fa = _absent(f1_and_acc, s, y, threshold)
        per_class[name] = {
            "auc": _absent(auroc, s, y),
            "aupr": _absent(aupr, s, y),
            "f1": fa[0] if fa else None,
            "acc": fa[1] if fa else None,
        }
    macro = {m: macro_of(per_class, m) for m in ("auc", "aupr", "f1", "acc")}
    ci = {}
    if n_bootstrap and macro["auc"] is not None:
        ci["auc"] = bootstrap_ci(_macro_auc, scores, labels, n_bootstrap, level, seed)
    return MetricReport(list(classes), per_class, macro, ci, int(scores.shape[0]), seed, dataset, task)


def detection_report(predictions, ground_truths, classes: Sequence[str], dataset: str = "",
                     seed: int = 0, n_images: int = 0) -> MetricReport:
    per_class = {name: {"ap50": _absent(ap50, predictions, ground_truths, k)}
                 for k, name in enumerate(classes)}
    return MetricReport(list(classes), per_class, {"ap50": macro_of(per_class, "ap50")}, {},
                        n_images, seed, dataset, "localization")
