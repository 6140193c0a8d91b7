"""Text-free inference (alpha selection + NMS) and evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateBox, MissingGroundTruth, TooFewSamples
from .model import ModelParams, RoiSet, aggregate, classify_attributes, roi_weights, transform_roi

THRESHOLDS = (0.25, 0.5, 0.75)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax1, ay1, ax2, ay2 = (float(x) for x in a[:4])
    bx1, by1, bx2, by2 = (float(x) for x in b[:4])
    if ax1 >= ax2 or ay1 >= ay2 or bx1 >= bx2 or by1 >= by2:
        raise DegenerateBox(f"boxes need x1 < x2 and y1 < y2: {a[:4]}, {b[:4]}")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def nms(boxes: np.ndarray, weights: np.ndarray, iou_threshold: float = 0.5) -> list[int]:
    """Greedy suppression; returns kept indices, highest weight first.

    Ties in weight are broken by input order.  A box is dropped when its
    IoU with an already kept box is >= ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not np.isfinite(weights).all():
        raise ValueError("nms weights must be finite")
    order = np.lexsort((np.arange(len(weights)), -weights))
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        ih = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = iw * ih
        ov = inter / (areas[i] + areas[rest] - inter)
        order = rest[ov < iou_threshold]
    return keep


@dataclass
class Detection:
    image_id: str
    boxes: list[list[float]]  # [x1, y1, x2, y2, weight], descending weight
    attr_probs: list[float]

    def to_json(self) -> str:
        return json.dumps({"id": self.image_id, "boxes": self.boxes, "attr_probs": self.attr_probs})

    @classmethod
    def from_dict(cls, rec: Mapping) -> "Detection":
        return cls(str(rec["id"]), [list(map(float, b)) for b in rec["boxes"]],
                   [float(p) for p in rec["attr_probs"]])


def infer(roi_set: RoiSet, params: ModelParams, nms_threshold: float = 0.5) -> Detection:
    """Select ROIs by alpha weight (>= 1/N), suppress overlaps, classify attributes."""
    phi = transform_roi(roi_set, params)
    alpha = roi_weights(phi, params)
    probs = classify_attributes(aggregate(phi, alpha), params, mode="infer").value
    w = alpha.value
    n = len(w)
    cand = np.flatnonzero(w >= 1.0 / n)
    if cand.size == 0:
        cand = np.array([int(np.lexsort((np.arange(n), -w))[0])])
    kept = cand[nms(roi_set.boxes[cand], w[cand], nms_threshold)]
    boxes = [[*map(float, roi_set.boxes[i]), float(w[i])] for i in kept]
    return Detection(roi_set.image_id, boxes, [float(p) for p in probs])


# ------------------------------------------------------------ localization

def localization_metrics(detections: Sequence[Detection], ground_truth: Mapping[str, Sequence],
                         thresholds: Sequence[float] = THRESHOLDS, hit_mode: str = "top1") -> dict[float, float]:
    """Fraction of images whose predicted box reaches IoU >= t with a GT box.

    ``hit_mode="top1"`` scores only the highest-weight box; ``"any"`` counts a
    hit if any returned box qualifies.
    """
    if hit_mode not in ("top1", "any"):
        raise ValueError(f"hit_mode must be 'top1' or 'any', got {hit_mode!r}")
    if not detections:
        raise ValueError("no detections to evaluate")
    hits = np.zeros(len(thresholds))
    for det in detections:
        gt = ground_truth.get(det.image_id)
        if not gt:
            raise MissingGroundTruth(det.image_id)
        if not det.boxes:
            raise ValueError(f"{det.image_id}: detection has no boxes")
        preds = det.boxes[:1] if hit_mode == "top1" else det.boxes
        best = max(iou(p, g) for p in preds for g in gt)
        hits += np.array([best >= t for t in thresholds])
    return {float(t): float(h / len(detections)) for t, h in zip(thresholds, hits)}


# ---------------------------------------------------------- classification

def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC AUC (Mann-Whitney U) with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class ClassificationResult:
    accuracy: float
    auc: float
    skipped: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter((self.accuracy, self.auc))


def classification_metrics(probs, targets) -> ClassificationResult:
    """Thresholded accuracy over all entries and macro AUC over two-class attributes."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if p.shape != t.shape or p.shape[0] < 1:
        raise ValueError(f"probs {p.shape} and targets {t.shape} must match")
    # round half to even matches the usual round(p) convention at exactly 0.5
    acc = float((np.round(p) == t).mean())
    aucs, skipped = [], []
    for j in range(p.shape[1]):
        col = t[:, j]
        if col.min() == col.max():
            skipped.append(j)
            continue
        aucs.append(roc_auc(p[:, j], col))
    auc = float(np.mean(aucs)) if aucs else float("nan")
    return ClassificationResult(acc, auc, skipped)


# ---------------------------------------------------------------- severity

def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0:
        return float("nan")
    return float((xc * yc).sum() / den)


def spearman(x, y) -> float:
    return pearson(rankdata(x), rankdata(y))


STAT_NAMES = ("pearson", "spearman", "r2", "mae", "mse")


@dataclass
class SeverityStats:
    mean: dict[str, float]
    std: dict[str, float]
    per_fold: list[dict[str, float]]


def _fold_stats(p_tr, y_tr, p_te, y_te, sev_te) -> dict[str, float]:
    slope, intercept = np.polyfit(p_tr, y_tr, 1) if np.ptp(p_tr) > 0 else (0.0, float(np.mean(y_tr)))
    pred = slope * p_te + intercept
    resid = y_te - pred
    ss_tot = ((y_te - y_te.mean()) ** 2).sum()
    return {
        "pearson": pearson(p_te, sev_te),
        "spearman": spearman(p_te, sev_te),
        "r2": float(1.0 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else float("nan"),
        "mae": float(np.abs(resid).mean()),
        "mse": float((resid ** 2).mean()),
    }


def severity_correlation(probs: Mapping[str, Sequence[float]], severity: Sequence[float],
                         folds: int = 5, seed: int = 0) -> dict[str, SeverityStats]:
    """K-fold correlation between attribute probabilities and severity scores.

    Severity (0-8) is min-max scaled to [0, 1]; a least-squares line from
    probability to scaled severity is fit on the training folds and scored
    (R^2, MAE, MSE) on the held-out fold.  Pearson/Spearman use the held-out
    raw pairs.  Returns mean/std (population) over folds per attribute.
    """
    sev = np.asarray(severity, dtype=np.float64)
    n = sev.size
    if folds < 2 or n < folds:
        raise TooFewSamples(f"{n} samples for {folds} folds")
    lo, hi = sev.min(), sev.max()
    scaled = (sev - lo) / (hi - lo) if hi > lo else np.zeros_like(sev)
    perm = np.random.default_rng(seed).permutation(n)
    splits = np.array_split(perm, folds)
    out = {}
    for name, p in probs.items():
        p = np.asarray(p, dtype=np.float64)
        if p.size != n:
            raise ValueError(f"{name}: {p.size} probabilities for {n} severity scores")
        per_fold = []
        for k in range(folds):
            te = splits[k]
            tr = np.concatenate([splits[j] for j in range(folds) if j != k])
            per_fold.append(_fold_stats(p[tr], scaled[tr], p[te], scaled[te], sev[te]))
        mean = {s: float(np.mean([f[s] for f in per_fold])) for s in STAT_NAMES}
        std = {s: float(np.std([f[s] for f in per_fold])) for s in STAT_NAMES}
        out[name] = SeverityStats(mean, std, per_fold)
    return out


# ------------------------------------------------------------------ report

@dataclass
class EvalReport:
    iou_hit_rate: dict[float, float] = field(default_factory=dict)
    attr_accuracy: float | None = None
    attr_auc: float | None = None
    skipped_attributes: list[str] = field(default_factory=list)
    severity_stats: dict[str, SeverityStats] = field(default_factory=dict)
    hit_mode: str = "top1"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iou_hit_rate"] = {str(k): v for k, v in self.iou_hit_rate.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "model", dataset: str = "data") -> str:
        lines = []
        if self.iou_hit_rate:
            ts = sorted(self.iou_hit_rate)
            head = f"{'Method':<12}{'Dataset':<12}" + "".join(f"{'IoU@' + format(t, 'g'):>10}" for t in ts)
            lines += [head, "-" * len(head),
                      f"{label:<12}{dataset:<12}" + "".join(f"{self.iou_hit_rate[t]:>10.3f}" for t in ts)]
        if self.attr_accuracy is not None:
            lines.append(f"attribute accuracy {self.attr_accuracy:.3f}  macro AUC {self.attr_auc:.3f}")
        if self.severity_stats:
            if lines:
                lines.append("")
            cols = ("Pearson CC", "Spearman CC", "R^2", "MAE", "MSE")
            head = f"{'Attribute':<12}" + "".join(f"{c:>20}" for c in cols)
            lines += [head, "-" * len(head)]
            for name, st in self.severity_stats.items():
                cells = "".join(f"{f'{st.mean[s]:.3f} +- {st.std[s]:.3f}':>20}" for s in STAT_NAMES)
                lines.append(f"{name:<12}" + cells)
        return "\n".join(lines)
