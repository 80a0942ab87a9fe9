"""Detection metrics: IoU, greedy matching, PR curves, AP and mAP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class DetectionRecord:
    """One prediction (``score`` set) or ground-truth box (``score`` None)."""

    image_id: str
    class_id: int
    box: tuple
    score: Optional[float] = None

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        if len(self.box) != 4:
            raise ValueError(f"box needs 4 coordinates, got {self.box}")
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box not well ordered: {self.box}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_json(self) -> dict:
        row = {"image_id": self.image_id, "class_id": int(self.class_id)}
        if self.score is not None:
            row["score"] = float(self.score)
        row["box"] = list(self.box)
        return row

    @classmethod
    def from_json(cls, row: dict) -> "DetectionRecord":
        return cls(str(row["image_id"]), int(row["class_id"]), tuple(row["box"]),
                   None if row.get("score") is None else float(row["score"]))


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def match(preds: Sequence[DetectionRecord], gts: Sequence[DetectionRecord],
          iou_thresh: float = 0.5) -> tuple:
    """Greedy score-ordered matching.

    Returns ``(order, is_tp)``: prediction indices sorted by descending score
    (stable) and a parallel boolean array.  A prediction claims the unmatched
    ground truth of its image and class with the highest IoU (ties: lowest
    index) when that IoU reaches ``iou_thresh``.
    """
    by_key = defaultdict(list)
    for j, g in enumerate(gts):
        by_key[(g.image_id, g.class_id)].append(j)
    used = set()
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    is_tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        p = preds[i]
        best, best_iou = None, -1.0
        for j in by_key.get((p.image_id, p.class_id), ()):
            if j in used:
                continue
            v = iou(p.box, gts[j].box)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_thresh:
            used.add(best)
            is_tp[rank] = True
    return order, is_tp


@dataclass
class PRCurve:
    """Cumulative counts after each prediction, in descending-score order."""

    tp: np.ndarray
    fp: np.ndarray
    n_gt: int
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def fn(self) -> np.ndarray:
        return self.n_gt - self.tp

    @property
    def precision(self) -> np.ndarray:
        return self.tp / np.maximum(self.tp + self.fp, 1)

    @property
    def recall(self) -> np.ndarray:
        return self.tp / self.n_gt if self.n_gt else np.zeros_like(self.tp, dtype=float)

    def envelope(self) -> np.ndarray:
        """Precision made non-increasing in recall (running max from the right)."""
        return np.maximum.accumulate(self.precision[::-1])[::-1] if len(self.tp) else self.precision


def pr_curve(preds: Sequence[DetectionRecord], gts: Sequence[DetectionRecord],
             iou_thresh: float = 0.5) -> PRCurve:
    order, is_tp = match(preds, gts, iou_thresh)
    tp = np.cumsum(is_tp).astype(np.int64)
    fp = np.cumsum(~is_tp).astype(np.int64)
    scores = np.array([preds[i].score for i in order], dtype=float)
    return PRCurve(tp, fp, len(gts), scores)


def average_precision(curve: PRCurve) -> float:
    """All-point interpolated AP: exact integral of the precision envelope."""
    if curve.n_gt == 0:
        raise ValueError("AP undefined without ground truths")
    if len(curve.tp) == 0:
        return 0.0
    recall = curve.recall
    env = curve.envelope()
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * env))


@dataclass
class EvalResult:
    thresholds: tuple
    ap: dict                  # class -> list of AP per threshold
    precision: dict           # class -> P at the last cut, first threshold
    recall: dict
    skipped: list             # classes with predictions but no ground truth

    def class_ap(self, cls: int, threshold_index: int = 0) -> float:
        return self.ap[cls][threshold_index]

    @property
    def map_per_threshold(self) -> list:
        classes = sorted(self.ap)
        return [float(np.mean([self.ap[c][t] for c in classes]))
                for t in range(len(self.thresholds))]

    @property
    def map(self) -> float:
        return float(np.mean(self.map_per_threshold))


def mean_ap(preds: Iterable[DetectionRecord], gts: Iterable[DetectionRecord],
            thresholds: Sequence[float] = (0.5,)) -> EvalResult:
    """Per-class AP at each IoU threshold and their class mean.

    Classes without ground truth are excluded from the mean and listed in
    ``skipped``.
    """
    thresholds = tuple(thresholds)
    if not thresholds:
        raise ValueError("at least one IoU threshold is required")
    preds, gts = list(preds), list(gts)
    if not gts:
        raise ValueError("no ground-truth records")
    gt_by_cls, pred_by_cls = defaultdict(list), defaultdict(list)
    for g in gts:
        gt_by_cls[g.class_id].append(g)
    for p in preds:
        if p.score is None:
            raise ValueError("prediction without score")
        pred_by_cls[p.class_id].append(p)
    ap, precision, recall = {}, {}, {}
    for c in sorted(gt_by_cls):
        ap[c] = []
        for t in thresholds:
            curve = pr_curve(pred_by_cls.get(c, []), gt_by_cls[c], t)
            ap[c].append(average_precision(curve))
            if t == thresholds[0]:
                precision[c] = float(curve.precision[-1]) if len(curve.tp) else 0.0
                recall[c] = float(curve.recall[-1]) if len(curve.tp) else 0.0
    skipped = sorted(set(pred_by_cls) - set(gt_by_cls))
    return EvalResult(thresholds, ap, precision, recall, skipped)


def evaluate(preds, gts) -> dict:
    """mAP50, mAP50:95 and per-class numbers as a JSON-ready dict."""
    preds, gts = list(preds), list(gts)
    r50 = mean_ap(preds, gts, (0.5,))
    rcoco = mean_ap(preds, gts, COCO_THRESHOLDS)
    classes = sorted(r50.ap)
    return {
        "classes": [
            {"class_id": c, "precision": r50.precision[c], "recall": r50.recall[c],
             "ap50": r50.ap[c][0], "ap50_95": float(np.mean(rcoco.ap[c]))}
            for c in classes
        ],
        "precision": float(np.mean([r50.precision[c] for c in classes])),
        "recall": float(np.mean([r50.recall[c] for c in classes])),
        "map50": r50.map,
        "map50_95": rcoco.map,
        "skipped_classes": r50.skipped,
    }
