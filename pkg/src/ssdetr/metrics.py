"""Detection evaluation: IoU, greedy TP/FP assignment, interpolated AP, mAP, AR and P/R/F1.

Boxes here are corner form (x1, y1, x2, y2) in absolute pixels. Prediction
records follow the usual detection-results layout::

    {"image_id": 3, "category_id": 0, "bbox": [x, y, w, h], "score": 0.93}
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
REPORT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
MAX_DETS = 100


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def assign_tp_fp(det_boxes, gt_boxes, iou_threshold: float) -> np.ndarray:
    """Greedy matching of score-sorted detections to ground truth in one image.

    Each detection takes the highest-IoU ground truth not yet taken, provided
    the IoU reaches the threshold; otherwise it is a false positive.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(det_boxes), dtype=bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return flags
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            taken[g] = True
            flags[d] = True
    return flags


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    interpolated: np.ndarray


def pr_curve(flags, num_gt: int) -> PrCurve:
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    interp = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    return PrCurve(recall, precision, interp)


def average_precision(flags, num_gt: int) -> float:
    """Area under the running-max interpolated precision/recall curve.

    ``flags`` are TP/FP markers of detections in descending score order.
    """
    if num_gt < 1:
        raise ValueError("average precision needs at least one ground truth")
    curve = pr_curve(flags, num_gt)
    if len(curve.recall) == 0:
        return 0.0
    steps = np.diff(np.concatenate([[0.0], curve.recall]))
    return math.fsum(steps * curve.interpolated)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    mAP: float
    AP50: float
    AP75: float
    AR: float
    per_iou: dict = field(default_factory=dict)   # iou -> (precision, recall, f1)
    ap_per_iou: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = [{"metric": k, "iou": "", "value": getattr(self, k)}
               for k in ("mAP", "AP50", "AP75", "AR")]
        for t, (p, r, f) in sorted(self.per_iou.items()):
            out += [{"metric": "precision", "iou": t, "value": p},
                    {"metric": "recall", "iou": t, "value": r},
                    {"metric": "f1", "iou": t, "value": f}]
        return out


def xywh_to_xyxy(b):
    x, y, w, h = b
    return (x, y, x + w, y + h)


def evaluate(predictions: list[dict], ground_truth: dict, *,
             report_thresholds=REPORT_THRESHOLDS, score_threshold: float = 0.5,
             max_dets: int = MAX_DETS) -> EvalReport:
    """Score detection records against ground truth.

    ``ground_truth`` maps image_id -> list of (category_id, (x1, y1, x2, y2)).
    Every image in ``ground_truth`` is evaluated; images without predictions
    simply contribute misses. Classes with no ground truth are skipped.
    """
    gt = defaultdict(lambda: defaultdict(list))
    num_gt = defaultdict(int)
    for img, items in ground_truth.items():
        for cat, box in items:
            gt[cat][img].append(box)
            num_gt[cat] += 1

    per_image = defaultdict(list)
    for rec in predictions:
        per_image[rec["image_id"]].append(rec)
    dets = defaultdict(lambda: defaultdict(list))
    for img, recs in per_image.items():
        recs = sorted(recs, key=lambda r: -r["score"])[:max_dets]
        for r in recs:
            dets[r["category_id"]][img].append((r["score"], xywh_to_xyxy(r["bbox"])))

    thresholds = sorted(set(COCO_THRESHOLDS) | set(report_thresholds))
    classes = sorted(c for c in num_gt if num_gt[c] > 0)
    ap = {t: [] for t in thresholds}
    ar = {t: [] for t in thresholds}
    counts = {t: [0, 0, 0] for t in report_thresholds}   # tp, n_det, n_gt at score >= thr
    for cat in classes:
        images = set(gt[cat]) | set(dets[cat])
        for t in thresholds:
            scored = []
            kept_tp = kept = 0
            for img in sorted(images, key=str):
                d = sorted(dets[cat].get(img, []), key=lambda x: -x[0])
                flags = assign_tp_fp([b for _, b in d], gt[cat].get(img, []), t)
                scored += [(s, f) for (s, _), f in zip(d, flags)]
                if t in counts:
                    keep = [s >= score_threshold for s, _ in d]
                    kflags = assign_tp_fp([b for (s, b) in d if s >= score_threshold],
                                          gt[cat].get(img, []), t)
                    kept_tp += int(kflags.sum())
                    kept += int(sum(keep))
            order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
            flags = [scored[i][1] for i in order]
            ap[t].append(average_precision(flags, num_gt[cat]))
            ar[t].append(sum(flags) / num_gt[cat])
            if t in counts:
                counts[t][0] += kept_tp
                counts[t][1] += kept
                counts[t][2] += num_gt[cat]

    def mean_over_classes(t):
        return float(np.mean(ap[t])) if ap[t] else 0.0

    per_iou = {}
    for t, (tp, nd, ng) in counts.items():
        p = tp / nd if nd else 0.0
        r = tp / ng if ng else 0.0
        per_iou[t] = (p, r, f1_score(p, r))
    return EvalReport(
        mAP=float(np.mean([mean_over_classes(t) for t in COCO_THRESHOLDS])),
        AP50=mean_over_classes(0.5),
        AP75=mean_over_classes(0.75),
        AR=float(np.mean([np.mean(ar[t]) if ar[t] else 0.0 for t in COCO_THRESHOLDS])),
        per_iou=per_iou,
        ap_per_iou={t: mean_over_classes(t) for t in thresholds},
    )
