"""Bipartite matching between predictions and targets, and the set-prediction losses."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class TargetSet:
    """Targets for one image: class ids in [0, C) and normalized cx, cy, w, h boxes."""

    classes: np.ndarray
    boxes: np.ndarray
    origin: str = "ground-truth"

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.classes) != len(self.boxes):
            raise ValueError(f"{len(self.classes)} classes but {len(self.boxes)} boxes")
        if ((self.boxes < 0) | (self.boxes > 1)).any():
            raise ValueError("target boxes must be normalized to [0, 1]")
        if self.origin not in ("ground-truth", "pseudo"):
            raise ValueError(f"unknown target origin {self.origin!r}")

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def empty(cls, origin: str = "ground-truth") -> "TargetSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 4)), origin)


@dataclass
class MatchResult:
    """Injective map target index -> prediction index (parallel arrays)."""

    target_idx: np.ndarray
    pred_idx: np.ndarray
    total: float = 0.0

    def as_dict(self) -> dict[int, int]:
        return {int(k): int(n) for k, n in zip(self.target_idx, self.pred_idx)}


@dataclass
class LossWeights:
    reg: float = 2.0          # alpha_1, multiplies the box term
    cls: float = 5.0          # alpha_2, multiplies the class term
    noobj: float = 0.1
    l1: float = 5.0
    giou: float = 2.0
    match_class: float = 1.0

    def __post_init__(self):
        if min(self.reg, self.cls, self.noobj, self.l1, self.giou, self.match_class) < 0:
            raise ValueError("loss weights must be nonnegative")


# ------------------------------------------------------------------ box helpers

def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], -1)


def generalized_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between corner boxes a (M,4) and b (K,4) -> (M,K)."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    encl = ew * eh
    return inter / union - (encl - union) / encl


def box_regression(pred, target, w: LossWeights | None = None) -> np.ndarray:
    """lambda_L1 * L1 + lambda_giou * (1 - GIoU) for aligned cxcywh pairs, as numbers."""
    w = w or LossWeights()
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    l1 = np.abs(pred - target).sum(-1)
    giou = np.diagonal(generalized_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(target)))
    return w.l1 * l1 + w.giou * (1.0 - giou)


def box_loss(pred: Tensor, target: np.ndarray, l1_weight: float, giou_weight: float) -> Tensor:
    """Per-pair box regression loss with an analytic gradient w.r.t. ``pred``.

    pred (M,4) and target (M,4) are cx, cy, w, h. Returns (M,).
    """
    p = pred.data
    t = np.asarray(target, dtype=np.float64)
    diff = p - t
    l1 = np.abs(diff).sum(-1)

    x1, y1, x2, y2 = (p[:, 0] - p[:, 2] / 2, p[:, 1] - p[:, 3] / 2,
                      p[:, 0] + p[:, 2] / 2, p[:, 1] + p[:, 3] / 2)
    tx1, ty1, tx2, ty2 = (t[:, 0] - t[:, 2] / 2, t[:, 1] - t[:, 3] / 2,
                          t[:, 0] + t[:, 2] / 2, t[:, 1] + t[:, 3] / 2)
    area_p = (x2 - x1) * (y2 - y1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw_raw = np.minimum(x2, tx2) - np.maximum(x1, tx1)
    ih_raw = np.minimum(y2, ty2) - np.maximum(y1, ty1)
    iw, ih = np.clip(iw_raw, 0, None), np.clip(ih_raw, 0, None)
    inter = iw * ih
    union = area_p + area_t - inter
    ew = np.maximum(x2, tx2) - np.minimum(x1, tx1)
    eh = np.maximum(y2, ty2) - np.minimum(y1, ty1)
    encl = ew * eh
    giou_loss = 2.0 - inter / union - union / encl
    out = l1_weight * l1 + giou_weight * giou_loss

    def vjp(g):
        ow, oh = iw_raw > 0, ih_raw > 0
        # d/d(x1, x2, y1, y2) of intersection, prediction area and enclosure
        dI = np.stack([-ih * (x1 > tx1) * ow, ih * (x2 < tx2) * ow,
                       -iw * (y1 > ty1) * oh, iw * (y2 < ty2) * oh], -1)
        dA = np.stack([-(y2 - y1), (y2 - y1), -(x2 - x1), (x2 - x1)], -1)
        dE = np.stack([-eh * (x1 <= tx1), eh * (x2 >= tx2),
                       -ew * (y1 <= ty1), ew * (y2 >= ty2)], -1)
        dU = dA - dI
        I, U, E = inter[:, None], union[:, None], encl[:, None]
        dL = -(dI * U - I * dU) / U ** 2 - (dU * E - U * dE) / E ** 2
        dx1, dx2, dy1, dy2 = dL[:, 0], dL[:, 1], dL[:, 2], dL[:, 3]
        dgiou = np.stack([dx1 + dx2, dy1 + dy2, (dx2 - dx1) / 2, (dy2 - dy1) / 2], -1)
        grad = l1_weight * np.sign(diff) + giou_weight * dgiou
        return (g[:, None] * grad,)

    return ad.custom_op("box_loss", out, (pred,), vjp)


# ---------------------------------------------------------------------- costs

def match_cost(prob: float, pred_box, target_box, w: LossWeights | None = None) -> float:
    """Cost of pairing one prediction with one real target.

    ``prob`` is the prediction's softmax probability of the target class.
    """
    w = w or LossWeights()
    return float(-w.match_class * prob + box_regression(pred_box, target_box, w)[0])


def cost_matrix(probs: np.ndarray, pred_boxes: np.ndarray, targets: TargetSet,
                w: LossWeights | None = None) -> np.ndarray:
    """K x N matching costs for one image (probs N x (C+1), boxes N x 4)."""
    w = w or LossWeights()
    if len(targets) == 0:
        return np.zeros((0, len(probs)))
    cls_cost = -w.match_class * probs[:, targets.classes].T
    l1 = np.abs(targets.boxes[:, None, :] - pred_boxes[None, :, :]).sum(-1)
    giou = generalized_iou(cxcywh_to_xyxy(targets.boxes), cxcywh_to_xyxy(pred_boxes))
    return cls_cost + w.l1 * l1 + w.giou * (1.0 - giou)


# ------------------------------------------------------------------ assignment

def _total(cost: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    return math.fsum(cost[rows, cols].tolist())


def hungarian_match(cost) -> MatchResult:
    """Optimal injective assignment of the K rows into the N columns (K <= N).

    Shortest-augmenting-path Hungarian method with row/column potentials,
    adding one row at a time; O(K^2 N).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    K, N = cost.shape
    if K > N:
        raise ValueError(f"more targets ({K}) than predictions ({N})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if K == 0:
        return MatchResult(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0)

    u = np.zeros(K + 1)
    v = np.zeros(N + 1)
    owner = np.zeros(N + 1, dtype=np.int64)   # owner[j] = 1-based row on column j, 0 = free
    way = np.zeros(N + 1, dtype=np.int64)
    for i in range(1, K + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(N + 1, np.inf)
        used = np.zeros(N + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            cand = free[1:] & (cur < minv[1:])
            minv[1:][cand] = cur[cand]
            way[1:][cand] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    cols = np.nonzero(owner[1:])[0]
    rows = owner[1:][cols] - 1
    order = np.argsort(rows)
    rows, cols = rows[order], cols[order]
    return MatchResult(rows, cols, _total(cost, rows, cols))


@lru_cache(maxsize=64)
def _injections(k: int, n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n), k)), dtype=np.int64).reshape(-1, k)


def brute_force_match(cost) -> MatchResult:
    """Exhaustive minimum over every injection of rows into columns (K <= 8)."""
    cost = np.asarray(cost, dtype=np.float64)
    K, N = cost.shape
    if K > N:
        raise ValueError(f"more targets ({K}) than predictions ({N})")
    if K > 8:
        raise ValueError(f"brute force limited to K <= 8, got {K}")
    if K == 0:
        return MatchResult(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0)
    perms = _injections(K, N)
    totals = cost[0].take(perms[:, 0])
    for r in range(1, K):
        totals += cost[r].take(perms[:, r])
    # candidates within rounding of the float sum; the exact sum decides
    near = np.nonzero(totals <= totals.min() + 1e-9 * max(1.0, abs(totals.min())))[0]
    rows = np.arange(K)
    best = min(near, key=lambda i: (_total(cost, rows, perms[i]), i))
    return MatchResult(rows, perms[best].copy(), _total(cost, rows, perms[best]))


# ---------------------------------------------------------------------- losses

@dataclass
class LossParts:
    total: Tensor
    cls: Tensor
    box: Tensor
    matches: list[MatchResult] = field(default_factory=list)


def match_image(probs: np.ndarray, boxes: np.ndarray, targets: TargetSet,
                w: LossWeights) -> MatchResult:
    return hungarian_match(cost_matrix(probs, boxes, targets, w))


def hungarian_loss(logits: Tensor, boxes: Tensor, targets: TargetSet, sigma: MatchResult,
                   w: LossWeights | None = None) -> LossParts:
    """Set loss for one image: logits (N, C+1), boxes (N, 4).

    Every prediction pays -log p(assigned class), where unmatched predictions
    are assigned the no-object class (last index) and that term is scaled by
    ``w.noobj``; matched predictions also pay the box regression loss.
    The returned total is unweighted (cls + box); alpha weights are applied
    by :func:`weighted_term`.
    """
    w = w or LossWeights()
    return batch_hungarian_loss(ad.reshape(logits, (1,) + logits.shape),
                                ad.reshape(boxes, (1,) + boxes.shape), [targets], [sigma], w)


def batch_hungarian_loss(logits: Tensor, boxes: Tensor, targets: list[TargetSet],
                         sigmas: list[MatchResult], w: LossWeights) -> LossParts:
    """Sum of per-image Hungarian losses over a batch (B, N, C+1) / (B, N, 4)."""
    B, N, C1 = logits.shape
    coef = np.zeros((B, N, C1))
    coef[:, :, C1 - 1] = -w.noobj
    bi, pi, tb = [], [], []
    for b, (tgt, sig) in enumerate(zip(targets, sigmas)):
        if len(sig.pred_idx):
            coef[b, sig.pred_idx, C1 - 1] = 0.0
            coef[b, sig.pred_idx, tgt.classes[sig.target_idx]] = -1.0
            bi.append(np.full(len(sig.pred_idx), b))
            pi.append(sig.pred_idx)
            tb.append(tgt.boxes[sig.target_idx])
    cls = ad.tsum(ad.log_softmax(logits) * coef)
    if bi:
        matched = boxes[np.concatenate(bi), np.concatenate(pi)]
        box = ad.tsum(box_loss(matched, np.concatenate(tb), w.l1, w.giou))
    else:
        box = Tensor(0.0)
    return LossParts(cls + box, cls, box, list(sigmas))


def detection_loss(out, targets: list[TargetSet], w: LossWeights) -> LossParts:
    """Match each image afresh (no gradient through the assignment), then score it."""
    probs = out.probs()
    boxes = out.boxes.data
    sigmas = [match_image(probs[b], boxes[b], t, w) for b, t in enumerate(targets)]
    return batch_hungarian_loss(out.logits, out.boxes, targets, sigmas, w)


def weighted_term(parts: LossParts, w: LossWeights) -> Tensor:
    """alpha_1 * L_reg + alpha_2 * L_cls for one augmented view."""
    return parts.box * w.reg + parts.cls * w.cls


def total_loss(labeled_strong: LossParts | None, labeled_weak: LossParts | None,
               unlabeled_strong: LossParts | None, w: LossWeights) -> Tensor:
    """Student objective: supervised terms on both labeled views plus the pseudo-label term."""
    terms = [weighted_term(p, w) for p in (labeled_strong, labeled_weak, unlabeled_strong)
             if p is not None]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
