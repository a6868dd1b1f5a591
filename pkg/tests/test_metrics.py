import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssdetr.metrics import (assign_tp_fp, average_precision, evaluate, f1_score, iou, iou_matrix,
                            pr_curve)


def rand_box(rng, size=60):
    x1, y1 = rng.uniform(0, size * 0.8, 2)
    w, h = rng.uniform(2, size * 0.3, 2)
    return (x1, y1, x1 + w, y1 + h)


def greedy_oracle(dets, gts, thr):
    """The greedy rule written as plain loops over python floats."""
    taken = set()
    flags = []
    for d in dets:
        best, best_iou = None, -1.0
        for g, gt in enumerate(gts):
            if g in taken:
                continue
            v = iou(d, gt)
            if v > best_iou:
                best, best_iou = g, v
        if best is not None and best_iou >= thr:
            taken.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def manual_ap(flags, num_gt):
    tp = fp = 0
    points = []
    for f in flags:
        tp += f
        fp += not f
        points.append((tp / num_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        p_interp = max(p for _, p in points[k:])
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_iou_symmetric_and_matrix_agrees(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_box(rng), rand_box(rng)
    assert iou(a, b) == iou(b, a)
    assert iou_matrix([a], [b])[0, 0] == pytest.approx(iou(a, b), abs=1e-15)
    assert 0.0 <= iou(a, b) <= 1.0


def test_assignment_examples():
    gt = [(0, 0, 10, 10)]
    assert assign_tp_fp([(0, 0, 10, 9)], gt, 0.5).tolist() == [True]
    assert assign_tp_fp([(0, 0, 10, 10), (0, 0, 10, 10)], gt, 0.5).tolist() == [True, False]


@given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(0, 5), st.sampled_from([0.3, 0.5, 0.75]))
def test_assignment_matches_loop_oracle(seed, n_det, n_gt, thr):
    rng = np.random.default_rng(seed)
    gts = [rand_box(rng, 30) for _ in range(n_gt)]
    dets = [rand_box(rng, 30) for _ in range(n_det)]
    assert assign_tp_fp(dets, gts, thr).tolist() == greedy_oracle(dets, gts, thr)


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert average_precision([False, False], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision([True], 0)


@given(st.lists(st.booleans(), max_size=12), st.integers(1, 6))
def test_ap_matches_manual_integration(flags, extra):
    num_gt = sum(flags) + extra - 1 or 1
    assert average_precision(flags, num_gt) == pytest.approx(manual_ap(flags, num_gt), abs=1e-12)


@given(st.lists(st.booleans(), min_size=1, max_size=12))
def test_pr_curve_shape_invariants(flags):
    c = pr_curve(flags, max(1, sum(flags)))
    assert (np.diff(c.recall) >= 0).all() and (np.diff(c.interpolated) <= 0).all()


def test_f1_table_row():
    assert f1_score(0.958, 0.905) == pytest.approx(0.931, abs=5e-4)
    assert f1_score(0.0, 0.0) == 0.0


def scene(rng, n_img=4):
    gt, preds = {}, []
    for img in range(n_img):
        boxes = [rand_box(rng) for _ in range(int(rng.integers(1, 4)))]
        gt[img] = [(0, b) for b in boxes]
        for b in boxes:
            if rng.random() < 0.8:
                j = rng.normal(0, 2, 4)
                x1, y1, x2, y2 = b[0] + j[0], b[1] + j[1], b[2] + j[2], b[3] + j[3]
                preds.append({"image_id": img, "category_id": 0, "bbox": [x1, y1, max(x2 - x1, 1), max(y2 - y1, 1)],
                              "score": float(rng.uniform(0.3, 1))})
        for _ in range(int(rng.integers(0, 3))):
            x1, y1, x2, y2 = rand_box(rng)
            preds.append({"image_id": img, "category_id": 0, "bbox": [x1, y1, x2 - x1, y2 - y1],
                          "score": float(rng.uniform(0, 1))})
    return preds, gt


def as_records(gt):
    return [{"image_id": img, "category_id": c, "bbox": [b[0], b[1], b[2] - b[0], b[3] - b[1]], "score": 1.0}
            for img, items in gt.items() for c, b in items]


def test_perfect_predictions_score_one(rng):
    _, gt = scene(rng)
    rep = evaluate(as_records(gt), gt)
    assert rep.mAP == pytest.approx(1.0) and rep.AP50 == 1.0 and rep.AR == pytest.approx(1.0)
    assert rep.per_iou[0.9] == (1.0, 1.0, 1.0)


def test_empty_predictions_report_zero(rng):
    _, gt = scene(rng)
    rep = evaluate([], gt)
    assert rep.mAP == 0.0 and rep.per_iou[0.5] == (0.0, 0.0, 0.0)


def test_single_class_map_is_mean_over_thresholds(rng):
    preds, gt = scene(rng)
    rep = evaluate(preds, gt)
    coco = [t for t in rep.ap_per_iou if round(float(t) * 100) % 5 == 0]
    assert rep.mAP == pytest.approx(np.mean([rep.ap_per_iou[t] for t in coco]), abs=1e-15)


def test_classes_without_ground_truth_are_skipped(rng):
    preds, gt = scene(rng)
    stray = [dict(p, category_id=7) for p in preds]
    assert evaluate(preds + stray, gt).mAP == evaluate(preds, gt).mAP


@given(st.integers(0, 2**32 - 1))
def test_monotone_score_transform_invariance(seed):
    preds, gt = scene(np.random.default_rng(seed))
    warped = [dict(p, score=float(np.exp(3 * p["score"]))) for p in preds]
    a, b = evaluate(preds, gt), evaluate(warped, gt)
    assert a.ap_per_iou == b.ap_per_iou


@given(st.integers(0, 2**32 - 1))
def test_lowest_scored_false_positive_never_helps(seed):
    rng = np.random.default_rng(seed)
    preds, gt = scene(rng)
    fp = {"image_id": 0, "category_id": 0, "bbox": [200.0, 200.0, 5.0, 5.0], "score": -1.0}
    a, b = evaluate(preds, gt), evaluate(preds + [fp], gt)
    assert b.mAP <= a.mAP
    assert a.mAP <= a.AP50


def test_report_rows_and_thresholds(rng):
    preds, gt = scene(rng)
    rep = evaluate(preds, gt)
    assert sorted(rep.per_iou) == [0.5, 0.6, 0.7, 0.8, 0.9]
    assert all(0.0 <= r["value"] <= 1.0 for r in rep.rows())
