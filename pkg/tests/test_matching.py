import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssdetr import autodiff as ad
from ssdetr.autodiff import Tensor
from ssdetr.matching import (LossParts, LossWeights, MatchResult, TargetSet, box_loss,
                             brute_force_match, cost_matrix, generalized_iou, hungarian_loss,
                             hungarian_match, match_cost, total_loss, weighted_term, cxcywh_to_xyxy)


def hand_giou(a, b):
    """GIoU of two corner boxes written out longhand."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    encl = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (encl - union) / encl


def reference_loss(logits, boxes, targets, sigma, w):
    """Straightforward per-prediction re-implementation of the set loss."""
    n, c1 = logits.shape
    assigned = {int(p): int(t) for t, p in zip(sigma.target_idx, sigma.pred_idx)}
    cls = 0.0
    box = 0.0
    for i in range(n):
        z = logits[i] - logits[i].max()
        logp = z - math.log(np.exp(z).sum())
        if i in assigned:
            k = assigned[i]
            cls -= logp[targets.classes[k]]
            p, t = boxes[i], targets.boxes[k]
            l1 = np.abs(p - t).sum()
            g = hand_giou(cxcywh_to_xyxy(p[None])[0], cxcywh_to_xyxy(t[None])[0])
            box += w.l1 * l1 + w.giou * (1 - g)
        else:
            cls -= w.noobj * logp[c1 - 1]
    return cls, box


def random_targets(rng, k, c=1):
    cxcy = rng.uniform(0.25, 0.75, size=(k, 2))
    wh = rng.uniform(0.05, 0.4, size=(k, 2))
    return TargetSet(rng.integers(0, c, size=k), np.concatenate([cxcy, wh], 1))


# ----------------------------------------------------------------- costs

def test_match_cost_examples():
    box = np.array([0.5, 0.5, 0.2, 0.2])
    assert match_cost(1.0, box, box) == -1.0
    w = LossWeights()
    # substitution: p=0.8 and a pair whose box term is 0.3
    shifted = box + np.array([0.06, 0.0, 0.0, 0.0])
    l_box = w.l1 * 0.06 + w.giou * (1 - hand_giou((0.46, 0.4, 0.66, 0.6), (0.4, 0.4, 0.6, 0.6)))
    assert match_cost(0.8, shifted, box) == pytest.approx(-0.8 + l_box, abs=1e-12)
    assert match_cost(0.8, box, box, LossWeights(l1=0, giou=0)) + 0.3 == pytest.approx(-0.5)


def test_match_cost_disjoint_boxes_by_hand():
    a = np.array([0.2, 0.2, 0.2, 0.2])     # corners (0.1, 0.1, 0.3, 0.3)
    b = np.array([0.8, 0.8, 0.2, 0.2])     # corners (0.7, 0.7, 0.9, 0.9)
    # L1 = 0.6 + 0.6; GIoU = 0 - (0.64 - 0.08) / 0.64
    expected = 5 * 1.2 + 2 * (1 + 0.56 / 0.64)
    assert match_cost(0.0, a, b) == pytest.approx(expected, abs=1e-12)


def test_generalized_iou_matches_hand(rng):
    a = cxcywh_to_xyxy(random_targets(rng, 4).boxes)
    b = cxcywh_to_xyxy(random_targets(rng, 3).boxes)
    g = generalized_iou(a, b)
    for i, j in itertools.product(range(4), range(3)):
        assert g[i, j] == pytest.approx(hand_giou(a[i], b[j]), abs=1e-14)


def test_cost_matrix_entries_equal_match_cost(rng):
    probs = rng.dirichlet(np.ones(3), size=6)
    boxes = random_targets(rng, 6).boxes
    tgt = random_targets(rng, 3, c=2)
    cm = cost_matrix(probs, boxes, tgt)
    assert cm.shape == (3, 6)
    for k, n in itertools.product(range(3), range(6)):
        assert cm[k, n] == pytest.approx(match_cost(probs[n, tgt.classes[k]], boxes[n], tgt.boxes[k]), abs=1e-12)


# ------------------------------------------------------------- matching

def test_hungarian_small_examples():
    r = hungarian_match([[1, 2], [2, 1]])
    assert r.as_dict() == {0: 0, 1: 1} and r.total == 2
    r = hungarian_match([[5]])
    assert r.as_dict() == {0: 0} and r.total == 5


def test_brute_force_small_examples():
    r = brute_force_match([[1, 2], [2, 1]])
    assert r.as_dict() == {0: 0, 1: 1} and r.total == 2
    assert brute_force_match([[5]]).total == 5


def test_matching_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        hungarian_match([[np.inf]])
    with pytest.raises(ValueError):
        brute_force_match(np.zeros((9, 9)))
    with pytest.raises(ValueError):
        brute_force_match(np.zeros((3, 2)))


def test_empty_target_set_matches_nothing():
    r = hungarian_match(np.zeros((0, 5)))
    assert len(r.pred_idx) == 0 and r.total == 0.0


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 4))
def test_hungarian_equals_brute_force(seed, k, extra):
    cost = np.random.default_rng(seed).uniform(-1, 1, size=(k, k + extra))
    h, b = hungarian_match(cost), brute_force_match(cost)
    assert h.total == b.total
    assert len(set(h.pred_idx.tolist())) == k


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(0, 3))
def test_row_constant_does_not_change_assignment(seed, k, extra):
    rng = np.random.default_rng(seed)
    cost = rng.permutation(k * (k + extra)).reshape(k, k + extra).astype(float)
    shifted = cost + rng.integers(-5, 5, size=(k, 1))
    assert hungarian_match(cost).as_dict() == hungarian_match(shifted).as_dict()


def test_integer_ties_resolved_to_an_optimum():
    cost = np.ones((3, 4))
    r = hungarian_match(cost)
    assert r.total == 3 and len(set(r.pred_idx.tolist())) == 3


# ----------------------------------------------------------------- losses

def test_perfect_prediction_has_zero_loss():
    big = 800.0
    tgt = TargetSet([0], [[0.5, 0.5, 0.2, 0.3]])
    logits = np.array([[big, 0.0], [0.0, big]])
    boxes = np.array([[0.5, 0.5, 0.2, 0.3], [0.1, 0.1, 0.1, 0.1]])
    parts = hungarian_loss(Tensor(logits), Tensor(boxes), tgt, MatchResult(np.array([0]), np.array([0])))
    assert parts.total.data == 0.0


def test_no_targets_uniform_logits_closed_form():
    n = 7
    parts = hungarian_loss(Tensor(np.zeros((n, 2))), Tensor(np.full((n, 4), 0.5)), TargetSet.empty(),
                           MatchResult(np.zeros(0, int), np.zeros(0, int)))
    assert parts.total.data == pytest.approx(n * 0.1 * math.log(2), abs=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_hungarian_loss_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n, k, w = 8, int(rng.integers(0, 5)), LossWeights()
    logits = rng.normal(size=(n, 3))
    boxes = random_targets(rng, n).boxes
    tgt = random_targets(rng, k, c=2)
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    sigma = hungarian_match(cost_matrix(probs, boxes, tgt))
    parts = hungarian_loss(Tensor(logits), Tensor(boxes), tgt, sigma, w)
    cls, box = reference_loss(logits, boxes, tgt, sigma, w)
    assert float(parts.cls.data) == pytest.approx(cls, abs=1e-12)
    assert float(parts.box.data) == pytest.approx(box, abs=1e-12)
    assert float(parts.total.data) >= 0.0


def loss_grad_errors(seed: int) -> float:
    """Finite-difference error of the set loss w.r.t. logits and boxes, assignment held fixed."""
    rng = np.random.default_rng(seed)
    n, k = 6, int(rng.integers(1, 4))
    logits = rng.normal(size=(n, 2))
    boxes = random_targets(rng, n).boxes
    tgt = random_targets(rng, k)
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    sigma = hungarian_match(cost_matrix(probs, boxes, tgt))
    e1 = ad.grad_check(lambda t: hungarian_loss(t, Tensor(boxes), tgt, sigma).total, logits)
    e2 = ad.grad_check(lambda t: hungarian_loss(Tensor(logits), t, tgt, sigma).total, boxes)
    return max(e1, e2)


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradient_with_fixed_assignment(seed):
    assert loss_grad_errors(seed) < 1e-4


def test_box_loss_gradient_overlapping_and_disjoint(rng):
    pred = np.array([[0.5, 0.5, 0.33, 0.2], [0.2, 0.2, 0.1, 0.1], [0.45, 0.52, 0.5, 0.4]])
    tgt = np.array([[0.55, 0.48, 0.2, 0.25], [0.8, 0.8, 0.1, 0.2], [0.5, 0.5, 0.2, 0.2]])
    f = lambda t: ad.tsum(box_loss(t, tgt, 5.0, 2.0) * Tensor([1.0, 2.0, 3.0]))
    assert ad.grad_check(f, pred) < 1e-7


def test_weighted_term_and_total():
    w = LossWeights()
    parts = LossParts(Tensor(1.5), Tensor(1.0), Tensor(0.5))
    assert weighted_term(parts, w).data == 6.0
    assert total_loss(parts, None, None, w).data == 6.0
    double = LossParts(Tensor(3.0), Tensor(2.0), Tensor(1.0))
    assert total_loss(double, double, double, w).data == 2 * total_loss(parts, parts, parts, w).data
    assert total_loss(parts, parts, None, w).data == 12.0


def test_target_set_validation():
    with pytest.raises(ValueError):
        TargetSet([0], [[0.5, 0.5, 1.2, 0.1]])
    with pytest.raises(ValueError):
        TargetSet([0, 0], [[0.5, 0.5, 0.1, 0.1]])
    with pytest.raises(ValueError):
        TargetSet([0], [[0.5, 0.5, 0.1, 0.1]], origin="other")
    with pytest.raises(ValueError):
        LossWeights(noobj=-1)
