import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssdetr import data, engine
from ssdetr.engine import (EmaState, TrainConfig, TrainingDiverged, ema_update, filter_pseudo_labels,
                           full_train, training_step)
from ssdetr.model import Detector, ModelConfig

TINY = ModelConfig(d_model=8, encoder_layers=1, decoder_layers=1, heads=2, points=2,
                   pyramid_levels=2, num_queries=5, ffn_dim=16, backbone_channels=(4, 8))


@pytest.fixture(scope="module")
def small_ds():
    ds = data.generate(data.SynthDocSpec(height=48, width=48), 24)
    return data.split(ds, 0.3, seed=0)


def params_of(model):
    return {k: v.data.copy() for k, v in model.named_parameters()}


def rngs(seed=0):
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


# ---------------------------------------------------------------------- EMA

def constant_model(value):
    m = Detector(TINY)
    for p in m.parameters():
        p.data[...] = value
    return m


def test_ema_formula_example():
    state = EmaState.from_student(constant_model(0.0), 0.9)
    ema_update(state, constant_model(1.0))
    for p in state.teacher.parameters():
        np.testing.assert_allclose(p.data, 0.1, rtol=0, atol=1e-15)


def test_ema_fixed_point():
    student = Detector(TINY)
    state = EmaState.from_student(student, 0.999)
    before = params_of(state.teacher)
    ema_update(state, student)
    for k, v in params_of(state.teacher).items():
        np.testing.assert_allclose(v, before[k], rtol=0, atol=1e-15)


@pytest.mark.parametrize("m", [0.9, 0.99])
def test_ema_distance_shrinks_geometrically(m):
    teacher0 = Detector(ModelConfig(**{**TINY.__dict__, "seed": 1}))
    student = Detector(ModelConfig(**{**TINY.__dict__, "seed": 2}))
    s = np.concatenate([p.data.ravel() for p in student.parameters()])
    state = EmaState.from_student(teacher0, m)
    d0 = np.linalg.norm(np.concatenate([p.data.ravel() for p in state.teacher.parameters()]) - s)
    for t in range(1, 51):
        ema_update(state, student)
        dt = np.linalg.norm(np.concatenate([p.data.ravel() for p in state.teacher.parameters()]) - s)
        assert abs(dt - m ** t * d0) <= 1e-12 * max(1.0, d0)


def test_ema_rejects_mismatched_structure():
    state = EmaState.from_student(Detector(TINY), 0.9)
    other = Detector(ModelConfig(**{**TINY.__dict__, "num_queries": 6}))
    with pytest.raises(ValueError):
        ema_update(state, other)
    with pytest.raises(ValueError):
        ema_update(state, {"nope": np.zeros(1)})


# ------------------------------------------------------------ pseudo-labels

def test_filter_keeps_confidences_at_or_above_tau():
    fg = np.array([0.9, 0.7, 0.65])
    probs = np.stack([fg, 1 - fg], 1)
    boxes = np.tile([0.5, 0.5, 0.2, 0.2], (3, 1))
    pl = filter_pseudo_labels(probs, boxes, 0.7)
    assert sorted(np.nonzero(np.isin(fg, pl.scores))[0].tolist()) == [0, 1]
    assert (pl.scores >= 0.7).all()


def test_default_tau():
    assert TrainConfig().tau == 0.7


def test_all_below_tau_gives_empty_set():
    probs = np.tile([0.2, 0.8], (4, 1))
    assert len(filter_pseudo_labels(probs, np.full((4, 4), 0.5), 0.7)) == 0


def test_no_object_class_never_becomes_a_label():
    probs = np.array([[0.05, 0.05, 0.9]])
    assert len(filter_pseudo_labels(probs, np.full((1, 4), 0.5), 0.5)) == 0


@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0.01, 0.99), min_size=2, max_size=6))
def test_pseudo_label_count_monotone_in_tau(seed, taus):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(3), size=30)
    boxes = rng.uniform(0.1, 0.9, size=(30, 4))
    counts = [len(filter_pseudo_labels(probs, boxes, t)) for t in sorted(taus)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=1.0)
    with pytest.raises(ValueError):
        TrainConfig(labeled_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="other")


# ----------------------------------------------------------- training step

def _state(cfg, with_teacher):
    state = engine.build_state(TINY, cfg)
    if with_teacher:
        state.ema = EmaState.from_student(state.student, cfg.ema_momentum)
    return state


def test_step_without_unlabeled_is_supervised_step(small_ds):
    cfg = TrainConfig(seed=0)
    lab = engine.dataset_samples(small_ds, small_ds.indices("labeled")[:2])
    a, b = _state(cfg, True), _state(cfg, False)
    training_step(a, lab, [], cfg, *rngs())
    training_step(b, lab, [], cfg, *rngs())
    pa, pb = params_of(a.student), params_of(b.student)
    for k in pa:
        assert np.abs(pa[k] - pb[k]).max() <= 1e-12


def test_step_is_deterministic(small_ds):
    cfg = TrainConfig(seed=0, tau=0.3)
    lab = engine.dataset_samples(small_ds, small_ds.indices("labeled")[:2])
    unl = engine.dataset_samples(small_ds, small_ds.indices("unlabeled")[:2])
    results = []
    for _ in range(2):
        s = _state(cfg, True)
        training_step(s, lab, unl, cfg, *rngs())
        results.append((params_of(s.student), params_of(s.ema.teacher)))
    for k in results[0][0]:
        assert np.array_equal(results[0][0][k], results[1][0][k])
        assert np.array_equal(results[0][1][k], results[1][1][k])


def test_teacher_after_step_is_blend_and_gets_no_gradient(small_ds):
    cfg = TrainConfig(seed=0, tau=0.3, ema_momentum=0.9)
    lab = engine.dataset_samples(small_ds, small_ds.indices("labeled")[:2])
    unl = engine.dataset_samples(small_ds, small_ds.indices("unlabeled")[:2])
    s = _state(cfg, True)
    for p in s.ema.teacher.parameters():
        p.data += 0.01
    teacher_before = params_of(s.ema.teacher)
    training_step(s, lab, unl, cfg, *rngs())
    student_after = params_of(s.student)
    for k, v in params_of(s.ema.teacher).items():
        np.testing.assert_allclose(v, 0.9 * teacher_before[k] + 0.1 * student_after[k], rtol=0, atol=1e-15)
    assert all(p.grad is None and not p.requires_grad for p in s.ema.teacher.parameters())


def test_momentum_one_freezes_teacher(small_ds):
    cfg = TrainConfig(seed=0, tau=0.3, ema_momentum=1.0)
    lab = engine.dataset_samples(small_ds, small_ds.indices("labeled")[:2])
    unl = engine.dataset_samples(small_ds, small_ds.indices("unlabeled")[:2])
    s = _state(cfg, True)
    before = params_of(s.ema.teacher)
    r1, r2 = rngs()
    for _ in range(3):
        training_step(s, lab, unl, cfg, r1, r2)
    for k, v in params_of(s.ema.teacher).items():
        assert np.array_equal(v, before[k])


def test_non_finite_loss_aborts_with_diagnostic(small_ds):
    cfg = TrainConfig(seed=5)
    lab = engine.dataset_samples(small_ds, small_ds.indices("labeled")[:2])
    s = _state(cfg, False)
    s.student.class_head.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        training_step(s, lab, [], cfg, *rngs())
    diag = info.value.diagnostic
    assert diag["seed"] == 5 and diag["labeled_ids"] == [x.image_id for x in lab]


def test_pseudo_labels_land_in_strong_frame():
    from ssdetr import augment
    rng = np.random.default_rng(3)
    img = np.ones((48, 48))
    box = np.array([[0.3, 0.4, 0.2, 0.2]])
    weak = augment.hflip(img, box)
    strong = augment.apply(augment.AugPolicy.strong(crop_p=0.0), img, box, rng)
    original = augment.invert_boxes(weak.record, weak.boxes)
    mapped, _ = augment.map_boxes(strong.record, original)
    np.testing.assert_allclose(mapped, strong.boxes, atol=1e-12)


# -------------------------------------------------------------- full train

def test_empty_labeled_split_rejected(small_ds):
    ds = copy.copy(small_ds)
    ds.splits = ["unlabeled" if s == "labeled" else s for s in small_ds.splits]
    with pytest.raises(ValueError):
        full_train(ds, TrainConfig(epochs=1), TINY)


def test_burn_in_ignores_unlabeled_pool(small_ds):
    cfg = TrainConfig(epochs=2, burn_in_frac=1.0, eval_every=100)
    a = full_train(small_ds, cfg, TINY)
    ds = copy.copy(small_ds)
    ds.images = list(small_ds.images)
    for i in ds.indices("unlabeled"):
        ds.images[i] = np.zeros_like(ds.images[i])
    b = full_train(ds, cfg, TINY)
    pa, pb = params_of(a.student), params_of(b.student)
    assert a.ema is None and all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_full_labels_semi_equals_supervised():
    ds = data.split(data.generate(data.SynthDocSpec(height=48, width=48), 12), 1.0, seed=0)
    semi = full_train(ds, TrainConfig(mode="semi", epochs=2, labeled_fraction=1.0), TINY)
    sup = full_train(ds, TrainConfig(mode="supervised", epochs=2, labeled_fraction=1.0), TINY)
    assert semi.ema is None
    assert [r["mAP"] for r in semi.history] == [r["mAP"] for r in sup.history]


def test_full_train_history_and_teacher_creation(small_ds):
    cfg = TrainConfig(epochs=4, burn_in_frac=0.5, tau=0.05)
    rows = []
    state = full_train(small_ds, cfg, TINY, on_epoch=lambda st, row: rows.append(row))
    assert state.ema is not None
    assert [r["epoch"] for r in state.history] == [1, 2, 3, 4]
    assert rows == state.history
    assert rows[0]["pseudo_count"] == rows[1]["pseudo_count"] == 0
    assert rows[2]["pseudo_count"] > 0
    assert state.step == 4 * len(range(0, len(small_ds.indices("labeled")), cfg.batch_size))
