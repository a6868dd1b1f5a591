"""Teacher-student training: burn-in, confidence-filtered pseudo-labels, EMA teacher."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import augment
from . import autodiff as ad
from .data import Dataset
from .matching import LossParts, LossWeights, TargetSet, detection_loss, total_loss
from .metrics import EvalReport, evaluate
from .model import DetectionOutput, Detector, ModelConfig

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    mode: str = "semi"               # "semi" or "supervised"
    tau: float = 0.7
    epochs: int = 60
    lr: float = 1e-3
    lr_drop_frac: float = 0.8
    lr_drop_factor: float = 0.1
    batch_size: int = 4
    unlabeled_batch_size: int = 4
    labeled_fraction: float = 0.10
    burn_in_frac: float = 0.25
    ema_momentum: float = 0.99       # desk-scale runs take only a few hundred steps
    grad_clip: float = 0.1
    weight_decay: float = 1e-4
    eval_every: int = 1
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    strong_aug: augment.AugPolicy = field(default_factory=augment.AugPolicy.strong)
    weak_aug: augment.AugPolicy = field(default_factory=augment.AugPolicy.weak)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.strong_aug, dict):
            self.strong_aug = augment.AugPolicy(**self.strong_aug)
        if isinstance(self.weak_aug, dict):
            self.weak_aug = augment.AugPolicy(**self.weak_aug)
        if self.mode not in ("semi", "supervised"):
            raise ValueError(f"mode must be 'semi' or 'supervised', got {self.mode!r}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled fraction must lie in (0, 1], got {self.labeled_fraction}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"EMA momentum must lie in [0, 1], got {self.ema_momentum}")

    @property
    def burn_in_epochs(self) -> int:
        return int(round(self.burn_in_frac * self.epochs))

    @property
    def lr_drop_epoch(self) -> int:
        return int(round(self.lr_drop_frac * self.epochs))


# ----------------------------------------------------------------- optimizer

class Adam:
    """Adam with decoupled weight decay, applied in parameter order."""

    def __init__(self, params: list[ad.Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[ad.Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


# ----------------------------------------------------------------------- EMA

@dataclass
class EmaState:
    teacher: Detector
    momentum: float = 0.999

    @classmethod
    def from_student(cls, student: Detector, momentum: float) -> "EmaState":
        teacher = copy.deepcopy(student)
        teacher.freeze()
        return cls(teacher, momentum)


def ema_update(state: EmaState, student_params: dict[str, np.ndarray] | Detector) -> EmaState:
    """theta_t <- m * theta_t + (1 - m) * theta_s, in place."""
    if isinstance(student_params, Detector):
        student_params = {k: v.data for k, v in student_params.named_parameters()}
    m = state.momentum
    teacher = dict(state.teacher.named_parameters())
    if teacher.keys() != student_params.keys():
        raise ValueError("teacher and student parameters are not structurally congruent")
    for name, t in teacher.items():
        s = student_params[name]
        if s.shape != t.shape:
            raise ValueError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data[...] = m * t.data + (1.0 - m) * s
    return state


# ------------------------------------------------------------ pseudo-labels

@dataclass
class PseudoLabelSet:
    classes: np.ndarray
    boxes: np.ndarray
    scores: np.ndarray
    teacher_step: int = -1

    def __len__(self) -> int:
        return len(self.classes)

    def targets(self) -> TargetSet:
        return TargetSet(self.classes, np.clip(self.boxes, 0.0, 1.0), origin="pseudo")


def filter_pseudo_labels(probs: np.ndarray, boxes: np.ndarray, tau: float,
                         teacher_step: int = -1) -> PseudoLabelSet:
    """Keep teacher predictions whose best foreground probability is >= tau.

    ``probs`` (N, C+1) are softmax outputs with no-object last; the
    no-object class never produces a pseudo-label.
    """
    fg = np.asarray(probs)[:, :-1]
    conf = fg.max(axis=1)
    cls = fg.argmax(axis=1)
    keep = np.nonzero(conf >= tau)[0]
    return PseudoLabelSet(cls[keep].astype(np.int64), np.asarray(boxes)[keep].copy(),
                          conf[keep], teacher_step)


# ------------------------------------------------------------------ batches

@dataclass
class Sample:
    image: np.ndarray
    classes: np.ndarray
    boxes: np.ndarray          # normalized cx, cy, w, h
    image_id: int = -1


def dataset_samples(ds: Dataset, idx) -> list[Sample]:
    out = []
    for i in idx:
        cls, boxes = ds.normalized_targets(i)
        out.append(Sample(ds.image(i), cls, boxes, ds.ids[i]))
    return out


@dataclass
class TrainState:
    student: Detector
    optimizer: Adam
    ema: EmaState | None = None
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def eval_model(self) -> Detector:
        return self.ema.teacher if self.ema is not None else self.student


@dataclass
class StepStats:
    loss: float = 0.0
    sup_cls: float = 0.0
    sup_box: float = 0.0
    unsup_cls: float = 0.0
    unsup_box: float = 0.0
    pseudo_count: int = 0
    pseudo_conf_sum: float = 0.0


def _slice(out: DetectionOutput, lo: int, hi: int) -> DetectionOutput:
    return DetectionOutput(out.logits[lo:hi], out.boxes[lo:hi])


def make_pseudo_targets(teacher: Detector, weak_views: list[augment.AugmentedSample],
                        strong_views: list[augment.AugmentedSample], tau: float,
                        step: int) -> list[PseudoLabelSet]:
    """Teacher predictions on weak views, filtered and mapped into the strong frames."""
    if not weak_views:
        return []
    out = teacher(np.stack([v.image for v in weak_views]))
    probs = out.probs()
    sets = []
    for b, (weak, strong) in enumerate(zip(weak_views, strong_views)):
        pl = filter_pseudo_labels(probs[b], out.boxes.data[b], tau, step)
        original = augment.invert_boxes(weak.record, pl.boxes)
        mapped, keep = augment.map_boxes(strong.record, original)
        sets.append(PseudoLabelSet(pl.classes[keep], mapped, pl.scores[keep], step))
    return sets


def training_step(state: TrainState, labeled: list[Sample], unlabeled: list[Sample],
                  cfg: TrainConfig, rng_lab: np.random.Generator,
                  rng_unl: np.random.Generator) -> StepStats:
    """One optimizer step on the student, followed by the EMA teacher update.

    The teacher sees only weak views of unlabeled images; the student sees
    strong and weak views of labeled images and strong views of unlabeled
    images. With no unlabeled images (or no teacher yet) this is a plain
    supervised step.
    """
    w = cfg.loss
    lab_strong = [augment.apply(cfg.strong_aug, s.image, s.boxes, rng_lab) for s in labeled]
    lab_weak = [augment.apply(cfg.weak_aug, s.image, s.boxes, rng_lab) for s in labeled]
    lab_targets = [TargetSet(s.classes[v.keep], v.boxes) for s, v in zip(labeled, lab_strong)]
    lab_targets += [TargetSet(s.classes[v.keep], v.boxes) for s, v in zip(labeled, lab_weak)]

    use_unlabeled = state.ema is not None and len(unlabeled) > 0
    pseudo: list[PseudoLabelSet] = []
    unl_strong: list[augment.AugmentedSample] = []
    if use_unlabeled:
        unl_weak = [augment.apply(cfg.weak_aug, s.image, np.zeros((0, 4)), rng_unl) for s in unlabeled]
        unl_strong_all = [augment.apply(cfg.strong_aug, s.image, np.zeros((0, 4)), rng_unl)
                          for s in unlabeled]
        pseudo_all = make_pseudo_targets(state.ema.teacher, unl_weak, unl_strong_all, cfg.tau, state.step)
        for view, pl in zip(unl_strong_all, pseudo_all):
            if len(pl):
                unl_strong.append(view)
                pseudo.append(pl)

    n_lab = len(labeled)
    images = [v.image for v in lab_strong] + [v.image for v in lab_weak] + [v.image for v in unl_strong]
    diagnostic = {"step": state.step, "seed": cfg.seed,
                  "labeled_ids": [s.image_id for s in labeled],
                  "unlabeled_ids": [s.image_id for s in unlabeled]}
    state.student.zero_grad()
    try:
        with ad.Tape() as tape:
            out = state.student(np.stack(images))
            parts_s = detection_loss(_slice(out, 0, n_lab), lab_targets[:n_lab], w)
            parts_w = detection_loss(_slice(out, n_lab, 2 * n_lab), lab_targets[n_lab:], w)
            parts_u: LossParts | None = None
            if pseudo:
                parts_u = detection_loss(_slice(out, 2 * n_lab, len(images)),
                                         [p.targets() for p in pseudo], w)
            loss = total_loss(parts_s, parts_w, parts_u, w) * (1.0 / n_lab)
    except ad.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite values: {exc}", diagnostic) from None
    if not np.isfinite(loss.data):
        raise TrainingDiverged("non-finite loss", diagnostic)
    tape.backward(loss)
    params = state.student.parameters()
    clip_grad_norm(params, cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    if state.ema is not None:
        ema_update(state.ema, state.student)

    stats = StepStats(loss=float(loss.data),
                      sup_cls=float(parts_s.cls.data + parts_w.cls.data) / n_lab,
                      sup_box=float(parts_s.box.data + parts_w.box.data) / n_lab)
    if parts_u is not None:
        stats.unsup_cls = float(parts_u.cls.data) / n_lab
        stats.unsup_box = float(parts_u.box.data) / n_lab
    stats.pseudo_count = int(sum(len(p) for p in pseudo))
    stats.pseudo_conf_sum = float(sum(p.scores.sum() for p in pseudo))
    return stats


# --------------------------------------------------------------- evaluation

def predict(model: Detector, images: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities (n, N, C+1) and normalized boxes (n, N, 4), no tape."""
    probs, boxes = [], []
    for lo in range(0, len(images), batch_size):
        out = model(images[lo:lo + batch_size])
        probs.append(out.probs())
        boxes.append(out.boxes.data)
    return np.concatenate(probs), np.concatenate(boxes)


def detections_to_records(image_ids, probs: np.ndarray, boxes: np.ndarray,
                          sizes) -> list[dict]:
    """Every query becomes one record scored by its best foreground probability."""
    records = []
    for img_id, p, b, (h, w) in zip(image_ids, probs, boxes, sizes):
        fg = p[:, :-1]
        cls = fg.argmax(1)
        score = fg.max(1)
        x1 = (b[:, 0] - b[:, 2] / 2) * w
        y1 = (b[:, 1] - b[:, 3] / 2) * h
        for q in range(len(p)):
            records.append({"image_id": img_id, "category_id": int(cls[q]),
                            "bbox": [float(x1[q]), float(y1[q]), float(b[q, 2] * w), float(b[q, 3] * h)],
                            "score": float(score[q])})
    return records


def evaluate_model(model: Detector, ds: Dataset, idx, **kw) -> EvalReport:
    idx = list(idx)
    images = np.stack([ds.image(i) for i in idx])
    probs, boxes = predict(model, images)
    records = detections_to_records([ds.ids[i] for i in idx], probs, boxes, [ds.sizes[i] for i in idx])
    return evaluate(records, ds.ground_truth(idx), **kw)


# ----------------------------------------------------------------- schedule

def _rngs(seed: int):
    lab_order, lab_aug, unl_order, unl_aug = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(lab_order), np.random.default_rng(lab_aug),
            np.random.default_rng(unl_order), np.random.default_rng(unl_aug))


class _Cycler:
    def __init__(self, items: list, rng: np.random.Generator):
        self.items = items
        self.rng = rng
        self.order: list = []

    def take(self, n: int) -> list:
        out = []
        while self.items and len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self.order.pop(0)])
        return out


def build_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    student = Detector(model_cfg)
    return TrainState(student, Adam(student.parameters(), cfg.lr, cfg.weight_decay))


def history_row(epoch: int, split: str, report: EvalReport | None, acc: StepStats,
                steps: int) -> dict:
    row = {"epoch": epoch, "split": split}
    for k in ("mAP", "AP50", "AP75", "AR"):
        row[k] = getattr(report, k) if report is not None else float("nan")
    n = max(steps, 1)
    row.update(loss=acc.loss / n, sup_cls=acc.sup_cls / n, sup_box=acc.sup_box / n,
               unsup_cls=acc.unsup_cls / n, unsup_box=acc.unsup_box / n,
               pseudo_count=acc.pseudo_count,
               pseudo_conf=acc.pseudo_conf_sum / acc.pseudo_count if acc.pseudo_count else 0.0)
    return row


def full_train(ds: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
               on_epoch=None, state: TrainState | None = None) -> TrainState:
    """Two-stage schedule: burn-in on labeled data, then joint teacher-student training.

    The teacher is a copy of the student at the end of burn-in; it is only
    created in semi mode when the unlabeled pool is non-empty, so a semi run
    without unlabeled data is exactly a supervised run. Evaluation uses the
    teacher when one exists.
    """
    lab_idx = ds.indices("labeled")
    unl_idx = ds.indices("unlabeled") if cfg.mode == "semi" else []
    val_idx = ds.indices("val")
    if not lab_idx:
        raise ValueError("labeled split is empty")
    labeled = dataset_samples(ds, lab_idx)
    unlabeled = dataset_samples(ds, unl_idx)
    rng_lab_order, rng_lab, rng_unl_order, rng_unl = _rngs(cfg.seed)
    unl_cycle = _Cycler(unlabeled, rng_unl_order)
    state = state or build_state(model_cfg, cfg)

    for epoch in range(state.epoch, cfg.epochs):
        if epoch == cfg.burn_in_epochs and unlabeled and state.ema is None:
            state.ema = EmaState.from_student(state.student, cfg.ema_momentum)
        state.optimizer.lr = cfg.lr * (cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else 1.0)
        order = rng_lab_order.permutation(len(labeled))
        acc = StepStats()
        steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [labeled[i] for i in order[lo:lo + cfg.batch_size]]
            unl = unl_cycle.take(cfg.unlabeled_batch_size) if state.ema is not None else []
            st = training_step(state, batch, unl, cfg, rng_lab, rng_unl)
            for k in ("loss", "sup_cls", "sup_box", "unsup_cls", "unsup_box", "pseudo_count",
                      "pseudo_conf_sum"):
                setattr(acc, k, getattr(acc, k) + getattr(st, k))
            steps += 1
        state.epoch = epoch + 1
        report = None
        if val_idx and (state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs):
            report = evaluate_model(state.eval_model(), ds, val_idx)
        row = history_row(state.epoch, "val", report, acc, steps)
        state.history.append(row)
        logger.info("epoch %d loss %.4f val mAP %.4f pseudo %d", state.epoch, row["loss"],
                    row["mAP"], row["pseudo_count"])
        if on_epoch is not None:
            on_epoch(state, row)
    return state
