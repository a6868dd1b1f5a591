"""Weak and strong augmentation of grayscale pages with box co-transforms.

Every geometric op used here (flip, resize-in-canvas, crop-and-rescale) is
an independent affine map per axis in normalized coordinates, so a whole
chain is tracked as ``x' = ax * x + bx``, ``y' = ay * y + by`` and inverted
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

BACKGROUND = 1.0


@dataclass
class AugPolicy:
    kind: str = "weak"
    flip_p: float = 0.5
    resize_p: float = 0.5
    resize_range: tuple[float, float] = (0.7, 1.3)
    erase_p: float = 0.7
    erase_count: tuple[int, int] = (1, 3)
    erase_max_area: float = 0.15
    crop_p: float = 0.5
    crop_min_area: float = 0.7
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"policy kind must be 'weak' or 'strong', got {self.kind!r}")

    @classmethod
    def weak(cls) -> "AugPolicy":
        return cls(kind="weak")

    @classmethod
    def strong(cls, **overrides) -> "AugPolicy":
        return cls(kind="strong", **overrides)


@dataclass
class TransformRecord:
    ax: float = 1.0
    bx: float = 0.0
    ay: float = 1.0
    by: float = 0.0
    steps: list = field(default_factory=list)

    def then(self, name: str, ax: float, bx: float, ay: float, by: float, **info) -> None:
        self.ax, self.bx = ax * self.ax, ax * self.bx + bx
        self.ay, self.by = ay * self.ay, ay * self.by + by
        self.steps.append((name, ax, bx, ay, by, info))

    def note(self, name: str, **info) -> None:
        self.steps.append((name, 1.0, 0.0, 1.0, 0.0, info))


@dataclass
class AugmentedSample:
    image: np.ndarray
    boxes: np.ndarray          # (K, 4) normalized cx, cy, w, h
    keep: np.ndarray           # indices of input boxes that survived
    record: TransformRecord
    source_boxes: np.ndarray = None   # boxes in the original frame


def _affine(b, ax, bx, ay, by):
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.stack([ax * b[:, 0] + bx, ay * b[:, 1] + by,
                     abs(ax) * b[:, 2], abs(ay) * b[:, 3]], -1)


def _clip(b):
    """Clip cx, cy, w, h boxes to the unit square; boxes already inside are untouched."""
    x1, x2 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    y1, y2 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    out = b.copy()
    spill = (x1 < 0) | (x2 > 1) | (y1 < 0) | (y2 > 1)
    if spill.any():
        cx1, cx2 = np.clip(x1, 0, 1), np.clip(x2, 0, 1)
        cy1, cy2 = np.clip(y1, 0, 1), np.clip(y2, 0, 1)
        clipped = np.stack([(cx1 + cx2) / 2, (cy1 + cy2) / 2, cx2 - cx1, cy2 - cy1], -1)
        out[spill] = clipped[spill]
    keep = np.nonzero((out[:, 2] > 0) & (out[:, 3] > 0))[0]
    return out[keep], keep


def map_boxes(record: TransformRecord, boxes, clip: bool = True):
    """Original frame -> augmented frame; returns (boxes, kept indices).

    Boxes fully outside the frame are dropped, partially outside ones clipped.
    """
    b = _affine(boxes, record.ax, record.bx, record.ay, record.by)
    if not clip:
        return b, np.arange(len(b))
    return _clip(b)


def invert_boxes(record: TransformRecord, boxes) -> np.ndarray:
    """Augmented frame -> original frame (no clipping)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] - record.bx) / record.ax, (b[:, 1] - record.by) / record.ay,
                     b[:, 2] / abs(record.ax), b[:, 3] / abs(record.ay)], -1)


def warp(image: np.ndarray, record: TransformRecord) -> np.ndarray:
    """Resample ``image`` so that content moves by the record's affine map."""
    if record.ax == 1.0 and record.bx == 0.0 and record.ay == 1.0 and record.by == 0.0:
        return image.copy()
    H, W = image.shape
    if record.ax == -1.0 and record.bx == 1.0 and record.ay == 1.0 and record.by == 0.0:
        return image[:, ::-1].copy()
    # output pixel center u' -> source u = (u' - b) / a, in index units
    u = ((np.arange(W) + 0.5) / W - record.bx) / record.ax * W - 0.5
    v = ((np.arange(H) + 0.5) / H - record.by) / record.ay * H - 0.5
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return ndimage.map_coordinates(image, [vv, uu], order=1, mode="constant", cval=BACKGROUND)


def _sample_crop(rng, policy):
    """Window (fw, fh, x0, y0) in normalized units keeping >= crop_min_area of the page."""
    while True:
        fw = rng.uniform(policy.crop_min_area, 1.0)
        fh = rng.uniform(policy.crop_min_area / fw, 1.0)
        if fw * fh >= policy.crop_min_area and fw > 0 and fh > 0:
            return fw, fh, rng.uniform(0.0, 1.0 - fw), rng.uniform(0.0, 1.0 - fh)


def _start(image, boxes, prior: "AugmentedSample | None"):
    if prior is not None:
        return prior.image, prior.source_boxes, TransformRecord(
            prior.record.ax, prior.record.bx, prior.record.ay, prior.record.by,
            list(prior.record.steps))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.size and ((boxes < 0) | (boxes > 1)).any():
        raise ValueError("boxes must be normalized")
    return np.asarray(image, dtype=np.float64), boxes, TransformRecord()


def apply(policy: AugPolicy, image: np.ndarray, boxes, rng: np.random.Generator,
          prior: "AugmentedSample | None" = None) -> AugmentedSample:
    """Augment an image and its normalized cx, cy, w, h boxes.

    Passing ``prior`` chains onto an earlier sample: the new record is the
    composition of both, and boxes are re-derived from the original ones.
    """
    src_image, boxes, rec = _start(image, boxes, prior)
    base = TransformRecord()
    if rng.random() < policy.flip_p:
        base.then("hflip", -1.0, 1.0, 1.0, 0.0)
    if policy.kind == "strong":
        if rng.random() < policy.resize_p:
            s = rng.uniform(*policy.resize_range)
            base.then("resize", s, 0.0, s, 0.0, scale=s)
        if rng.random() < policy.crop_p:
            fw, fh, x0, y0 = _sample_crop(rng, policy)
            base.then("crop", 1.0 / fw, -x0 / fw, 1.0 / fh, -y0 / fh, window=(x0, y0, fw, fh))
    out = warp(src_image, base)
    for step in base.steps:
        rec.then(step[0], *step[1:5], **step[5])
    if policy.kind == "strong":
        H, W = out.shape
        if rng.random() < policy.erase_p:
            lo, hi = policy.erase_count
            for _ in range(int(rng.integers(lo, hi + 1))):
                area = rng.uniform(0.02, policy.erase_max_area) * H * W
                aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
                eh = int(min(H, max(1, round(np.sqrt(area * aspect)))))
                ew = int(min(W, max(1, round(np.sqrt(area / aspect)))))
                y = int(rng.integers(0, H - eh + 1))
                x = int(rng.integers(0, W - ew + 1))
                out[y:y + eh, x:x + ew] = BACKGROUND
                rec.note("erase", patch=(x, y, ew, eh))
        if rng.random() < policy.blur_p:
            sigma = rng.uniform(*policy.blur_sigma)
            out = ndimage.gaussian_filter(out, sigma, mode="nearest")
            rec.note("blur", sigma=sigma)
        rec.note("grayscale")
    new_boxes, keep = map_boxes(rec, boxes)
    return AugmentedSample(out, new_boxes, keep, rec, boxes)


def hflip(image: np.ndarray, boxes=None, prior: "AugmentedSample | None" = None) -> AugmentedSample:
    """Deterministic horizontal flip (chainable like :func:`apply`)."""
    src_image, boxes, rec = _start(image, boxes, prior)
    rec.then("hflip", -1.0, 1.0, 1.0, 0.0)
    new_boxes, keep = map_boxes(rec, boxes)
    return AugmentedSample(src_image[:, ::-1].copy(), new_boxes, keep, rec, boxes)
