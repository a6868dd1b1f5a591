"""Synthetic table pages, label-fraction splits, annotation files and PGM image IO."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("labeled", "unlabeled", "val", "test")


# ------------------------------------------------------------------------- PGM

def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary PGM. Float images in [0, 1] are scaled to 0..255."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm_bytes(blob: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("malformed PGM header: truncated")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"malformed PGM header: magic {tokens[0]!r}, expected b'P5'")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"malformed PGM header: {tokens[1:]!r}") from None
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval} (only 255)")
    if w <= 0 or h <= 0:
        raise ValueError(f"malformed PGM header: size {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    data = blob[pos:pos + w * h]
    if len(data) != w * h:
        raise ValueError(f"PGM payload has {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM as uint8 (h, w)."""
    return read_pgm_bytes(Path(path).read_bytes())


def image_io(mode: str, path, image: np.ndarray | None = None):
    if mode == "read":
        return read_pgm(path)
    if mode == "write":
        write_pgm(path, image)
        return image
    raise ValueError(f"mode must be 'read' or 'write', got {mode!r}")


# --------------------------------------------------------------------- dataset

@dataclass
class Dataset:
    """Images with corner-form pixel boxes; ``splits[i]`` is '' until assigned."""

    ids: list[int]
    annotations: list[list[tuple[int, tuple]]]
    sizes: list[tuple[int, int]]                 # (height, width)
    images: list[np.ndarray | None] = None
    paths: list[str | None] = None
    splits: list[str] = None
    categories: list[str] = field(default_factory=lambda: ["table"])
    confusers: list[list[tuple]] | None = None
    skipped: int = 0

    def __post_init__(self):
        n = len(self.ids)
        if self.images is None:
            self.images = [None] * n
        if self.paths is None:
            self.paths = [None] * n
        if self.splits is None:
            self.splits = [""] * n
        if not (len(self.annotations) == len(self.sizes) == len(self.images)
                == len(self.paths) == len(self.splits) == n):
            raise ValueError("dataset fields disagree in length")

    def __len__(self) -> int:
        return len(self.ids)

    def image(self, i: int) -> np.ndarray:
        """Float image in [0, 1], loaded lazily from its path when needed."""
        img = self.images[i]
        if img is None:
            if self.paths[i] is None:
                raise ValueError(f"image {self.ids[i]} has neither pixels nor a path")
            img = read_pgm(self.paths[i]).astype(np.float64) / 255.0
            self.images[i] = img
        return img

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def ground_truth(self, idx=None) -> dict:
        idx = range(len(self)) if idx is None else idx
        return {self.ids[i]: list(self.annotations[i]) for i in idx}

    def normalized_targets(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(classes, cx-cy-w-h boxes normalized by image size) for image i."""
        h, w = self.sizes[i]
        anns = self.annotations[i]
        cls = np.array([c for c, _ in anns], dtype=np.int64)
        if not anns:
            return cls, np.zeros((0, 4))
        b = np.array([box for _, box in anns], dtype=np.float64)
        scale = np.array([w, h, w, h], dtype=np.float64)
        b = b / scale
        out = np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2,
                        b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], -1)
        return cls, np.clip(out, 0.0, 1.0)


# ------------------------------------------------------------------- synthesis

@dataclass
class SynthDocSpec:
    height: int = 96
    width: int = 96
    min_tables: int = 0
    max_tables: int = 3
    text_blocks: tuple[int, int] = (1, 3)
    confuser_prob: float = 0.3
    noise: float = 0.03
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        self.text_blocks = tuple(self.text_blocks)
        if not 0 <= self.min_tables <= self.max_tables:
            raise ValueError("need 0 <= min_tables <= max_tables")


INK = 0.1


def _place(rng, occupied, h, w, page_h, page_w, attempts, margin=2):
    for _ in range(attempts):
        y = int(rng.integers(margin, page_h - h - margin + 1))
        x = int(rng.integers(margin, page_w - w - margin + 1))
        box = (x, y, x + w, y + h)
        if all(box[2] + margin <= o[0] or o[2] + margin <= box[0] or
               box[3] + margin <= o[1] or o[3] + margin <= box[1] for o in occupied):
            return box
    return None


def _draw_table(img, box, rng):
    x1, y1, x2, y2 = box
    img[y1, x1:x2] = INK
    img[y2 - 1, x1:x2] = INK
    img[y1:y2, x1] = INK
    img[y1:y2, x2 - 1] = INK
    rows = int(rng.integers(2, 6))
    cols = int(rng.integers(2, 5))
    ys = np.linspace(y1, y2 - 1, rows + 1).round().astype(int)
    xs = np.linspace(x1, x2 - 1, cols + 1).round().astype(int)
    for y in ys[1:-1]:
        img[y, x1:x2] = INK
    for x in xs[1:-1]:
        img[y1:y2, x] = INK
    # cell contents: a short text stroke in some cells
    for r in range(rows):
        for c in range(cols):
            cy = (ys[r] + ys[r + 1]) // 2
            cx0, cx1 = xs[c] + 2, xs[c + 1] - 2
            if cx1 - cx0 >= 2 and ys[r + 1] - ys[r] >= 4 and rng.random() < 0.7:
                length = int(rng.integers(1, cx1 - cx0 + 1))
                img[cy, cx0:cx0 + length] = INK


def _draw_text(img, box, rng):
    x1, y1, x2, y2 = box
    for y in range(y1, y2, 3):
        length = int(rng.integers(max(1, (x2 - x1) // 2), x2 - x1 + 1))
        img[y, x1:x1 + length] = INK


def _draw_matrix(img, box, rng):
    """Bracketed grid of dots: row/column structure without ruling lines."""
    x1, y1, x2, y2 = box
    img[y1:y2, x1] = INK
    img[y1, x1:x1 + 2] = INK
    img[y2 - 1, x1:x1 + 2] = INK
    img[y1:y2, x2 - 1] = INK
    img[y1, x2 - 2:x2] = INK
    img[y2 - 1, x2 - 2:x2] = INK
    for y in range(y1 + 2, y2 - 2, 4):
        for x in range(x1 + 3, x2 - 3, 4):
            img[y:y + 2, x:x + 2] = INK


def generate_page(spec: SynthDocSpec, rng: np.random.Generator, n_tables: int | None = None):
    """One page: (image uint8, table boxes, confuser boxes)."""
    H, W = spec.height, spec.width
    if n_tables is None:
        n_tables = int(rng.integers(spec.min_tables, spec.max_tables + 1))
    while True:
        img = np.ones((H, W))
        occupied, tables, confusers = [], [], []
        ok = True
        for _ in range(n_tables):
            th = int(rng.integers(14, max(15, min(40, H // 2))))
            tw = int(rng.integers(18, max(19, min(56, W * 2 // 3))))
            box = _place(rng, occupied, th, tw, H, W, spec.max_attempts)
            if box is None:
                ok = False
                break
            occupied.append(box)
            tables.append(box)
            _draw_table(img, box, rng)
        if not ok:
            n_tables -= 1
            continue
        if rng.random() < spec.confuser_prob:
            mh, mw = int(rng.integers(12, 24)), int(rng.integers(14, 28))
            box = _place(rng, occupied, mh, mw, H, W, spec.max_attempts)
            if box is not None:
                occupied.append(box)
                confusers.append(box)
                _draw_matrix(img, box, rng)
        lo, hi = spec.text_blocks
        for _ in range(int(rng.integers(lo, hi + 1))):
            bh, bw = int(rng.integers(4, 16)), int(rng.integers(12, 40))
            box = _place(rng, occupied, bh, bw, H, W, 20)
            if box is not None:
                occupied.append(box)
                _draw_text(img, box, rng)
        if spec.noise > 0:
            img = img + rng.normal(0.0, spec.noise, size=img.shape)
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        return pixels, tables, confusers


def generate(spec: SynthDocSpec, count: int) -> Dataset:
    """Deterministic synthetic corpus; page i uses its own seed derived from (seed, i)."""
    if count < 10:
        raise ValueError(f"count must be >= 10, got {count}")
    images, anns, confs = [], [], []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, i])
        pixels, tables, confusers = generate_page(spec, rng)
        images.append(pixels.astype(np.float64) / 255.0)
        anns.append([(0, tuple(float(v) for v in b)) for b in tables])
        confs.append([tuple(float(v) for v in b) for b in confusers])
    return Dataset(ids=list(range(count)), annotations=anns,
                   sizes=[(spec.height, spec.width)] * count, images=images,
                   confusers=confs)


# ---------------------------------------------------------------------- splits

def split(dataset: Dataset, labeled_fraction: float, seed: int,
          holdout_fraction: float = 0.15, holdout_seed: int = 0) -> Dataset:
    """Assign val/test (15% each, from ``holdout_seed``) then labeled/unlabeled (from ``seed``)."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled fraction must lie in (0, 1], got {labeled_fraction}")
    n = len(dataset)
    order = np.random.default_rng(holdout_seed).permutation(n)
    n_hold = int(round(holdout_fraction * n))
    splits = [""] * n
    for i in order[:n_hold]:
        splits[i] = "val"
    for i in order[n_hold:2 * n_hold]:
        splits[i] = "test"
    train = np.sort(order[2 * n_hold:])
    n_lab = max(1, int(round(labeled_fraction * len(train)))) if len(train) else 0
    chosen = np.random.default_rng(seed).permutation(train)
    for j, i in enumerate(chosen):
        splits[i] = "labeled" if j < n_lab else "unlabeled"
    dataset.splits = splits
    return dataset


# ------------------------------------------------------------ annotation files

def save_annotations(dataset: Dataset, path, image_paths: list[str] | None = None) -> None:
    image_paths = image_paths or [p or f"{i}.pgm" for i, p in zip(dataset.ids, dataset.paths)]
    images, anns = [], []
    ann_id = 1
    for i, img_id in enumerate(dataset.ids):
        h, w = dataset.sizes[i]
        images.append({"id": img_id, "width": w, "height": h, "file_name": image_paths[i]})
        for cls, (x1, y1, x2, y2) in dataset.annotations[i]:
            anns.append({"id": ann_id, "image_id": img_id, "category_id": cls + 1,
                         "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1),
                         "iscrowd": 0})
            ann_id += 1
    cats = [{"id": k + 1, "name": name} for k, name in enumerate(dataset.categories)]
    with open(path, "w") as fh:
        json.dump({"images": images, "annotations": anns, "categories": cats}, fh, indent=1)


def _require(record: dict, key: str, where: str):
    if not isinstance(record, dict) or key not in record:
        raise ValueError(f"missing required field {where}.{key}")
    return record[key]


def load_annotations(path) -> Dataset:
    """Read a detection annotation file; image paths resolve relative to it."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("images", "annotations", "categories"):
        _require(doc, key, "$")
    cats = doc["categories"]
    cat_ids = [_require(c, "id", f"categories[{k}]") for k, c in enumerate(cats)]
    names = [_require(c, "name", f"categories[{k}]") for k, c in enumerate(cats)]
    order = sorted(range(len(cats)), key=lambda k: cat_ids[k])
    cat_index = {cat_ids[k]: j for j, k in enumerate(order)}

    ids, sizes, paths = [], [], []
    index = {}
    for k, rec in enumerate(doc["images"]):
        where = f"images[{k}]"
        img_id = _require(rec, "id", where)
        w = _require(rec, "width", where)
        h = _require(rec, "height", where)
        fname = _require(rec, "file_name", where)
        index[img_id] = len(ids)
        ids.append(img_id)
        sizes.append((int(h), int(w)))
        p = Path(fname)
        paths.append(str(p if p.is_absolute() else path.parent / p))

    anns = [[] for _ in ids]
    skipped = 0
    for k, rec in enumerate(doc["annotations"]):
        where = f"annotations[{k}]"
        img_id = _require(rec, "image_id", where)
        cat = _require(rec, "category_id", where)
        bbox = _require(rec, "bbox", where)
        if img_id not in index:
            raise ValueError(f"{where}.image_id: unknown image {img_id!r}")
        if cat not in cat_index:
            raise ValueError(f"{where}.category_id: unknown category {cat!r}")
        if len(bbox) != 4:
            raise ValueError(f"{where}.bbox: expected 4 numbers, got {bbox!r}")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            skipped += 1
            continue
        anns[index[img_id]].append((cat_index[cat], (x, y, x + w, y + h)))
    if skipped:
        logger.warning("%s: skipped %d boxes with non-positive size", path, skipped)
    return Dataset(ids=ids, annotations=anns, sizes=sizes, paths=paths,
                   categories=[names[k] for k in order], skipped=skipped)


# -------------------------------------------------------------------- manifest

def write_manifest(dataset: Dataset, path, image_paths: list[str]) -> None:
    with open(path, "w") as fh:
        for i, img_id in enumerate(dataset.ids):
            fh.write(json.dumps({"id": img_id, "path": image_paths[i],
                                 "split": dataset.splits[i]}) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_dataset(dataset: Dataset, root) -> None:
    """Write images as PGM, the annotation file and the manifest under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rel = []
    for i, img_id in enumerate(dataset.ids):
        name = f"images/{img_id:05d}.pgm"
        write_pgm(root / name, dataset.image(i))
        rel.append(name)
    save_annotations(dataset, root / "annotations.json", rel)
    write_manifest(dataset, root / "manifest.jsonl", rel)
    if dataset.confusers is not None:
        with open(root / "confusers.json", "w") as fh:
            json.dump({str(k): v for k, v in zip(dataset.ids, dataset.confusers)}, fh)


def load_dataset(root) -> Dataset:
    root = Path(root)
    ds = load_annotations(root / "annotations.json")
    conf = root / "confusers.json"
    if conf.exists():
        with open(conf) as fh:
            raw = json.load(fh)
        ds.confusers = [[tuple(b) for b in raw.get(str(k), [])] for k in ds.ids]
    return ds


def default_output_root() -> Path:
    return Path(os.environ.get("SSDETR_OUT", "runs"))
