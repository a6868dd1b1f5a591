"""Command line: generate, train, eval, ablate.

Configuration is a YAML file with ``data``, ``model`` and ``train`` sections;
flags override file values and the resolved config is written next to every
run's artifacts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from . import data, engine
from .metrics import REPORT_THRESHOLDS, EvalReport, evaluate
from .model import Detector, ModelConfig

logger = logging.getLogger("ssdetr")

METRIC_FIELDS = ["epoch", "split", "mAP", "AP50", "AP75", "AR", "loss", "sup_cls", "sup_box",
                 "unsup_cls", "unsup_box", "pseudo_count", "pseudo_conf"]
SWEEP_FIELDS = ["kind", "value", "mAP", "AP50", "AP75", "pseudo_count", "pseudo_conf", "wall_time"]


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    data: data.SynthDocSpec = field(default_factory=data.SynthDocSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: engine.TrainConfig = field(default_factory=engine.TrainConfig)
    count: int = 300
    dataset: str = ""
    out: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(data=data.SynthDocSpec(**d.pop("data", {}) or {}),
                       model=ModelConfig(**d.pop("model", {}) or {}),
                       train=engine.TrainConfig(**d.pop("train", {}) or {}), **d)
        except TypeError as exc:
            raise CliError(f"bad config: {exc}") from None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_dict(raw)


def write_config(cfg: RunConfig, path: Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in fields])


def _run_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) if cfg.out else data.default_output_root() / name


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


# -------------------------------------------------------------------- generate

def cmd_generate(cfg: RunConfig, force: bool = False) -> Path:
    out = _run_dir(cfg, "data")
    _prepare_out(out, force)
    ds = data.generate(cfg.data, cfg.count)
    data.save_dataset(ds, out)
    write_config(cfg, out / "config.yaml")
    n_tables = sum(len(a) for a in ds.annotations)
    print(f"wrote {len(ds)} images, {n_tables} tables to {out}")
    return out


# ----------------------------------------------------------------------- train

def _load_split(cfg: RunConfig) -> data.Dataset:
    if not cfg.dataset:
        raise CliError("no dataset given (--data)")
    if not (Path(cfg.dataset) / "annotations.json").exists():
        raise CliError(f"no dataset at {cfg.dataset}")
    ds = data.load_dataset(cfg.dataset)
    return data.split(ds, cfg.train.labeled_fraction, cfg.seed)


def cmd_train(cfg: RunConfig, force: bool = False, ds: data.Dataset | None = None) -> dict:
    """Train one run; returns the final test row plus cumulative pseudo-label stats."""
    out = _run_dir(cfg, "train")
    _prepare_out(out, force)
    cfg.train.seed = cfg.seed
    cfg.model.seed = cfg.seed
    write_config(cfg, out / "config.yaml")
    ds = ds if ds is not None else _load_split(cfg)
    rows: list[dict] = []
    best = {"mAP": -math.inf}

    def on_epoch(state: engine.TrainState, row: dict) -> None:
        rows.append(row)
        write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
        if row["mAP"] == row["mAP"] and row["mAP"] > best["mAP"]:
            best["mAP"] = row["mAP"]
            ad.save_checkpoint(out / "best.ckpt", state.eval_model().state_dict())

    try:
        state = engine.full_train(ds, cfg.train, cfg.model, on_epoch=on_epoch)
    except engine.TrainingDiverged as exc:
        (out / "diverged.json").write_text(json.dumps(exc.diagnostic, indent=1))
        raise CliError(f"training diverged: {exc.diagnostic}") from None
    model = state.eval_model()
    ad.save_checkpoint(out / "final.ckpt", model.state_dict())
    if not (out / "best.ckpt").exists():
        ad.save_checkpoint(out / "best.ckpt", model.state_dict())
    test_idx = ds.indices("test")
    report = engine.evaluate_model(model, ds, test_idx) if test_idx else None
    final = engine.history_row(state.epoch, "test", report, engine.StepStats(), 0)
    final.update({k: "" for k in ("loss", "sup_cls", "sup_box", "unsup_cls", "unsup_box")})
    final["pseudo_count"] = sum(r["pseudo_count"] for r in rows)
    conf = sum(r["pseudo_conf"] * r["pseudo_count"] for r in rows)
    final["pseudo_conf"] = conf / final["pseudo_count"] if final["pseudo_count"] else 0.0
    rows.append(final)
    write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
    print(f"{out}: test mAP {final['mAP']:.4f} AP50 {final['AP50']:.4f}")
    return final


# ------------------------------------------------------------------------ eval

GT_GRAY = 0.0
PRED_GRAY = 0.5


def draw_box(img: np.ndarray, box, gray: float) -> None:
    """Burn a 1-px outline of a corner-form pixel box into ``img``."""
    h, w = img.shape
    x1, y1, x2, y2 = box
    c1, c2 = int(np.clip(round(x1), 0, w - 1)), int(np.clip(round(x2) - 1, 0, w - 1))
    r1, r2 = int(np.clip(round(y1), 0, h - 1)), int(np.clip(round(y2) - 1, 0, h - 1))
    if c2 < c1 or r2 < r1:
        return
    img[r1, c1:c2 + 1] = gray
    img[r2, c1:c2 + 1] = gray
    img[r1:r2 + 1, c1] = gray
    img[r1:r2 + 1, c2] = gray


def cmd_eval(cfg: RunConfig, checkpoint: str | None, split: str = "test",
             thresholds=REPORT_THRESHOLDS, predictions: str | None = None,
             score_threshold: float = 0.5) -> EvalReport:
    out = _run_dir(cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_split(cfg)
    idx = ds.indices(split) if split != "all" else list(range(len(ds)))
    if not idx:
        raise CliError(f"split {split!r} is empty")
    if predictions:
        with open(predictions) as fh:
            records = json.load(fh)
    else:
        if not checkpoint:
            raise CliError("eval needs --checkpoint or --predictions")
        model = Detector(cfg.model)
        try:
            model.load_state_dict(ad.load_checkpoint(checkpoint))
        except (ValueError, OSError) as exc:
            raise CliError(f"checkpoint does not fit the model config: {exc}") from None
        images = np.stack([ds.image(i) for i in idx])
        probs, boxes = engine.predict(model, images)
        records = engine.detections_to_records([ds.ids[i] for i in idx], probs, boxes,
                                               [ds.sizes[i] for i in idx])
    keep = {ds.ids[i] for i in idx}
    records = [r for r in records if r["image_id"] in keep]
    report = evaluate(records, ds.ground_truth(idx), report_thresholds=tuple(thresholds),
                      score_threshold=score_threshold)
    write_csv(out / "report.csv", report.rows(), ["metric", "iou", "value"])
    overlay_dir = out / "overlays"
    overlay_dir.mkdir(exist_ok=True)
    by_image: dict = {}
    for r in records:
        by_image.setdefault(r["image_id"], []).append(r)
    for i in idx:
        img = ds.image(i).copy()
        for _, box in ds.annotations[i]:
            draw_box(img, box, GT_GRAY)
        for r in by_image.get(ds.ids[i], []):
            if r["score"] >= score_threshold:
                x, y, w, h = r["bbox"]
                draw_box(img, (x, y, x + w, y + h), PRED_GRAY)
        data.write_pgm(overlay_dir / f"{ds.ids[i]}.pgm", img)
    for row in report.rows():
        print(f"{row['metric']:>9} {row['iou']!s:>4} {row['value']:.4f}")
    return report


# ---------------------------------------------------------------------- ablate

def cmd_ablate(cfg: RunConfig, kind: str, grid: list[float], force: bool = False) -> list[dict]:
    if kind not in ("tau", "queries"):
        raise CliError(f"unknown ablation {kind!r}")
    root = _run_dir(cfg, f"ablate-{kind}")
    _prepare_out(root, force)
    write_config(cfg, root / "config.yaml")
    ds = _load_split(cfg)
    rows = []
    for value in grid:
        run = RunConfig.from_dict(cfg.to_dict())
        if kind == "tau":
            run.train.tau = float(value)
        else:
            run.model = ModelConfig(**{**dataclasses.asdict(run.model), "num_queries": int(value)})
        run.out = str(root / f"{kind}-{value}")
        t0 = time.perf_counter()
        final = cmd_train(run, force=force, ds=ds)
        rows.append({"kind": kind, "value": value, "mAP": final["mAP"], "AP50": final["AP50"],
                     "AP75": final["AP75"], "pseudo_count": final["pseudo_count"],
                     "pseudo_conf": final["pseudo_conf"],
                     "wall_time": round(time.perf_counter() - t0, 3)})
        write_csv(root / "sweep.csv", rows, SWEEP_FIELDS)
    return rows


# ------------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdetr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("generate", help="write a synthetic corpus"))
    g.add_argument("--count", type=int)
    g.add_argument("--force", action="store_true")

    def train_flags(sp):
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--mode", choices=["supervised", "semi"])
        sp.add_argument("--labels", type=float, help="labeled fraction")
        sp.add_argument("--tau", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--queries", type=int)
        sp.add_argument("--force", action="store_true")

    train_flags(common(sub.add_parser("train", help="train a detector")))

    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--labels", type=float)
    e.add_argument("--split", default="test")
    e.add_argument("--predictions", help="JSON detection records to score instead of a model")
    e.add_argument("--thresholds", type=float, nargs="+", default=list(REPORT_THRESHOLDS))
    e.add_argument("--score-threshold", type=float, default=0.5)

    a = common(sub.add_parser("ablate", help="sweep tau or the number of queries"))
    train_flags(a)
    a.add_argument("--kind", choices=["tau", "queries"], required=True)
    a.add_argument("--grid", type=float, nargs="+")
    return p


DEFAULT_GRIDS = {"tau": [0.5, 0.6, 0.7, 0.8, 0.9], "queries": [3, 30, 300]}


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data.seed = args.seed if args.command == "generate" else cfg.data.seed
    if getattr(args, "count", None) is not None:
        cfg.count = args.count
    if getattr(args, "data", None):
        cfg.dataset = args.data
    if getattr(args, "mode", None):
        cfg.train.mode = args.mode
    if getattr(args, "labels", None) is not None:
        cfg.train.labeled_fraction = args.labels
    if getattr(args, "tau", None) is not None:
        cfg.train.tau = args.tau
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "queries", None) is not None:
        cfg.model.num_queries = args.queries
    # re-run validation on the overridden values
    cfg.train = engine.TrainConfig(**dataclasses.asdict(cfg.train))
    cfg.model = ModelConfig(**dataclasses.asdict(cfg.model))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "generate":
            cmd_generate(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.force)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.split, args.thresholds, args.predictions,
                     args.score_threshold)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.kind, args.grid or DEFAULT_GRIDS[args.kind], args.force)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
