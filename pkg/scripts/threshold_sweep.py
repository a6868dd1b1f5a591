"""Pseudo-label counts across confidence thresholds.

Trains one semi-supervised run, freezes its teacher, and counts how many
teacher predictions on the unlabeled pool pass each threshold. Then runs the
CLI tau ablation for the per-run view. Usage:

    python scripts/threshold_sweep.py --out runs/sweep --epochs 12
"""
import argparse
from pathlib import Path

import numpy as np

from ssdetr import cli, data, engine
from ssdetr.autodiff import load_checkpoint
from ssdetr.model import Detector

GRID = [0.5, 0.6, 0.7, 0.8, 0.9]


def frozen_counts(run_dir: Path, cfg: cli.RunConfig, grid=GRID) -> list[int]:
    ds = data.split(data.load_dataset(cfg.dataset), cfg.train.labeled_fraction, cfg.seed)
    teacher = Detector(cfg.model)
    teacher.load_state_dict(load_checkpoint(run_dir / "final.ckpt"))
    idx = ds.indices("unlabeled")
    probs, boxes = engine.predict(teacher, np.stack([ds.image(i) for i in idx]))
    return [sum(len(engine.filter_pseudo_labels(p, b, tau).scores) for p, b in zip(probs, boxes))
            for tau in grid]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(data.default_output_root() / "sweep"))
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    cfg = cli.RunConfig(out=str(out / "data"), seed=args.seed)
    if not (out / "data" / "manifest.jsonl").exists():
        cli.cmd_generate(cfg, force=True)
    cfg.dataset = str(out / "data")
    cfg.train.epochs = args.epochs
    cfg.out = str(out / "teacher")
    cli.cmd_train(cfg, force=True)
    for tau, n in zip(GRID, frozen_counts(out / "teacher", cfg)):
        print(f"tau {tau:.1f}: {n} pseudo-labels on the unlabeled pool")
    if not args.skip_ablation:
        cfg.out = str(out / "ablate")
        cli.cmd_ablate(cfg, "tau", GRID, force=True)


if __name__ == "__main__":
    main()
