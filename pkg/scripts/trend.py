"""Semi-supervised vs supervised-only on the default synthetic corpus.

Trains both modes for each seed at the given label fraction and prints the
paired test mAP difference. Usage:

    python scripts/trend.py --out runs/trend --seeds 0 1 2 --labels 0.1
"""
import argparse
import statistics
import time
from pathlib import Path

from ssdetr import cli, data


def run_trend(out: Path, seeds=(0, 1, 2), labels: float = 0.1, count: int = 300) -> list[dict]:
    base = cli.RunConfig(count=count)
    ds_root = Path(out) / "data"
    if not (ds_root / "manifest.jsonl").exists():
        base.out = str(ds_root)
        cli.cmd_generate(base, force=True)
    ds = data.load_dataset(ds_root)
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for mode in ("supervised", "semi"):
            cfg = cli.RunConfig(count=count, dataset=str(ds_root), seed=seed,
                                out=str(Path(out) / f"{mode}-seed{seed}"))
            cfg.train.mode = mode
            cfg.train.labeled_fraction = labels
            t0 = time.perf_counter()
            final = cli.cmd_train(cfg, force=True, ds=data.split(ds, labels, seed))
            row[mode] = final["mAP"]
            row[f"{mode}_time"] = time.perf_counter() - t0
        row["gain"] = row["semi"] - row["supervised"]
        rows.append(row)
    return rows


def median_gain(rows: list[dict]) -> float:
    return statistics.median(r["gain"] for r in rows)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(data.default_output_root() / "trend"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--labels", type=float, default=0.1)
    ap.add_argument("--count", type=int, default=300)
    args = ap.parse_args()
    rows = run_trend(Path(args.out), args.seeds, args.labels, args.count)
    cli.write_csv(Path(args.out) / "trend.csv", rows, list(rows[0]))
    for r in rows:
        print(f"seed {r['seed']}: supervised {r['supervised']:.4f} semi {r['semi']:.4f} gain {r['gain']:+.4f}")
    print(f"median gain {median_gain(rows):+.4f} mAP")


if __name__ == "__main__":
    main()
