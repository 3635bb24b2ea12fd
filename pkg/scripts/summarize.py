"""Print the headline numbers from a run root written by run_experiments.sh."""

import sys
from pathlib import Path

from collectivekv.report import read_csv

METRICS = ("auc", "gauc", "logloss", "compression_rate")


def table(title, rows, key):
    print(f"\n{title}")
    print(f"  {key:>14s} " + " ".join(f"{m:>16s}" for m in METRICS))
    for r in rows:
        print(f"  {r[key]:>14s} " + " ".join(f"{float(r[m]):16.4f}" for m in METRICS))


def main(root: str = "runs") -> int:
    root = Path(root)
    train = [read_csv(root / f"train-{m}/metrics.csv")[1][0] for m in ("baseline", "collective")
             if (root / f"train-{m}/metrics.csv").exists()]
    if train:
        table("train", train, "mode")
    if (root / "ablate/ablate.csv").exists():
        table("ablate", read_csv(root / "ablate/ablate.csv")[1], "arm")
    for name in ("sweep-d-u", "sweep-pool"):
        if (root / name / "sweep.csv").exists():
            table(name, read_csv(root / name / "sweep.csv")[1], "value")
    for summary in sorted(root.glob("analyze-*/summary.txt")):
        print(f"\n{summary.parent.name}")
        print("".join(f"  {line}\n" for line in summary.read_text().splitlines()), end="")
    if (root / "bench/bench.csv").exists():
        print("\nbench")
        for r in read_csv(root / "bench/bench.csv")[1]:
            print(f"  batch {int(r['batch_size']):4d}  baseline {float(r['baseline_ms']):9.4f} ms  "
                  f"ratio {float(r['ratio']):7.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
