"""Time dense vs linear attention and fit log-log scaling slopes.

    python scripts/bench_attention.py --sizes 512,1024,2048,4096 --d 64
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from graphsurv.cli import main as cli


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="512,1024,2048,4096")
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", default="out/bench")
    args = ap.parse_args()

    rc = cli(["bench-attention", "--sizes", args.sizes, "--d", str(args.d),
              "--repeats", str(args.repeats), "--out", args.out])
    if rc != 0:
        sys.exit(rc)

    with open(Path(args.out) / "bench_attention.csv") as fh:
        rows = list(csv.DictReader(fh))
    n = np.array([float(r["n"]) for r in rows])
    dense = np.array([float(r["dense_ms"]) for r in rows])
    linear = np.array([float(r["linear_ms"]) for r in rows])

    print(f"{'n':>6} {'dense_ms':>10} {'linear_ms':>10} {'speedup':>8}")
    for i in range(len(n)):
        print(f"{int(n[i]):>6} {dense[i]:>10.3f} {linear[i]:>10.3f} "
              f"{dense[i] / linear[i]:>8.1f}")
    if len(n) >= 2:
        slope = lambda y: np.polyfit(np.log(n), np.log(y), 1)[0]
        print(f"\nlog-log slope: dense {slope(dense):.2f}, linear {slope(linear):.2f}")


if __name__ == "__main__":
    main()
