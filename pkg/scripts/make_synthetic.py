#!/usr/bin/env python3
"""Write synthetic train/test CSVs in a dataset's file layout."""
import argparse
from pathlib import Path

from fslpn import synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--schema", choices=("unsw_nb15", "nsl_kdd"), default="unsw_nb15")
    ap.add_argument("--train-rows", type=int, default=5000)
    ap.add_argument("--test-rows", type=int, default=2000)
    ap.add_argument("--separation", type=float, default=1.5,
                    help="class separation on the log scale; smaller is harder")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, n, seed in (("train", args.train_rows, args.seed), ("test", args.test_rows, args.seed + 1)):
        path = args.out_dir / f"{name}.csv"
        synthetic.write_csv(path, args.schema, n, seed=seed, separation=args.separation)
        print(path)


if __name__ == "__main__":
    main()
