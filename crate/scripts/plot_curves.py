#!/usr/bin/env python3
"""Plot loss curves written by `carryon train`.

Usage: plot_curves.py CURVES.csv [MORE.csv ...] [-o out.png]

Each file becomes one train line and one val line. The x axis is the step.
"""

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

COLUMNS = ["step", "split", "alpha", "loss", "lr", "wallclock_ms"]


def load(path):
    df = pd.read_csv(path)
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        sys.exit(f"{path}: missing columns {missing}")
    return df


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("curves", nargs="+", type=Path)
    ap.add_argument("-o", "--out", type=Path, default=Path("curves.png"))
    ap.add_argument("--smooth", type=int, default=10, help="rolling window for train loss")
    args = ap.parse_args()

    fig, ax = plt.subplots(figsize=(8, 5))
    for path in args.curves:
        df = load(path)
        train = df[df.split == "train"]
        val = df[df.split == "val"]
        smoothed = train.loss.rolling(max(args.smooth, 1), min_periods=1).mean()
        ax.plot(train.step, smoothed, label=f"{path.stem} train")
        if not val.empty:
            ax.plot(val.step, val.loss, marker="o", linestyle="--", label=f"{path.stem} val")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
