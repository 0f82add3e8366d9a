"""Plot training-loss curves from the ``*.log.jsonl`` files the CLI writes.

    python3 scripts/plot_losses.py runs/cli/pre.ckpt.log.jsonl runs/cli/bank.ckpt.log.jsonl -o losses.png
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def smooth(y, window):
    if window <= 1 or len(y) < window:
        return np.asarray(y)
    return np.convolve(y, np.ones(window) / window, mode="valid")


def main():
    ap = argparse.ArgumentParser(description="plot loss curves")
    ap.add_argument("logs", nargs="+")
    ap.add_argument("-o", "--out", default="losses.png")
    ap.add_argument("--window", type=int, default=10)
    args = ap.parse_args()

    fig, axes = plt.subplots(1, len(args.logs), figsize=(4 * len(args.logs), 3), squeeze=False)
    for ax, path in zip(axes[0], args.logs):
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        loss = [r["loss"] for r in records]
        ax.plot(smooth(loss, args.window))
        if records and "kd" in records[0]:
            ax.plot(smooth([r["kd"] for r in records], args.window), label="kd")
            ax.legend()
        ax.set_title(records[0]["stage"] if records else Path(path).name)
        ax.set_xlabel("step")
    axes[0][0].set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(args.out)


if __name__ == "__main__":
    main()
