"""Plot per-variant median training loss from a train_log.csv.

    python scripts/plot_training.py runs/toy/strides/train_log.csv curves.png
"""

import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def main(src, dst):
    curves = defaultdict(lambda: defaultdict(list))
    with open(src) as fh:
        for row in csv.DictReader(fh):
            curves[row["variant"]][int(row["seed"])].append(float(row["loss"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, seeds in curves.items():
        runs = np.array(list(seeds.values()))
        ax.plot(np.median(runs, axis=0), label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss (median over seeds)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(dst, dpi=120)


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
