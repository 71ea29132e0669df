"""Figure rendering for the CLI report paths (loss curves, bench timings).

Figures are written to files next to the delimited output; no interactive
backend is required.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curve(log, path):
    """Render the training loss log as a PNG next to the CSV."""
    iterations = [row[0] for row in log]
    losses = [row[1] for row in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iterations, losses, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("batch-mean loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_bench_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["block", "repeats", "median_seconds", "min_seconds",
                         "max_seconds", "stdev_seconds", "voxels_per_second"])
        for r in rows:
            writer.writerow([r["block"], r["repeats"],
                             f"{r['median_seconds']:.6f}",
                             f"{r['min_seconds']:.6f}",
                             f"{r['max_seconds']:.6f}",
                             f"{r['stdev_seconds']:.6f}",
                             f"{r['voxels_per_second']:.1f}"])


def plot_bench(rows, path):
    """Render block-size timing medians (with min/max whiskers) as a PNG."""
    labels = [f"{r['block']}^3" for r in rows]
    med = [r["median_seconds"] for r in rows]
    lo = [r["median_seconds"] - r["min_seconds"] for r in rows]
    hi = [r["max_seconds"] - r["median_seconds"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, med, yerr=[lo, hi], capsize=4)
    ax.set_xlabel("block size (voxels)")
    ax.set_ylabel("seconds per block (median)")
    ax.set_title("on-demand block generation time")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
