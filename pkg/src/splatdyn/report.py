"""Delimited trajectory output and matplotlib figures for simulation runs."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "splatdyn",
}


def figsize(width=5.0, height=None):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return width, height or width * golden


def new_figure(width=5.0, height=None, **kw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(STYLE)
    return plt.subplots(figsize=figsize(width, height), **kw)


def save_figure(fig, path):
    import matplotlib.pyplot as plt

    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def write_trajectory(seq, outdir, figures=True):
    """com_trajectory.csv (frame, time, x, y, z) and, optionally, com_trajectory.png."""
    outdir = Path(outdir)
    times = seq.times
    with open(outdir / "com_trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "time_s", "com_x", "com_y", "com_z"])
        for i, (t, c) in enumerate(zip(times, seq.com)):
            w.writerow([i, f"{t:.9g}", *(f"{v:.12g}" for v in c)])
    if figures and len(seq.com) > 0:
        plot_trajectory(times, seq.com, outdir / "com_trajectory.png")


def plot_trajectory(times, com, path):
    com = np.asarray(com)
    fig, ax = new_figure()
    disp = com - com[0]
    for d, name in enumerate("xyz"):
        ax.plot(times, disp[:, d], marker="o", ms=3, label=f"$\\Delta {name}$")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("COM displacement [world units]")
    ax.legend(frameon=False)
    fig.tight_layout()
    save_figure(fig, path)
    return path


def plot_perception_summary(groups, counts, path):
    fig, ax = new_figure(width=4.0)
    ax.bar([str(g) for g in groups], counts, color="0.4")
    ax.set_xlabel("material group")
    ax.set_ylabel("kernels")
    fig.tight_layout()
    save_figure(fig, path)
    return path
