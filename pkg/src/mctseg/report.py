"""Report rendering: matplotlib figures plus a delimited summary.

Consumes the training loss log and/or the Dice-matrix CSV and writes
loss_curves.png, dice_by_mask.png and summary.csv into the output
directory.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .train import MATRIX_HEADER, read_matrix_csv

LOSS_COMPONENTS = ("l_um", "l_mm", "l_seg", "l_layer", "l_mfd", "l_total")


def read_loss_csv(path):
    with open(path) as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    steps = np.array([int(r["step"]) for r in rows])
    series = {k: np.array([float(r[k]) for r in rows]) for k in LOSS_COMPONENTS}
    lr = np.array([float(r["lr"]) for r in rows])
    return steps, series, lr


def render_loss_figure(loss_csv, out_path):
    steps, series, lr = read_loss_csv(loss_csv)
    fig, (ax, ax_lr) = plt.subplots(
        2, 1, figsize=(8, 6), sharex=True, height_ratios=[3, 1])
    for name in LOSS_COMPONENTS:
        ax.plot(steps, series[name], label=name, linewidth=1.0)
    ax.set_yscale("log")
    ax.set_ylabel("loss")
    ax.legend(ncol=3, fontsize=8)
    ax.set_title("training losses")
    ax_lr.plot(steps, lr, color="black", linewidth=1.0)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _mask_label(delta):
    names = ("Fl", "T1c", "T1", "T2")
    return "+".join(n for n, d in zip(names, delta) if d)


def render_matrix_figure(matrix_csv, out_path):
    rows, avg = read_matrix_csv(matrix_csv)
    labels = [_mask_label(delta) for delta, *_ in rows]
    scores = np.array([[et, tc, wt] for _, et, tc, wt in rows])
    x = np.arange(len(rows))
    width = 0.27
    fig, ax = plt.subplots(figsize=(11, 4.5))
    for i, (region, color) in enumerate(zip(("ET", "TC", "WT"),
                                            ("#c0392b", "#d68910", "#1f618d"))):
        ax.bar(x + (i - 1) * width, scores[:, i], width, label=region, color=color)
        ax.axhline(avg[i], color=color, linestyle=":", linewidth=1.0)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=60, fontsize=7, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("Dice")
    ax.set_title("Dice by available-modality subset (dotted: 15-mask average)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_summary(out_path, loss_csv=None, matrix_csv=None):
    lines = ["metric,value"]
    if loss_csv is not None:
        steps, series, lr = read_loss_csv(loss_csv)
        lines.append(f"steps,{steps[-1] + 1}")
        for name in LOSS_COMPONENTS:
            lines.append(f"final_{name},{series[name][-1]:.9g}")
    if matrix_csv is not None:
        rows, avg = read_matrix_csv(matrix_csv)
        for region, value in zip(("et", "tc", "wt"), avg):
            lines.append(f"mean_dice_{region},{value:.6f}")
        singles = [r for r in rows if sum(r[0]) == 1]
        for delta, et, tc, wt in singles:
            lines.append(f"single_{_mask_label(delta).lower()}_dice_wt,{wt:.6f}")
    with open(out_path, "w") as f:
        f.write("\n".join(lines) + "\n")


def render_report(out_dir, loss_csv=None, matrix_csv=None):
    """Returns the list of files written."""
    if loss_csv is None and matrix_csv is None:
        raise ValueError("need at least one of loss_csv / matrix_csv")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if loss_csv is not None:
        p = os.path.join(out_dir, "loss_curves.png")
        render_loss_figure(loss_csv, p)
        written.append(p)
    if matrix_csv is not None:
        p = os.path.join(out_dir, "dice_by_mask.png")
        render_matrix_figure(matrix_csv, p)
        written.append(p)
    p = os.path.join(out_dir, "summary.csv")
    write_summary(p, loss_csv=loss_csv, matrix_csv=matrix_csv)
    written.append(p)
    return written
