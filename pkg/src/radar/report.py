"""Report rendering: figures and delimited files next to the JSON output.

Training runs get a loss/validation-mAP curve; evaluations get a metric
bar chart and a per-video CSV breakdown. Everything is written to files
(no interactive backends).
"""

from __future__ import annotations

import csv
import json
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

log = logging.getLogger(__name__)


def write_metrics_log(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def plot_training_curves(rows, path):
    """Loss and validation mAP per epoch, twin axes, one PNG."""
    epochs = [r["epoch"] for r in rows]
    losses = [r["train_loss"] for r in rows]
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, losses, color="tab:blue", marker="o", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:blue")
    ax_loss.tick_params(axis="y", labelcolor="tab:blue")
    if any("val_mAP" in r for r in rows):
        ax_map = ax_loss.twinx()
        vals = [r.get("val_mAP") for r in rows]
        ax_map.plot(epochs, vals, color="tab:orange", marker="s", label="validation mAP")
        ax_map.set_ylabel("validation mAP", color="tab:orange")
        ax_map.tick_params(axis="y", labelcolor="tab:orange")
        ax_map.set_ylim(0, 1)
    ax_loss.set_title("training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)


def plot_metric_bars(report, path):
    """Bar chart of mAP and the P@K / R@K columns of a metrics report."""
    data = report.to_dict()
    names = [k for k in data if k != "n_videos"]
    values = [data[k] for k in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    bars = ax.bar(names, values, color="tab:blue")
    ax.bar_label(bars, fmt="%.3f")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"ranking metrics over {data['n_videos']} videos")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)


def write_per_video_csv(report, path):
    """Per-video average precision as CSV, one row per scored video."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "average_precision"])
        for video_id, ap in report.per_video:
            writer.writerow([video_id, f"{ap:.6f}"])


def write_eval_report(report, report_path):
    """JSON report plus CSV breakdown and a figure alongside it."""
    out_dir = os.path.dirname(os.path.abspath(report_path))
    os.makedirs(out_dir, exist_ok=True)
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    stem = os.path.splitext(os.path.basename(report_path))[0]
    write_per_video_csv(report, os.path.join(out_dir, f"{stem}_per_video.csv"))
    plot_metric_bars(report, os.path.join(out_dir, f"{stem}_metrics.png"))
