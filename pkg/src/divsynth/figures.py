"""Matplotlib figures rendered alongside the delimited report outputs.

Montages stay raw PPM (bit-exact, produced by the CLI); these figures are
additive report artifacts: training curves and evaluation metric panels.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402


def save_metrics_figure(metrics_rows: list[dict], out_png) -> Path:
    """Per-epoch loss curves from training metrics rows."""
    out_png = Path(out_png)
    epochs = [r["epoch"] for r in metrics_rows]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for key, style in (("loss_base", "-"), ("loss_div", "--"),
                       ("loss_total", "-."), ("loss_disc", ":")):
        if metrics_rows and key in metrics_rows[0]:
            ax.plot(epochs, [r[key] for r in metrics_rows], style, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_report_figure(report: MetricsReport, out_png, title: str = "evaluation") -> Path:
    """Three panels: headline metrics, per-class IoU, per-class linkage."""
    out_png = Path(out_png)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))

    names = ["accuracy", "mean IoU", "diversity"]
    axes[0].bar(names, [report.accuracy, report.mean_iou, report.diversity],
                color=["#4878a8", "#6aa84f", "#b45f66"])
    axes[0].set_ylim(0, max(1.05, report.diversity * 1.2))
    axes[0].set_title(title, fontsize=10)

    cls = report.class_names
    iou_vals = [v if v is not None else 0.0 for v in report.per_class_iou]
    axes[1].bar(cls, iou_vals, color="#6aa84f")
    axes[1].set_ylim(0, 1.05)
    axes[1].set_title("per-class IoU", fontsize=10)

    link_vals = [v if v is not None else 0.0 for v in report.linkage]
    axes[2].bar(cls, link_vals, color="#4878a8")
    axes[2].axhline(1.0, color="k", lw=0.8, ls="--")
    axes[2].set_title("per-class linkage", fontsize=10)

    for ax in axes:
        ax.tick_params(labelsize=8)
    fig.suptitle(report.note, fontsize=7, y=1.0)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
