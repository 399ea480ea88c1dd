"""Render training-report figures to files next to the JSON/CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_report_figures(report, out_dir):
    """Write training_curves.png and per_class_error.png; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "training_curves.png", out / "per_class_error.png"]

    epochs = [row.epoch for row in report.epochs]
    fig, (ax_loss, ax_err) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(epochs, [row.l_cls for row in report.epochs], label="cls")
    ax_loss.plot(epochs, [row.l_cesc for row in report.epochs], label="cesc")
    ax_loss.plot(epochs, [row.l_mv for row in report.epochs], label="mv")
    ax_loss.set_ylabel("mean loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_err.plot(epochs, [row.val_top1 for row in report.epochs], color="k")
    ax_err.set_ylabel("val top-1 error (%)")
    ax_err.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(paths[0], dpi=120)
    plt.close(fig)

    classes = list(range(len(report.per_class_error)))
    errors = [e if e is not None else 0.0 for e in report.per_class_error]
    colors = ["tab:red" if c < 20 else "tab:blue"
              for c in (report.train_counts or [10 ** 9] * len(classes))]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(classes, errors, color=colors)
    ax.set_xlabel("class")
    ax.set_ylabel("final error (%)")
    ax.set_xticks(classes)
    fig.tight_layout()
    fig.savefig(paths[1], dpi=120)
    plt.close(fig)
    return paths
