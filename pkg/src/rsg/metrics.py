"""Per-class evaluation, shot-split summaries, and report emission.

Reports are written as a JSON document plus a CSV of per-epoch rows, both
with floats at 6 significant digits and deterministic field order, so
identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# class-count boundaries for the shot buckets; both 20 and 100 fall in the
# medium bucket (inclusive reading of "between 20 to 100")
MANY_SHOT_MIN = 100
FEW_SHOT_MAX = 20


def per_class_error(logits, labels):
    """Percent error per class; None for classes absent from the eval set."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(labels) != logits.shape[0] or len(labels) < 1:
        raise ValueError(
            f"need (n, n_cls) logits with one label per row, got "
            f"{logits.shape} and {len(labels)} labels")
    pred = logits.argmax(axis=1)
    errors = []
    for label in range(logits.shape[1]):
        mask = labels == label
        if not mask.any():
            errors.append(None)
            continue
        errors.append(100.0 * float((pred[mask] != label).mean()))
    return errors


def top1_error(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    return 100.0 * float((logits.argmax(axis=1) != labels).mean())


def shot_split_report(per_class_err, train_counts):
    """Mean accuracy per shot bucket (many > 100, medium 20..100, few < 20).

    Buckets with no classes, or whose classes are all absent from the eval
    set, report None.
    """
    buckets = {"many": [], "medium": [], "few": []}
    for err, count in zip(per_class_err, train_counts):
        if err is None:
            continue
        if count > MANY_SHOT_MIN:
            buckets["many"].append(100.0 - err)
        elif count < FEW_SHOT_MAX:
            buckets["few"].append(100.0 - err)
        else:
            buckets["medium"].append(100.0 - err)
    return {
        name: (float(np.mean(vals)) if vals else None)
        for name, vals in buckets.items()
    }


@dataclass
class EpochRow:
    epoch: int
    lr: float
    l_cls: float
    l_cesc: float
    l_mv: float
    s_new: int
    val_top1: float


@dataclass
class TrainingReport:
    epochs: list = field(default_factory=list)
    per_class_error: list = field(default_factory=list)
    top1_error: float = 0.0
    shot_acc: dict = field(default_factory=dict)
    train_counts: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    checkpoint: str | None = None


def _sig6(x):
    if x is None:
        return None
    return float(f"{float(x):.6g}")


def _report_dict(report):
    return {
        "seed": report.seed,
        "config": report.config,
        "train_counts": [int(c) for c in report.train_counts],
        "epochs": [
            {
                "epoch": row.epoch,
                "lr": _sig6(row.lr),
                "l_cls": _sig6(row.l_cls),
                "l_cesc": _sig6(row.l_cesc),
                "l_mv": _sig6(row.l_mv),
                "s_new": row.s_new,
                "val_top1": _sig6(row.val_top1),
            }
            for row in report.epochs
        ],
        "final": {
            "top1_error": _sig6(report.top1_error),
            "per_class_error": [_sig6(e) for e in report.per_class_error],
            "shot_acc": {k: _sig6(v) for k, v in report.shot_acc.items()},
        },
        "checkpoint": report.checkpoint,
        "shot_split_boundaries": "many>100, 20<=medium<=100, few<20",
    }


CSV_HEADER = ["epoch", "lr", "l_cls", "l_cesc", "l_mv", "s_new", "val_top1"]


def emit_report(report, out_dir):
    """Write report.json and epochs.csv under out_dir; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    csv_path = out / "epochs.csv"
    try:
        with open(json_path, "w") as fh:
            json.dump(_report_dict(report), fh, indent=2)
            fh.write("\n")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in report.epochs:
                writer.writerow([
                    row.epoch, f"{row.lr:.6g}", f"{row.l_cls:.6g}",
                    f"{row.l_cesc:.6g}", f"{row.l_mv:.6g}", row.s_new,
                    f"{row.val_top1:.6g}",
                ])
    except OSError as exc:
        raise OSError(f"failed writing report under {out}: {exc}") from exc
    return json_path, csv_path
