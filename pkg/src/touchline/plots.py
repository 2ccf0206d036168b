"""Static SVG plots: precision vs threshold, training loss curves."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .losses import COMPONENTS  # noqa: E402


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def precision_curves(reports, out_dir) -> list[Path]:
    """One SVG per metric kind, one line per report."""
    out_dir = Path(out_dir)
    written = []
    metrics = sorted({m for r in reports for m in r.precision})
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, r in enumerate(reports):
            if metric not in r.precision:
                continue
            thr = sorted(r.precision[metric], key=float)
            ax.plot([float(t) for t in thr], [100 * r.precision[metric][t]["All"] for t in thr],
                    marker="o", label=r.label or f"report{i}")
        ax.set_xlabel(f"{metric.upper()} threshold")
        ax.set_ylabel("precision (%)")
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"precision_{metric}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written


def loss_curves(records: list[dict], path) -> Path:
    path = Path(path)
    epochs = [r["epoch"] for r in records]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3.2))
    for name in COMPONENTS + ("total",):
        a0.plot(epochs, [r["losses"][name] for r in records], label=name)
    a0.set_xlabel("epoch")
    a0.set_ylabel("loss")
    a0.legend(fontsize=7)
    for key in ("iou@0.25", "giou@0.75"):
        if records and key in records[0]["metrics"]:
            a1.plot(epochs, [100 * r["metrics"][key] for r in records], label=key)
    a1.set_xlabel("epoch")
    a1.set_ylabel("validation precision (%)")
    a1.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
