"""Precision at IoU/GIoU thresholds, size buckets, colinearity aggregates."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import GestureKind
from .losses import line_colinearity
from .matching import pairwise_giou
from .model import ModelConfig, forward, select_best_batch
from .scenes import collate

THRESHOLDS = (0.25, 0.50, 0.75)
BUCKETS = ("All", "S", "M", "L")
METRICS = ("iou", "giou")
SMALL_AREA = 0.02
LARGE_AREA = 0.08


class MismatchedSplit(ValueError):
    pass


def bucket_of(box, small: float = SMALL_AREA, large: float = LARGE_AREA) -> str:
    """S/M/L by normalized area; cuts are lower-inclusive."""
    w, h = (box.w, box.h) if hasattr(box, "w") else (box[2], box[3])
    a = w * h
    if a < small:
        return "S"
    if a < large:
        return "M"
    return "L"


def rowwise_iou_giou(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if not len(pred):
        return np.zeros(0), np.zeros(0)
    g = np.array([pairwise_giou(p[None], q[None])[0, 0] for p, q in zip(pred, gt)])
    pc = np.stack([pred[:, 0] - pred[:, 2] / 2, pred[:, 1] - pred[:, 3] / 2,
                   pred[:, 0] + pred[:, 2] / 2, pred[:, 1] + pred[:, 3] / 2], 1)
    gc = np.stack([gt[:, 0] - gt[:, 2] / 2, gt[:, 1] - gt[:, 3] / 2,
                   gt[:, 0] + gt[:, 2] / 2, gt[:, 1] + gt[:, 3] / 2], 1)
    iw = np.clip(np.minimum(pc[:, 2], gc[:, 2]) - np.maximum(pc[:, 0], gc[:, 0]), 0, None)
    ih = np.clip(np.minimum(pc[:, 3], gc[:, 3]) - np.maximum(pc[:, 1], gc[:, 1]), 0, None)
    inter = iw * ih
    iou = inter / (pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter)
    return iou, g


def dataset_id(scenes) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.id.encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


@dataclass
class MetricsReport:
    precision: dict           # metric -> "0.25" -> bucket -> value
    counts: dict              # bucket -> count
    cos_sim_gt: float | None
    cos_sim_pred: float | None
    cos_count: int
    condition: str
    line_kind: str
    dataset: str
    label: str = ""
    extra: dict = field(default_factory=dict)

    def get(self, metric: str, threshold: float, bucket: str = "All") -> float:
        return self.precision[metric][f"{threshold:.2f}"][bucket]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["label", "metric", "threshold", "bucket", "precision", "count"])
        for metric, by_thr in self.precision.items():
            for thr, by_bucket in by_thr.items():
                for b, v in by_bucket.items():
                    w.writerow([self.label, metric, thr, b, f"{v:.6f}", self.counts[b]])
        return buf.getvalue()


def precision_table(scores: dict[str, np.ndarray], buckets: list[str],
                    thresholds=THRESHOLDS) -> tuple[dict, dict]:
    """Precision per metric/threshold/bucket; a prediction is correct iff score > threshold."""
    buckets = np.asarray(buckets)
    counts = {b: int(len(buckets) if b == "All" else (buckets == b).sum()) for b in BUCKETS}
    out = {}
    for metric, s in scores.items():
        s = np.asarray(s)
        out[metric] = {}
        for t in thresholds:
            row = {}
            for b in BUCKETS:
                sel = np.ones(len(s), bool) if b == "All" else buckets == b
                row[b] = float((s[sel] > t).mean()) if sel.any() else 0.0
            out[metric][f"{t:.2f}"] = row
    return out, counts


def predict(params, cfg: ModelConfig, scenes, batch_size: int = 64, grids=None):
    """Best box (and gesture pair) per scene, as numpy arrays."""
    boxes, pairs = [], []
    with ad.no_grad():
        for i in range(0, len(scenes), batch_size):
            chunk = scenes[i:i + batch_size]
            g = None if grids is None else grids[i:i + batch_size]
            b = collate(chunk, None, cfg.grid_size, cfg.max_text_len, grids=g)
            pred = forward(params, cfg, b.grids, b.tokens)
            bx, pr, _, _ = select_best_batch(pred)
            boxes.append(bx)
            pairs.append(pr)
    if not boxes:
        return np.zeros((0, 4)), np.zeros((0, 4))
    return np.concatenate(boxes), np.concatenate(pairs)


def report_from_predictions(pred_boxes, scenes, metrics=METRICS, line_kind="vtl", label="",
                            small=SMALL_AREA, large=LARGE_AREA) -> MetricsReport:
    if not len(scenes):
        raise ValueError("cannot evaluate an empty dataset")
    gt = np.array([s.referent.box.as_tuple() for s in scenes])
    iou, giou = rowwise_iou_giou(pred_boxes, gt)
    scores = {"iou": iou, "giou": giou}
    buckets = [bucket_of(s.referent.box, small, large) for s in scenes]
    prec, counts = precision_table({m: scores[m] for m in metrics}, buckets)

    # colinearity against the gt line, only where the pose carries that line
    kind = GestureKind(line_kind)
    rows = [(k, s.pose) for k, s in enumerate(scenes) if s.pose is not None]
    prox, dist, idx = [], [], []
    for k, pose in rows:
        a, b = (pose.eye, pose.fingertip) if kind is GestureKind.VTL else (pose.elbow, pose.wrist)
        if a is None or b is None:
            continue
        prox.append(a.as_tuple())
        dist.append(b.as_tuple())
        idx.append(k)
    cos_gt = cos_pred = None
    if idx:
        pb = np.asarray(pred_boxes)[idx]
        cos_gt = float(line_colinearity(prox, dist, gt[idx, :2]).mean())
        cos_pred = float(line_colinearity(prox, dist, pb[:, :2]).mean())
    return MetricsReport(
        precision=prec, counts=counts, cos_sim_gt=cos_gt, cos_sim_pred=cos_pred,
        cos_count=len(idx), condition=scenes[0].condition.value, line_kind=kind.value,
        dataset=dataset_id(scenes), label=label,
    )


def evaluate(params, cfg: ModelConfig, scenes, metrics=METRICS, line_kind="vtl", label="",
             grids=None) -> MetricsReport:
    boxes, _ = predict(params, cfg, scenes, grids=grids)
    return report_from_predictions(boxes, scenes, metrics, line_kind, label)


def compare_conditions(reports: list[MetricsReport], baseline: int = 0) -> dict:
    """Signed precision differences of each report against ``reports[baseline]``."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    ids = {r.dataset for r in reports}
    if len(ids) != 1:
        raise MismatchedSplit(f"reports cover different datasets: {sorted(ids)}")
    base = reports[baseline]
    table = {}
    for i, r in enumerate(reports):
        name = r.label or f"report{i}"
        table[name] = {}
        for metric, by_thr in r.precision.items():
            if metric not in base.precision:
                continue
            table[name][metric] = {
                thr: {b: v - base.precision[metric][thr][b] for b, v in by_bucket.items()}
                for thr, by_bucket in by_thr.items()
            }
    return table


def format_comparison(reports: list[MetricsReport], metric: str = "iou", bucket: str = "All") -> str:
    """Plain-text table: one row per threshold, one column per report, deltas vs the first."""
    deltas = compare_conditions(reports)
    names = [r.label or f"report{i}" for i, r in enumerate(reports)]
    lines = ["thr    " + "  ".join(f"{n:>18}" for n in names)]
    for thr in reports[0].precision[metric]:
        cells = []
        for n, r in zip(names, reports):
            v = 100 * r.precision[metric][thr][bucket]
            d = 100 * deltas[n][metric][thr][bucket]
            cells.append(f"{v:6.1f} ({d:+5.1f})".rjust(18))
        lines.append(f"{thr:<6} " + "  ".join(cells))
    return "\n".join(lines)
