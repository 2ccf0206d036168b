"""Training objectives.

The total is a weighted sum of five terms: box regression (L1 + GIoU),
gesture keypoint regression with is-a-line classification, the geometric
consistency hinge between ground-truth and predicted colinearity, a soft-token
span loss and a symmetric query/token contrastive loss.

Functions take :class:`~touchline.autodiff.Tensor` predictions and plain numpy
targets; ground truth never carries gradients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import BoxCXYWH, GestureLine, Point2, box_center, cosine_colinearity
from .matching import gesture_match, hungarian, object_match_cost

COMPONENTS = ("box", "gesture", "aligned", "token", "contrastive")


@dataclass
class LossWeights:
    box: float = 1.0
    gesture: float = 1.0
    aligned: float = 1.0
    token: float = 1.0
    contrastive: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_tok: float = 1.0          # matching cost only
    temperature: float = 0.07
    no_object_weight: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def scaled(self, factor: float) -> LossWeights:
        d = asdict(self)
        for k in COMPONENTS:
            d[k] *= factor
        return LossWeights(**d)


@dataclass
class LossBreakdown:
    box: float
    gesture: float
    aligned: float
    token: float
    contrastive: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# ---------------------------------------------------------------------------
# differentiable box geometry

def _col(t: Tensor, i: int) -> Tensor:
    return t[:, i]


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted (N, 4) and ground-truth (N, 4) CXYWH boxes."""
    gt = np.asarray(gt, dtype=np.float64)
    cx, cy, w, h = (_col(pred, i) for i in range(4))
    px0, px1 = cx - w * 0.5, cx + w * 0.5
    py0, py1 = cy - h * 0.5, cy + h * 0.5
    gx0 = Tensor(gt[:, 0] - gt[:, 2] / 2)
    gx1 = Tensor(gt[:, 0] + gt[:, 2] / 2)
    gy0 = Tensor(gt[:, 1] - gt[:, 3] / 2)
    gy1 = Tensor(gt[:, 1] + gt[:, 3] / 2)
    iw = ad.relu(ad.minimum(px1, gx1) - ad.maximum(px0, gx0))
    ih = ad.relu(ad.minimum(py1, gy1) - ad.maximum(py0, gy0))
    inter = iw * ih
    union = w * h + Tensor(gt[:, 2] * gt[:, 3]) - inter
    hull = ((ad.maximum(px1, gx1) - ad.minimum(px0, gx0))
            * (ad.maximum(py1, gy1) - ad.minimum(py0, gy0)))
    return inter / union - (hull - union) / hull


def loss_box(pred: Tensor, gt, w_l1: float = 5.0, w_giou: float = 2.0) -> Tensor:
    """Mean over matched pairs of ``w_l1 * L1 + w_giou * (1 - GIoU)``."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    l1 = ad.sum_(ad.abs_(pred - Tensor(gt)), axis=1)
    per = l1 * w_l1 + (1.0 - giou_tensor(pred, gt)) * w_giou
    return ad.mean(per)


# ---------------------------------------------------------------------------
# gestures

def loss_gesture(matched_pair: Tensor, gt_pair, gesture_logits: Tensor, matched_idx) -> Tensor:
    """L1 over the 4 keypoint coordinates plus mean 2-class cross-entropy.

    ``matched_pair`` is (N, 4), ``gesture_logits`` is (N, Qg, 2) and
    ``matched_idx[n]`` names the query labelled is-a-line (all others are
    labelled not-a-line). Averaged over the N scenes.
    """
    gt_pair = np.asarray(gt_pair, dtype=np.float64).reshape(-1, 4)
    l1 = ad.sum_(ad.abs_(matched_pair - Tensor(gt_pair)), axis=1)
    n, q, _ = gesture_logits.shape
    target = np.zeros((n, q, 2))
    target[:, :, 0] = 1.0
    target[np.arange(n), np.asarray(matched_idx), 0] = 0.0
    target[np.arange(n), np.asarray(matched_idx), 1] = 1.0
    logp = ad.log_softmax(gesture_logits, axis=-1)
    ce = ad.mul(ad.sum_(ad.mul(logp, Tensor(target)), axis=(1, 2)), -1.0 / q)
    return ad.mean(l1 + ce)


def cos_sim_pair(gt_line: GestureLine, gt_box: BoxCXYWH, pred_box: BoxCXYWH) -> tuple[float, float]:
    """Colinearity of the gt and predicted box centers with the *ground-truth* line."""
    return (cosine_colinearity(gt_line, box_center(gt_box)),
            cosine_colinearity(gt_line, box_center(pred_box)))


def loss_aligned(cos_sim_gt, cos_sim_pred):
    """Hinge ``max(0, cos_gt - cos_pred)``; works on floats or tensors."""
    if isinstance(cos_sim_pred, Tensor):
        gt = cos_sim_gt if isinstance(cos_sim_gt, Tensor) else Tensor(np.broadcast_to(
            np.asarray(cos_sim_gt, dtype=np.float64), cos_sim_pred.shape).copy())
        return ad.relu(gt - cos_sim_pred)
    return max(0.0, float(cos_sim_gt) - float(cos_sim_pred))


def cosine_to_line(centers: Tensor, proximal, distal, eps: float = 1e-9) -> Tensor:
    """Differentiable colinearity of (N, 2) centers with fixed lines (N, 2) -> (N,)."""
    proximal = np.asarray(proximal, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(distal, dtype=np.float64).reshape(-1, 2) - proximal
    dn = np.linalg.norm(d, axis=1)
    v = centers - Tensor(proximal)
    vn = ad.sqrt(ad.sum_(v * v, axis=1))
    if np.any(dn <= eps) or np.any(vn.data <= eps):
        from .geometry import DegenerateVector
        raise DegenerateVector("zero-length vector in colinearity")
    dot = ad.sum_(v * Tensor(d / dn[:, None]), axis=1)
    return dot / vn


def line_colinearity(proximal, distal, points) -> np.ndarray:
    """Numpy colinearity of (N, 2) points with (N, 2) -> (N, 2) lines.

    Same operation order as :func:`cosine_to_line`, so a predicted center equal
    to the ground-truth center gives a bit-identical cosine and a zero hinge.
    """
    proximal = np.asarray(proximal, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(distal, dtype=np.float64).reshape(-1, 2) - proximal
    dn = np.linalg.norm(d, axis=1)
    v = np.asarray(points, dtype=np.float64).reshape(-1, 2) - proximal
    vn = np.sqrt(np.sum(v * v, axis=1))
    return np.sum(v * (d / dn[:, None]), axis=1) / vn


# ---------------------------------------------------------------------------
# text alignment

def loss_token(token_logits: Tensor, matched_idx, spans, no_object_weight: float = 0.1) -> Tensor:
    """Soft-token cross-entropy.

    ``token_logits`` is (N, Q, M + 1). The matched query of scene n targets a
    uniform distribution over ``spans[n]``; every other query targets the final
    no-object slot with weight ``no_object_weight``. Per scene the weighted CE
    is normalized by the total weight, then averaged over scenes.
    """
    n, q, slots = token_logits.shape
    target = np.zeros((n, q, slots))
    target[:, :, -1] = no_object_weight
    for k, ((s, e), i) in enumerate(zip(spans, matched_idx)):
        target[k, i, :] = 0.0
        target[k, i, s:e] = 1.0 / (e - s)
    norm = target.sum(axis=(1, 2))
    logp = ad.log_softmax(token_logits, axis=-1)
    per = ad.sum_(ad.mul(logp, Tensor(target)), axis=(1, 2))
    return ad.mean(ad.mul(per, Tensor(-1.0 / norm)))


def loss_contrastive(query_embed: Tensor, text_embed: Tensor, matched_idx, spans,
                     temperature: float = 0.07, text_mask=None, directions: bool = False):
    """Symmetric InfoNCE between object queries and utterance tokens.

    query -> text: for each matched query, minus the log softmax mass (over all
    real text tokens) on its span. text -> query: for each span token, minus the
    log softmax (over all object queries) at the matched query, averaged over
    span tokens. The two directions are averaged; ``directions=True`` also
    returns them separately.
    """
    n, q, _ = query_embed.shape
    m = text_embed.shape[1]
    logits = ad.mul(ad.matmul(query_embed, ad.transpose(text_embed, (0, 2, 1))), 1.0 / temperature)
    if text_mask is None:
        text_mask = np.ones((n, m), dtype=bool)
    text_mask = np.asarray(text_mask, dtype=bool)

    bias = np.where(text_mask, 0.0, -1e30)[:, None, :].repeat(q, axis=1)
    pos_qt = np.zeros((n, q, m))          # positives for query -> text
    pos_tq = np.zeros((n, q, m))          # positives for text -> query, normalized per scene
    for k, ((s, e), i) in enumerate(zip(spans, matched_idx)):
        pos_qt[k, i, s:e] = 1.0
        pos_tq[k, i, s:e] = 1.0 / (e - s)

    # query -> text: log of summed probability over the span
    lp_qt = ad.log_softmax(ad.add(logits, Tensor(bias)), axis=-1)
    mass = ad.sum_(ad.mul(ad.exp(lp_qt), Tensor(pos_qt)), axis=2)
    sel = np.zeros((n, q))
    sel[np.arange(n), np.asarray(matched_idx)] = 1.0
    # log(mass) only on the matched row; other rows are masked to log(1) = 0
    safe = ad.add(ad.mul(mass, Tensor(sel)), Tensor(1.0 - sel))
    l_qt = ad.mul(ad.sum_(ad.log(safe), axis=1), -1.0)

    # text -> query
    lp_tq = ad.log_softmax(logits, axis=1)
    l_tq = ad.mul(ad.sum_(ad.mul(lp_tq, Tensor(pos_tq)), axis=(1, 2)), -1.0)

    qt, tq = ad.mean(l_qt), ad.mean(l_tq)
    total = ad.mul(ad.add(qt, tq), 0.5)
    if directions:
        return total, qt, tq
    return total


# ---------------------------------------------------------------------------
# totals

def total_loss(components: dict, weights: LossWeights):
    """Weighted sum of the five components; returns (total, LossBreakdown).

    Components may be tensors or floats. The breakdown holds plain floats.
    """
    total = None
    values = {}
    for name in COMPONENTS:
        c = components.get(name, 0.0)
        values[name] = float(c.data) if isinstance(c, Tensor) else float(c)
        lam = getattr(weights, name)
        if isinstance(c, Tensor):
            term = ad.mul(c, lam)
        else:
            term = lam * float(c)
        if total is None:
            total = term
        elif isinstance(total, Tensor) or isinstance(term, Tensor):
            total = ad.add(term, total) if isinstance(term, Tensor) else ad.add(total, term)
        else:
            total = total + term
    tv = float(total.data) if isinstance(total, Tensor) else float(total)
    return total, LossBreakdown(total=tv, **values)


def criterion(pred, batch, weights: LossWeights, gesture_kind: str | None, matching=None):
    """Match predictions to targets and compute every loss for a batch.

    ``batch`` is a :class:`touchline.scenes.Batch`. ``matching`` optionally fixes
    the (object rows, gesture rows) assignment, e.g. for finite-difference
    checks where the discrete matching must stay put. Returns
    ``(total_tensor, LossBreakdown, matching)``.
    """
    n = len(batch)
    if matching is None:
        dists = pred.token_dists
        boxes = pred.boxes.data
        obj_rows = []
        for k in range(n):
            cost = object_match_cost(boxes[k], dists[k], batch.boxes[k:k + 1],
                                     [tuple(batch.spans[k])], weights.w_l1, weights.w_giou, weights.w_tok)
            obj_rows.append(hungarian(cost).rows[0])
        ges_rows = []
        for k in range(n):
            gt = batch.lines[k] if (gesture_kind and batch.line_mask[k]) else None
            ges_rows.append(gesture_match(pred.gesture_pairs.data[k], gt))
        matching = (np.asarray(obj_rows), ges_rows)
    obj_rows, ges_rows = matching
    ar = np.arange(n)

    matched_boxes = pred.boxes[ar, obj_rows]
    comps = {
        "box": loss_box(matched_boxes, batch.boxes, weights.w_l1, weights.w_giou),
        "token": loss_token(pred.token_logits, obj_rows, batch.spans, weights.no_object_weight),
        "contrastive": loss_contrastive(pred.query_embed, pred.text_embed, obj_rows, batch.spans,
                                        weights.temperature, batch.text_mask),
        "gesture": 0.0,
        "aligned": 0.0,
    }
    has = np.array([g is not None for g in ges_rows]) if gesture_kind else np.zeros(n, bool)
    if has.any():
        sub = ar[has]
        g_rows = np.asarray([ges_rows[k] for k in sub])
        pairs = pred.gesture_pairs[sub, g_rows]
        logits = pred.gesture_logits[sub]
        comps["gesture"] = loss_gesture(pairs, batch.lines[sub], logits, g_rows)
        prox, dist = batch.lines[sub, :2], batch.lines[sub, 2:]
        centers = pred.boxes[sub, obj_rows[sub]][:, :2]
        cos_pred = cosine_to_line(centers, prox, dist)
        cos_gt = line_colinearity(prox, dist, batch.boxes[sub, :2])
        comps["aligned"] = ad.mean(loss_aligned(cos_gt, cos_pred))
    total, breakdown = total_loss(comps, weights)
    return total, breakdown, matching
