"""Set matching between predicted queries and ground-truth targets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFinite(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    rows: tuple[int, ...]   # rows[j] is the prediction matched to target column j
    cost: float

    def pairs(self):
        return list(zip(self.rows, range(len(self.rows))))


def _solve(c: np.ndarray) -> list[int]:
    """Shortest-augmenting-path Hungarian method for an (n x m) matrix, n <= m.

    Returns the column assigned to each row. Classic potentials formulation,
    O(n^2 m).
    """
    n, m = c.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)   # p[j] = row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def _optimum(c: np.ndarray) -> float:
    """Minimum total cost assigning every column of ``c`` (rows >= cols) to a distinct row."""
    if c.shape[1] == 0:
        return 0.0
    rows = _solve(c.T)
    return float(sum(c[r, j] for j, r in enumerate(rows)))


def hungarian(costs) -> Assignment:
    """Minimum-cost injective map from target columns to prediction rows.

    Among optimal assignments the one with the lexicographically smallest
    row sequence (column 0 first) is returned, so results do not depend on
    solver internals.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n < m:
        raise ValueError(f"need rows >= cols, got {n} x {m}")
    if not np.all(np.isfinite(c)):
        raise NonFinite("cost matrix has non-finite entries")
    if m == 0:
        return Assignment((), 0.0)
    if m == 1:
        r = int(np.argmin(c[:, 0]))
        return Assignment((r,), float(c[r, 0]))

    best = _optimum(c)
    tol = 1e-12 * max(1.0, float(np.abs(c).max())) * m
    free_rows = list(range(n))
    chosen: list[int] = []
    for j in range(m):
        for r in free_rows:
            rest_rows = [x for x in free_rows if x != r]
            sub = c[np.ix_(rest_rows, range(j + 1, m))]
            fixed = sum(c[rr, jj] for jj, rr in enumerate(chosen)) + c[r, j]
            if fixed + _optimum(sub) <= best + tol:
                chosen.append(r)
                free_rows = rest_rows
                break
        else:  # pragma: no cover - numerical safety net
            raise RuntimeError("tie-breaking refinement lost the optimum")
    total = 0.0
    for j, r in enumerate(chosen):
        total += c[r, j]
    return Assignment(tuple(chosen), float(total))


def brute_force(costs) -> Assignment:
    """Exhaustive search over injections; the reference for small matrices."""
    from itertools import permutations

    c = np.asarray(costs, dtype=np.float64)
    n, m = c.shape
    best_rows, best = None, np.inf
    for rows in permutations(range(n), m):
        total = 0.0
        for j, r in enumerate(rows):
            total += c[r, j]
        if total < best:
            best, best_rows = total, rows
    return Assignment(tuple(best_rows), float(best))


# ---------------------------------------------------------------------------
# costs

def _corners(b):
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def pairwise_giou(a, b) -> np.ndarray:
    """GIoU between every box in ``a`` (N, 4) and every box in ``b`` (K, 4), CXYWH."""
    ca, cb = _corners(a)[:, None, :], _corners(b)[None, :, :]
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = ((np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0]))
            * (np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])))
    return inter / union - (hull - union) / hull


def object_match_cost(pred_boxes, token_dists, gt_boxes, gt_spans,
                      w_l1: float = 5.0, w_giou: float = 2.0, w_tok: float = 1.0) -> np.ndarray:
    """Cost of matching each predicted box (row) to each ground-truth object (column)."""
    pb = np.asarray(pred_boxes, dtype=np.float64)
    gb = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    l1 = np.abs(pb[:, None, :] - gb[None, :, :]).sum(-1)
    mass = np.stack([np.asarray(token_dists)[:, s:e].sum(-1) for s, e in gt_spans], axis=1)
    return w_l1 * l1 + w_giou * (1.0 - pairwise_giou(pb, gb)) + w_tok * (1.0 - mass)


def gesture_match(pred_pairs, gt_pair) -> int | None:
    """Index of the gesture query closest (L1 over 4 coords) to the gt pair; lowest index on ties."""
    if gt_pair is None:
        return None
    d = np.abs(np.asarray(pred_pairs) - np.asarray(gt_pair, dtype=np.float64)[None, :]).sum(-1)
    return int(np.argmin(d))
