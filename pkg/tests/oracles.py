"""Independent reference implementations used only by the tests."""
import itertools

import numpy as np


def raster_iou_giou(a_corners, b_corners):
    """IoU and GIoU of two integer-corner boxes by counting unit cells.

    Each box is (x0, y0, x1, y1) with integer coordinates; a cell (i, j) is
    inside a box when x0 <= i < x1 and y0 <= j < y1, so counts are exact areas.
    """
    (ax0, ay0, ax1, ay1), (bx0, by0, bx1, by1) = a_corners, b_corners
    x0, y0 = min(ax0, bx0), min(ay0, by0)
    x1, y1 = max(ax1, bx1), max(ay1, by1)
    xs = np.arange(x0, x1)
    ys = np.arange(y0, y1)
    ina = np.outer((ys >= ay0) & (ys < ay1), (xs >= ax0) & (xs < ax1))
    inb = np.outer((ys >= by0) & (ys < by1), (xs >= bx0) & (xs < bx1))
    inter = int(np.count_nonzero(ina & inb))
    union = int(np.count_nonzero(ina | inb))
    hull = ina.size
    return inter / union, inter / union - (hull - union) / hull


def random_lattice_box(rng, span=64):
    x0, x1 = sorted(rng.choice(span + 1, size=2, replace=False))
    y0, y1 = sorted(rng.choice(span + 1, size=2, replace=False))
    return int(x0), int(y0), int(x1), int(y1)


def brute_force_cost(c):
    """Minimum total cost over all injections of columns into rows."""
    c = np.asarray(c, dtype=float)
    n, m = c.shape
    best = np.inf
    for rows in itertools.permutations(range(n), m):
        best = min(best, sum(c[r, j] for j, r in enumerate(rows)))
    return best


def naive_matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_difference(f, x, h=1e-5):
    """Numeric gradient of scalar f at numpy array x (copied)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        dn = f(x)
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def subset_dp_cost(c):
    """Minimum assignment cost by dynamic programming over used-row bitmasks.

    Columns are assigned left to right, so the sum is accumulated in column
    order, the same order in which an assignment's cost is reported.
    """
    c = np.asarray(c, dtype=float)
    n, m = c.shape
    dp = {0: 0.0}
    for j in range(m):
        nxt = {}
        for mask, acc in dp.items():
            for r in range(n):
                if mask >> r & 1:
                    continue
                key, val = mask | 1 << r, acc + c[r, j]
                if val < nxt.get(key, np.inf):
                    nxt[key] = val
        dp = nxt
    return min(dp.values())
