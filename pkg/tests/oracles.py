"""Independent reference computations used by the tests.

Nothing here imports the code paths it is used to check.
"""
import itertools
import math

import numpy as np


def _row_intervals(boxes, ys):
    """x-interval of each box on each scanline.

    ``boxes`` (B, 5) as [cx, cy, w, l, yaw]; ``ys`` (B, R). Returns lo, hi of
    shape (B, R); empty rows have lo > hi. A point is inside iff
    |(p-c).u| <= l/2 and |(p-c).v| <= w/2 with u the heading direction.
    """
    cx, cy, w, l, yaw = (boxes[:, i, None] for i in range(5))
    c, s = np.cos(yaw), np.sin(yaw)
    lo = np.full(ys.shape, -np.inf)
    hi = np.full(ys.shape, np.inf)
    dy = ys - cy
    # (x-cx)*c + dy*s in [-l/2, l/2];  -(x-cx)*s + dy*c in [-w/2, w/2]
    for a, b, half in ((c, dy * s, l / 2), (-s, dy * c, w / 2)):
        a = np.broadcast_to(a, ys.shape)
        tiny = np.abs(a) < 1e-15
        safe = np.where(tiny, 1.0, a)
        e1 = (-half - b) / safe
        e2 = (half - b) / safe
        lo_c = np.minimum(e1, e2) + cx
        hi_c = np.maximum(e1, e2) + cx
        inside_all = np.abs(b) <= half
        lo_c = np.where(tiny, np.where(inside_all, -np.inf, np.inf), lo_c)
        hi_c = np.where(tiny, np.where(inside_all, np.inf, -np.inf), hi_c)
        lo = np.maximum(lo, lo_c)
        hi = np.minimum(hi, hi_c)
    return lo, hi


def _aabb(boxes):
    corners = []
    for su, sv in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        c, s = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
        u, v = su * boxes[:, 3] / 2, sv * boxes[:, 2] / 2
        corners.append(np.stack([boxes[:, 0] + c * u - s * v, boxes[:, 1] + s * u + c * v], -1))
    pts = np.stack(corners, 1)
    return pts.min(1), pts.max(1)


def raster_intersection(a, b, res=4096):
    """Overlap area by counting pixel centres of a ``res x res`` raster.

    The raster covers the overlap of the two boxes' axis-aligned bounds.
    Per scanline the covered centres are counted in closed form, which is
    the same number a brute-force pixel loop would produce.
    """
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    amin, amax = _aabb(a)
    bmin, bmax = _aabb(b)
    lo = np.maximum(amin, bmin)
    hi = np.minimum(amax, bmax)
    span = hi - lo
    empty = np.any(span <= 0, axis=1)
    span = np.where(span > 0, span, 1.0)
    hx, hy = span[:, 0] / res, span[:, 1] / res
    rows = (np.arange(res) + 0.5)[None, :]
    ys = lo[:, 1, None] + rows * hy[:, None]
    alo, ahi = _row_intervals(a, ys)
    blo, bhi = _row_intervals(b, ys)
    left = np.maximum(alo, blo)
    right = np.minimum(ahi, bhi)
    x0 = lo[:, 0, None]
    first = np.ceil((left - x0) / hx[:, None] - 0.5)
    last = np.floor((right - x0) / hx[:, None] - 0.5)
    first = np.clip(first, 0, res - 1)
    last = np.clip(last, -1, res - 1)
    valid = (right >= left) & np.isfinite(left) & np.isfinite(right)
    count = np.where(valid, np.maximum(last - first + 1, 0), 0).sum(axis=1)
    area = count * hx * hy
    return np.where(empty, 0.0, area)


def raster_iou(a, b, res=4096):
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    inter = raster_intersection(a, b, res)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return inter / union


def brute_force_assignment(cost):
    """Minimum-cost injective assignment of the smaller side, by enumeration."""
    cost = np.asarray(cost, float)
    n_pred, n_gt = cost.shape
    best, best_pairs = math.inf, None
    if n_gt <= n_pred:
        for perm in itertools.permutations(range(n_pred), n_gt):
            c = sum(cost[p, g] for g, p in enumerate(perm))
            if c < best - 1e-12:
                best, best_pairs = c, sorted((p, g) for g, p in enumerate(perm))
    else:
        for perm in itertools.permutations(range(n_gt), n_pred):
            c = sum(cost[p, g] for p, g in enumerate(perm))
            if c < best - 1e-12:
                best, best_pairs = c, sorted((p, g) for p, g in enumerate(perm))
    return best, best_pairs


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def naive_nms(boxes, scores, tau, iou_fn):
    """Greedy NMS straight from the definition: descending score, ties by index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou_fn(boxes[i], boxes[j]) <= tau for j in kept):
            kept.append(i)
    return sorted(kept)
