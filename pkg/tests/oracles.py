"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

from dualassign.geometry import Box
from dualassign.pareto import argmin_weighted, is_pareto_optimal, pareto_front, utopia_point
from dualassign.postprocess import Detection
from dualassign.scenegen import GroundTruth


def raster_iou(a, b, res: int = 8) -> float:
    """IoU by counting sub-cells of a fine grid covering both boxes."""
    x0, y0 = min(a[0], b[0]), min(a[1], b[1])
    x1, y1 = max(a[2], b[2]), max(a[3], b[3])
    nx, ny = max(1, round((x1 - x0) * res)), max(1, round((y1 - y0) * res))
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    X, Y = np.meshgrid(xs, ys)

    def inside(bx):
        return (X > bx[0]) & (X < bx[2]) & (Y > bx[1]) & (Y < bx[3])

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def raster_giou(a, b, res: int = 8) -> float:
    x0, y0 = min(a[0], b[0]), min(a[1], b[1])
    x1, y1 = max(a[2], b[2]), max(a[3], b[3])
    nx, ny = max(1, round((x1 - x0) * res)), max(1, round((y1 - y0) * res))
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    X, Y = np.meshgrid(xs, ys)
    ia = (X > a[0]) & (X < a[2]) & (Y > a[1]) & (Y < a[3])
    ib = (X > b[0]) & (X < b[2]) & (Y > b[1]) & (Y < b[3])
    union = np.count_nonzero(ia | ib)
    total = X.size
    return np.count_nonzero(ia & ib) / union - (total - union) / total


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total cost over all injections of rows into columns."""
    g, p = cost.shape
    best = math.inf
    for cols in itertools.permutations(range(p), g):
        best = min(best, math.fsum(cost[r, c] for r, c in enumerate(cols)))
    return best


def dominated(q, p) -> bool:
    return all(a <= b for a, b in zip(q, p)) and any(a < b for a, b in zip(q, p))


def front_oracle(points):
    return [p for p in points if not any(dominated(q, p) for q in points)]


def naive_conv2d(x, w, b, stride, padding):
    """Quadruple-loop 2-D cross-correlation on (N, C, H, W) input."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for f in range(o):
            for y in range(oh):
                for x_ in range(ow):
                    patch = xp[i, :, y * stride : y * stride + kh, x_ * stride : x_ * stride + kw]
                    out[i, f, y, x_] = np.sum(patch * w[f]) + (0.0 if b is None else b[f])
    return out


def reference_ap(dets_per_image, gts_per_image, iou_thr):
    """Plain-loop COCO-style AP at one threshold, averaged over classes with ground truth.

    Detections are (box, score, class) tuples; ground truths are (box, class).
    """
    classes = sorted({c for gts in gts_per_image for _, c in gts})
    aps = []
    for c in classes:
        entries = []
        npos = 0
        for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
            npos += sum(1 for _, gc in gts if gc == c)
            for k, (box, score, dc) in enumerate(dets):
                if dc == c:
                    entries.append((-score, img, k, box))
        entries.sort(key=lambda e: (e[0], e[1], e[2]))
        used = {}
        tp = []
        for _, img, _, box in entries:
            gts = [(j, gb) for j, (gb, gc) in enumerate(gts_per_image[img]) if gc == c]
            best, best_j = -1.0, None
            for j, gb in gts:
                if used.get((img, j)):
                    continue
                o = _iou(box, gb)
                if o > best:
                    best, best_j = o, j
            if best_j is not None and best >= iou_thr:
                used[(img, best_j)] = True
                tp.append(1)
            else:
                tp.append(0)
        if npos == 0:
            continue
        ctp = cfp = 0
        prec, rec = [], []
        for t in tp:
            ctp += t
            cfp += 1 - t
            prec.append(ctp / (ctp + cfp))
            rec.append(ctp / npos)
        for i in range(len(prec) - 2, -1, -1):
            prec[i] = max(prec[i], prec[i + 1])
        sampled = []
        for r in np.linspace(0.0, 1.0, 101):
            p = 0.0
            for pr, rc in zip(prec, rec):
                if rc >= r:
                    p = pr
                    break
            sampled.append(p)
        aps.append(math.fsum(sampled) / 101)
    return math.fsum(aps) / len(aps) if aps else 0.0


def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def random_objective_set(rng, max_n=100, max_m=4, value_range=6):
    """Small-integer points so ties, duplicates and dominance chains are common."""
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    return [tuple(int(v) for v in row) for row in rng.integers(0, value_range, size=(n, m))]


def argmin_oracle(points, weights):
    """Lowest index minimising the exact rational weighted sum."""
    sums = [sum(Fraction(a) * Fraction(b) for a, b in zip(p, weights)) for p in points]
    return sums.index(min(sums))


def _gt(box, cls=0):
    return GroundTruth(Box(*map(float, box)), cls)


def _det(box, score, cls=0):
    return Detection(Box(*map(float, box)), score, cls)


def random_eval_fixture(rng):
    """Jittered copies of ground truth plus clutter, with tied scores and class swaps."""
    n_img = int(rng.integers(1, 5))
    dets, gts = [], []
    for _ in range(n_img):
        g = []
        for _ in range(int(rng.integers(0, 5))):
            x, y = rng.integers(0, 30, 2)
            w, h = rng.integers(3, 12, 2)
            g.append(_gt((x, y, x + w, y + h), int(rng.integers(0, 3))))
        d = []
        for _ in range(int(rng.integers(0, 8))):
            if g and rng.random() < 0.7:
                base = g[int(rng.integers(len(g)))]
                jitter = rng.integers(-2, 3, 4)
                b = np.array(base.box) + jitter
                b[2], b[3] = max(b[2], b[0] + 1), max(b[3], b[1] + 1)
                cls = base.class_id if rng.random() < 0.85 else int(rng.integers(0, 3))
            else:
                x, y = rng.integers(0, 30, 2)
                b = np.array([x, y, x + rng.integers(2, 10), y + rng.integers(2, 10)])
                cls = int(rng.integers(0, 3))
            d.append(_det(b, float(rng.choice([0.3, 0.5, 0.6, 0.8, 0.9])), cls))
        dets.append(d)
        gts.append(g)
    return dets, gts


def as_plain_fixture(dets, gts):
    return [[(tuple(d.box), d.score, d.class_id) for d in ds] for ds in dets], [[(tuple(g.box), g.class_id) for g in gs] for gs in gts]


def check_pareto_against_oracles(points, rng):
    """Assert every Pareto helper agrees with exhaustive dominance checks on ``points``."""
    front = pareto_front(points)
    assert front == front_oracle(points)
    for p in points:
        assert is_pareto_optimal(p, points) == (p in front)
    # mutual non-dominance, and each excluded point has a dominator in the front
    assert not any(dominated(q, p) for p in front for q in front)
    for p in points:
        if p not in front:
            assert any(dominated(q, p) for q in front)
    u = utopia_point(points)
    assert u == tuple(float(min(c)) for c in zip(*points))
    assert u == utopia_point(front)
    assert all(a <= b for p in points for a, b in zip(u, p))
    m = len(points[0])
    w_int = tuple(int(x) for x in rng.integers(1, 5, m))
    assert argmin_weighted(points, w_int) == points[argmin_oracle(points, w_int)]
    w_float = tuple(float(x) for x in rng.uniform(1e-3, 1.0, m))
    assert argmin_weighted(points, w_float) in front
