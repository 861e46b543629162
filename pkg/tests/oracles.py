"""Slow, independent reference implementations used as test oracles.

Everything here is written with plain loops and the ``math`` module so it
shares no code path with the vectorized library routines it checks.
"""
import math

import numpy as np


def brute_knn(points, query, k):
    d = [(sum((p[j] - query[j]) ** 2 for j in range(3)), i) for i, p in enumerate(points)]
    d.sort()
    return [i for _, i in d[:k]]


def brute_fps_check(points, order):
    """Assert each pick maximizes the min distance to the earlier picks (ties -> lowest index)."""
    pts = np.asarray(points)
    for t in range(1, len(order)):
        taken = order[:t]
        best, best_i = -1.0, None
        for i in range(len(pts)):
            if i in taken:
                continue
            m = min(float(((pts[i] - pts[j]) ** 2).sum()) for j in taken)
            if m > best:
                best, best_i = m, i
        if best_i != order[t]:
            return False
    return True


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def darboux(ps, ns, pt, nt):
    """(alpha, phi, theta) for one ordered pair, or None when undefined."""
    d = [pt[j] - ps[j] for j in range(3)]
    dist = math.sqrt(_dot(d, d))
    if dist <= 1e-12:
        return None
    d = [x / dist for x in d]
    c1, c2 = _dot(ns, d), _dot(nt, d)
    if math.acos(min(1.0, abs(c1))) > math.acos(min(1.0, abs(c2))):
        u, n2, d, phi = list(nt), list(ns), [-x for x in d], -c2
    else:
        u, n2, phi = list(ns), list(nt), c1
    v = _cross(d, u)
    vn = math.sqrt(_dot(v, v))
    if vn <= 1e-12:
        return None
    v = [x / vn for x in v]
    w = _cross(u, v)
    return _dot(v, n2), phi, math.atan2(_dot(w, n2), _dot(u, n2))


def _slot(value, lo, hi):
    b = int(math.floor((value - lo) / (hi - lo) * 11))
    return min(max(b, 0), 10)


def spfh_oracle(points, normals, neighbors):
    """Per-point percentage histograms from explicit neighbour lists."""
    out = np.zeros((len(points), 33))
    for p, nbrs in enumerate(neighbors):
        count = 0
        for q in nbrs:
            f = darboux(points[p], normals[p], points[q], normals[q])
            if f is None:
                continue
            count += 1
            out[p, _slot(f[0], -1, 1)] += 1
            out[p, 11 + _slot(f[1], -1, 1)] += 1
            out[p, 22 + _slot(f[2], -math.pi, math.pi)] += 1
        if count:
            out[p] *= 100.0 / count
    return out


def fpfh_oracle(points, spfh, neighbors):
    """FPFH(p) = SPFH(p) + (1/k) sum SPFH(q) / |p - q|, each block rescaled to 100."""
    out = np.zeros_like(spfh)
    for p, nbrs in enumerate(neighbors):
        acc = spfh[p].copy()
        for q in nbrs:
            dist = math.dist(points[p], points[q])
            if dist > 1e-12:
                acc += spfh[q] / dist / len(nbrs)
        for b in range(3):
            s = acc[11 * b:11 * (b + 1)].sum()
            if s > 0:
                acc[11 * b:11 * (b + 1)] *= 100.0 / s
        out[p] = acc
    return out


def brute_nn_distance(queries, entries):
    return np.array([min(math.dist(q, e) for e in entries) for q in queries])


def trapezoid_auroc(scores, labels):
    """Sweep every distinct threshold and integrate the ROC curve by trapezoids."""
    pos = sum(labels)
    neg = len(labels) - pos
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        pts.append((fp / neg, tp / pos))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def enumerated_ap(scores, labels):
    """Average precision by enumerating thresholds at each distinct score."""
    pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(sel)
        recall = tp / pos
        ap += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return ap


def central_difference(fn, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g
