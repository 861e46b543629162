"""K-means with elbow selection, and the intercluster-uniformity / intracluster-alignment losses.

Both losses return a value plus its (sub)gradient with respect to the
feature rows. Cluster assignments are treated as constants; cluster
centres stay differentiable as means of their member rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCenters, PreconditionError, TooFewRows
from .sampling import farthest_iter

DEFAULT_MAX_ITER = 100
DEFAULT_K_MAX = 20


def _rows(features):
    return np.asarray(getattr(features, "rows", features), dtype=np.float64)


def _means(rows, assignment, K):
    sums = np.stack([np.bincount(assignment, weights=col, minlength=K) for col in rows.T], axis=1)
    counts = np.bincount(assignment, minlength=K)
    return sums / np.maximum(counts, 1)[:, None], counts


def _wcss(rows, assignment, centers, K):
    per = np.bincount(assignment, weights=((rows - centers[assignment]) ** 2).sum(axis=1), minlength=K)
    return per


@dataclass(frozen=True, eq=False)
class Clustering:
    K: int
    assignment: np.ndarray
    centers: np.ndarray
    wcss_per_cluster: np.ndarray
    wcss_total: float
    wcss_history: tuple = ()
    n_iter: int = 0

    @property
    def sizes(self):
        return np.bincount(self.assignment, minlength=self.K)

    @classmethod
    def from_assignment(cls, features, assignment, K=None):
        rows = _rows(features)
        assignment = np.asarray(assignment, dtype=np.int64)
        K = int(assignment.max()) + 1 if K is None else K
        centers, _ = _means(rows, assignment, K)
        per = _wcss(rows, assignment, centers, K)
        return cls(K, assignment, centers, per, float(per.sum()))


def _nearest_center(rows, centers):
    # |x|^2 - 2x.c + |c|^2 without the row-constant |x|^2; ties go to the lower cluster id
    d2 = (centers ** 2).sum(axis=1)[None, :] - 2.0 * (rows @ centers.T)
    return np.argmin(d2, axis=1)


def _fast_means(rows, assignment, K):
    onehot = np.zeros((len(rows), K))
    onehot[np.arange(len(rows)), assignment] = 1.0
    counts = onehot.sum(axis=0)
    return (onehot.T @ rows) / np.maximum(counts, 1.0)[:, None], counts


def _repair_empty(rows, assignment, centers, K):
    counts = np.bincount(assignment, minlength=K)
    for j in np.flatnonzero(counts == 0):
        dist = ((rows - centers[assignment]) ** 2).sum(axis=1)
        # never strip a singleton cluster of its only row
        dist[counts[assignment] <= 1] = -1.0
        far = int(np.argmax(dist))
        counts[assignment[far]] -= 1
        assignment[far] = j
        counts[j] = 1
        centers[j] = rows[far]
    return assignment


def _init_order(rows, count, seed):
    first = int(np.random.default_rng(seed).integers(len(rows)))
    it = farthest_iter(rows, first, expanded=True)
    return [next(it) for _ in range(count)]


def kmeans(features, K: int, seed=0, max_iter: int = DEFAULT_MAX_ITER, init=None) -> Clustering:
    """Lloyd's algorithm seeded by farthest-point picks in feature space.

    ``init`` may supply a precomputed farthest-point order (at least K long)
    for the same ``seed``; its first K entries are used.
    """
    rows = _rows(features)
    n = len(rows)
    if K < 1 or K > n:
        raise TooFewRows(f"cannot form {K} clusters from {n} rows")
    if max_iter < 1:
        raise PreconditionError("max_iter must be >= 1")

    order = _init_order(rows, K, seed) if init is None else list(init)[:K]
    centers = rows[order].copy()
    assignment = _repair_empty(rows, _nearest_center(rows, centers), centers, K)

    total_sq = float((rows ** 2).sum())
    slack = 64 * np.finfo(np.float64).eps * total_sq
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        centers, counts = _fast_means(rows, assignment, K)
        # WCSS = sum |x|^2 - sum_k n_k |mu_k|^2 when mu_k are the cluster means;
        # exact up to rounding of order eps * sum |x|^2
        wcss = total_sq - float(counts @ (centers ** 2).sum(axis=1))
        assert not history or wcss <= history[-1] + slack, "Lloyd step increased WCSS"
        history.append(wcss)
        new = _repair_empty(rows, _nearest_center(rows, centers), centers, K)
        if np.array_equal(new, assignment):
            break
        assignment = new

    centers, _ = _means(rows, assignment, K)
    per = _wcss(rows, assignment, centers, K)
    return Clustering(K, assignment, centers, per, float(per.sum()), tuple(history), n_iter)


def elbow_from_curve(ks, wcss) -> int:
    """K whose (K, WCSS) point lies farthest from the chord joining the endpoints.

    Ties (within rounding) go to the smaller K.
    """
    ks = np.asarray(ks, dtype=np.float64)
    w = np.asarray(wcss, dtype=np.float64)
    dx, dy = ks[-1] - ks[0], w[-1] - w[0]
    num = np.abs(dx * (w[0] - w) - (ks[0] - ks) * dy)
    tol = 1e-12 * (abs(dx) * (np.abs(w).max() + 1.0))
    return int(ks[np.flatnonzero(num >= num.max() - tol)[0]])


def elbow_clustering(features, k_min=2, k_max=None, seed=0, max_iter=DEFAULT_MAX_ITER):
    """Run kmeans over [k_min, k_max]; return ``(K, clustering_for_K, {K: wcss})``."""
    rows = _rows(features)
    n = len(rows)
    if k_max is None:
        k_max = min(DEFAULT_K_MAX, n - 1)
    if not 2 <= k_min < k_max <= n - 1:
        raise TooFewRows(f"elbow needs 2 <= k_min < k_max <= rows-1; got [{k_min}, {k_max}] with {n} rows")
    # farthest-point orders are prefixes of each other, so one pass seeds every K
    order = _init_order(rows, k_max, seed)
    runs = {k: kmeans(rows, k, seed, max_iter, init=order) for k in range(k_min, k_max + 1)}
    curve = {k: c.wcss_total for k, c in runs.items()}
    best = elbow_from_curve(list(curve), list(curve.values()))
    return best, runs[best], curve


def select_k_elbow(features, k_min=2, k_max=None, seed=0) -> int:
    return elbow_clustering(features, k_min, k_max, seed)[0]


@dataclass(frozen=True, eq=False)
class LossValue:
    value: float
    grad_rows: np.ndarray
    pairs: tuple     # achieved (i, j) pairs: cluster ids for uniformity, row ids for alignment
    distances: np.ndarray


def center_distances(centers):
    diff = centers[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def uniformity_loss(clustering: Clustering) -> LossValue:
    """1 / (smallest distance between two cluster centres)."""
    K = clustering.K
    if K < 2:
        raise PreconditionError("uniformity loss needs at least two clusters")
    C = clustering.centers
    dist = center_distances(C)
    iu = np.triu_indices(K, k=1)
    flat = dist[iu]
    t = int(np.argmin(flat))       # row-major order => lexicographically lowest pair on ties
    i, j, d = int(iu[0][t]), int(iu[1][t]), float(flat[t])
    if d < 1e-12:
        raise DegenerateCenters(f"clusters {i} and {j} have coincident centres")

    g = (C[i] - C[j]) / d ** 3
    sizes = clustering.sizes
    grad = np.zeros((len(clustering.assignment), C.shape[1]))
    a = clustering.assignment
    grad[a == i] = -g / sizes[i]
    grad[a == j] = g / sizes[j]
    return LossValue(1.0 / d, grad, ((i, j),), np.array([d]))


def farthest_pair(rows, chunk=512):
    """Lexicographically first pair (p < q) achieving the largest distance."""
    n = len(rows)
    if n < 2:
        return 0, 0, 0.0
    sq = (rows ** 2).sum(axis=1)
    best, bp, bq = -1.0, 0, 0
    for s in range(0, n, chunk):
        blk = rows[s:s + chunk]
        d2 = sq[s:s + chunk, None] - 2.0 * blk @ rows.T + sq[None, :]
        p_idx = np.arange(s, s + len(blk))[:, None]
        d2[np.arange(n)[None, :] <= p_idx] = -1.0
        t = int(np.argmax(d2))
        if d2.flat[t] > best:
            best = float(d2.flat[t])
            bp, bq = s + t // n, t % n
    return bp, bq, float(np.linalg.norm(rows[bp] - rows[bq]))


def alignment_loss(features, clustering: Clustering, T: float = 1.0) -> LossValue:
    """(T / K) * sum over clusters of the squared largest intracluster distance."""
    if T <= 0:
        raise PreconditionError("temperature must be positive")
    rows = _rows(features)
    K = clustering.K
    grad = np.zeros_like(rows)
    total = 0.0
    pairs, dists = [], np.zeros(K)
    for k in range(K):
        idx = np.flatnonzero(clustering.assignment == k)
        if len(idx) < 2:
            pairs.append((int(idx[0]), int(idx[0])) if len(idx) else (-1, -1))
            continue
        p, q, d = farthest_pair(rows[idx])
        p, q = int(idx[p]), int(idx[q])
        pairs.append((p, q))
        dists[k] = d
        total += d * d
        diff = rows[p] - rows[q]
        grad[p] += 2.0 * T / K * diff
        grad[q] -= 2.0 * T / K * diff
    return LossValue(T / K * total, grad, tuple(pairs), dists)
