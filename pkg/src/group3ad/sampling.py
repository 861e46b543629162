"""Farthest-point sampling and adaptive group-centre selection (AGCS)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .descriptors import FpfhField
from .errors import PreconditionError

VARIATION = "variation"
UNIFORM = "uniform"
DEFAULT_ALPHA = 0.2


def _coords(cloud):
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)


def farthest_iter(points, first, expanded=False):
    """Yield indices in farthest-point order starting from ``first``.

    Distances are squared Euclidean; ties go to the lower index. Stops
    after every point has been yielded. ``expanded`` computes distances
    as |a|^2 - 2ab + |b|^2 (a matrix-vector product), which is much faster
    for high-dimensional rows at the cost of last-bit exactness.
    """
    n = len(points)
    mind = np.full(n, np.inf)
    if expanded:
        sq = (points ** 2).sum(axis=1)
    else:
        cols = [np.ascontiguousarray(points[:, j]) for j in range(points.shape[1])]
        d, buf = np.empty(n), np.empty(n)
    idx = int(first)
    for _ in range(n):
        yield idx
        if expanded:
            d = sq - 2.0 * (points @ points[idx]) + sq[idx]
        else:
            # column-wise in-place accumulation; for 3-D rows this matches .sum(axis=1) bit for bit
            np.subtract(cols[0], cols[0][idx], out=d)
            np.multiply(d, d, out=d)
            for col in cols[1:]:
                np.subtract(col, col[idx], out=buf)
                np.multiply(buf, buf, out=buf)
                d += buf
        np.minimum(mind, d, out=mind)
        # taken points sit at -1 and stay there since distances are >= 0
        mind[idx] = -1.0
        idx = int(np.argmax(mind))


def _first_index(n, seed):
    return int(np.random.default_rng(seed).integers(n))


def fps(cloud, n: int, seed=0, first: int | None = None) -> np.ndarray:
    """Farthest-point sample ``n`` indices; the first pick is drawn from ``seed``."""
    pts = _coords(cloud)
    if not 1 <= n <= len(pts):
        raise PreconditionError(f"fps needs 1 <= n <= N, got n={n}, N={len(pts)}")
    start = _first_index(len(pts), seed) if first is None else first
    it = farthest_iter(pts, start)
    return np.fromiter((next(it) for _ in range(n)), dtype=np.int64, count=n)


def covering_radius(cloud, centers):
    pts = _coords(cloud)
    c = pts[np.asarray(centers)]
    best = np.full(len(pts), np.inf)
    for row in c:
        np.minimum(best, ((pts - row) ** 2).sum(axis=1), out=best)
    return float(np.sqrt(best.max()))


@dataclass(frozen=True, eq=False)
class CenterSelection:
    indices: np.ndarray
    provenance: np.ndarray   # str array of VARIATION / UNIFORM
    alpha: float

    @property
    def n_variation(self):
        return int((self.provenance == VARIATION).sum())


def high_variation_pool(variation, alpha):
    """Indices of the ceil(alpha * N) largest variation scores, ties to lower index."""
    variation = np.asarray(variation)
    size = math.ceil(alpha * len(variation) - 1e-9)
    order = np.lexsort((np.arange(len(variation)), -variation))
    return np.sort(order[:size])


def agcs(cloud, field: FpfhField, n: int, alpha: float = DEFAULT_ALPHA, seed=0) -> CenterSelection:
    """Mix FPS over the high-variation pool (fraction alpha) with FPS over the cloud.

    ``round(alpha * n)`` centres come from the pool; the rest come from a
    plain FPS run over the whole cloud (same first pick as ``fps`` with this
    seed), skipping indices the pool run already took. A pool smaller than
    its quota contributes everything it has and the uniform run covers the
    shortfall.
    """
    pts = _coords(cloud)
    N = len(pts)
    if not 0.0 <= alpha <= 1.0:
        raise PreconditionError(f"alpha must lie in [0, 1], got {alpha}")
    if not 1 <= n <= N:
        raise PreconditionError(f"agcs needs 1 <= n <= N, got n={n}, N={N}")
    if field.variation is None:
        raise PreconditionError("FpfhField has no variation scores")

    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**63))
    n_var = int(math.floor(alpha * n + 0.5))
    chosen = []
    if n_var > 0:
        pool = high_variation_pool(field.variation, alpha)
        take = min(n_var, len(pool))
        if take > 0:
            first = _first_index(len(pool), [int(seed), 1])
            it = farthest_iter(pts[pool], first)
            chosen = [int(pool[next(it)]) for _ in range(take)]
    seen = set(chosen)
    n_pool = len(chosen)

    uniform = []
    it = farthest_iter(pts, _first_index(N, seed))
    while len(uniform) < n - n_pool:
        idx = next(it)
        if idx not in seen:
            uniform.append(idx)
            seen.add(idx)

    indices = np.array(chosen + uniform, dtype=np.int64)
    prov = np.array([VARIATION] * n_pool + [UNIFORM] * len(uniform))
    return CenterSelection(indices, prov, float(alpha))
