"""Fast Point Feature Histograms and the per-point local variation score.

Layout of a descriptor: three 11-bin sub-histograms, in the order
alpha (v . n_t), phi (u . d / |d|), theta (atan2(w . n_t, u . n_t)).
alpha and phi are binned over [-1, 1], theta over [-pi, pi]. Each
sub-histogram is expressed in percent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingNormals, PreconditionError
from .pccore import PointCloud, SpatialIndex, estimate_normals, neighbors_excluding_self

N_BINS = 11
N_FEATURES = 3 * N_BINS
DEFAULT_K = 16
_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class FpfhField:
    descriptors: np.ndarray          # (N, 33)
    variation: np.ndarray | None     # (N,) or None until local_variation runs
    neighbor_count: int
    degenerate: np.ndarray           # (N,) bool, all-zero descriptor

    def with_variation(self, variation):
        return FpfhField(self.descriptors, variation, self.neighbor_count, self.degenerate)


def pair_features(ps, ns, pt, nt):
    """Darboux-frame features for arrays of point pairs.

    Returns ``(alpha, phi, theta, valid)``. A pair is invalid when the
    points coincide or the displacement is parallel to the source normal.
    The source is whichever endpoint's normal makes the smaller angle
    with the connecting line.
    """
    d = pt - ps
    dist = np.linalg.norm(d, axis=-1)
    valid = dist > _EPS
    safe = np.where(valid, dist, 1.0)[..., None]
    d = d / safe
    a1 = np.einsum("...i,...i->...", ns, d)
    a2 = np.einsum("...i,...i->...", nt, d)
    swap = np.abs(a1) < np.abs(a2)
    sw = swap[..., None]
    u = np.where(sw, nt, ns)
    n_tgt = np.where(sw, ns, nt)
    d = np.where(sw, -d, d)
    phi = np.where(swap, -a2, a1)

    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=-1)
    valid &= vn > _EPS
    v = v / np.where(vn > _EPS, vn, 1.0)[..., None]
    w = np.cross(u, v)
    alpha = np.einsum("...i,...i->...", v, n_tgt)
    theta = np.arctan2(np.einsum("...i,...i->...", w, n_tgt), np.einsum("...i,...i->...", u, n_tgt))
    return alpha, phi, theta, valid


def _bin(values, lo, hi):
    idx = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(idx, 0, N_BINS - 1)


def _require_normals(cloud):
    if cloud.normals is None:
        raise MissingNormals("FPFH needs per-point normals; run estimate_normals first")


def _spfh_from_neighbors(cloud, nb):
    n, k = nb.shape
    ps = np.repeat(cloud.points[:, None, :], k, axis=1)
    ns = np.repeat(cloud.normals[:, None, :], k, axis=1)
    alpha, phi, theta, valid = pair_features(ps, ns, cloud.points[nb], cloud.normals[nb])

    hist = np.zeros(n * N_FEATURES)
    base = (np.arange(n) * N_FEATURES)[:, None]
    for block, (vals, lo, hi) in enumerate(((alpha, -1.0, 1.0), (phi, -1.0, 1.0), (theta, -np.pi, np.pi))):
        flat = base + block * N_BINS + _bin(vals, lo, hi)
        # bin counts are small integers, so the accumulation order cannot matter
        hist += np.bincount(flat[valid], minlength=n * N_FEATURES)
    hist = hist.reshape(n, N_FEATURES)
    counts = valid.sum(axis=1)
    hist *= (100.0 / np.maximum(counts, 1))[:, None]
    return hist, counts == 0


def compute_spfh(cloud: PointCloud, index: SpatialIndex, k: int = DEFAULT_K):
    """Per-point simplified histograms over the k nearest neighbours (self excluded).

    Returns ``(hist, degenerate)``; degenerate rows are all zero.
    """
    _require_normals(cloud)
    if k < 2:
        raise PreconditionError("compute_spfh needs k >= 2")
    return _spfh_from_neighbors(cloud, neighbors_excluding_self(index, k))


def _renormalize(hist):
    out = hist.copy()
    for b in range(3):
        block = out[:, b * N_BINS:(b + 1) * N_BINS]
        s = block.sum(axis=1, keepdims=True)
        np.divide(block * 100.0, s, out=block, where=s > 0)
    return out


def compute_fpfh(cloud: PointCloud, index: SpatialIndex, k: int = DEFAULT_K) -> FpfhField:
    """FPFH(p) = SPFH(p) + (1/k) sum_q SPFH(q) / |p - q|, re-normalized per block."""
    _require_normals(cloud)
    if k < 2:
        raise PreconditionError("compute_fpfh needs k >= 2")
    nb = neighbors_excluding_self(index, k)
    spfh, degenerate = _spfh_from_neighbors(cloud, nb)
    dist = np.linalg.norm(cloud.points[nb] - cloud.points[:, None, :], axis=2)
    weight = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > _EPS)
    kk = max(nb.shape[1], 1)
    fpfh = spfh + np.einsum("nk,nkf->nf", weight, spfh[nb]) / kk
    fpfh = _renormalize(fpfh)
    degenerate = fpfh.sum(axis=1) == 0
    return FpfhField(fpfh, None, kk, degenerate)


def local_variation(field: FpfhField, cloud: PointCloud, index: SpatialIndex, n: int = DEFAULT_K):
    """Sum of descriptor distances from each point to its n nearest neighbours."""
    if n < 1:
        raise PreconditionError("local_variation needs n >= 1")
    nb = neighbors_excluding_self(index, n)
    f = field.descriptors
    return np.linalg.norm(f[nb] - f[:, None, :], axis=2).sum(axis=1)


def fpfh_field(cloud: PointCloud, k: int = DEFAULT_K, index: SpatialIndex | None = None, variation=True):
    """Normals (if absent), FPFH and (unless ``variation=False``) variation in one call.

    Returns ``(cloud_with_normals, index, field)``.
    """
    index = index or SpatialIndex(cloud.points)
    # one k+1 query serves normals, histograms and variation
    index.self_query(k + 1)
    if cloud.normals is None:
        cloud, _ = estimate_normals(cloud, max(3, min(k, len(cloud))), index)
    field = compute_fpfh(cloud, index, k)
    if variation:
        field = field.with_variation(local_variation(field, cloud, index, k))
    return cloud, index, field
