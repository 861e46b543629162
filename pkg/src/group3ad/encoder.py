"""Group extraction and the group-level feature encoder.

The encoder is a fixed, rotation-invariant geometric descriptor per group
(72 values) followed by a trainable two-layer head::

    row = normalize(W2 @ tanh(W1 @ x + b1) + b2)

where ``x`` is the base descriptor standardized with statistics frozen
before training. Gradients are written out by hand.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .descriptors import N_FEATURES, FpfhField
from .errors import DataError, PreconditionError, ZeroVector
from .pccore import PointCloud, SpatialIndex

BASE_DIM = 2 * N_FEATURES + 6
DEFAULT_HIDDEN = 64
DEFAULT_DIM = 32
PARAMS_MAGIC = b"G3AD"
PARAMS_VERSION = 1
ZERO_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class GroupSet:
    centers: np.ndarray   # (G,)
    members: np.ndarray   # (G, m), members[:, 0] == centers
    m: int

    def __len__(self):
        return len(self.centers)


def extract_groups(cloud, centers, m: int, index: SpatialIndex | None = None) -> GroupSet:
    """Each group is its centre plus the nearest points, m in total (clamped to N)."""
    if m < 1:
        raise PreconditionError("group size must be >= 1")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    centers = np.asarray(centers, dtype=np.int64)
    index = index or SpatialIndex(pts)
    members = index.query(pts[centers], m)
    # a lower-index duplicate can outrank the centre itself
    for i in np.flatnonzero(members[:, 0] != centers):
        row = [int(centers[i])] + [j for j in members[i] if j != centers[i]]
        members[i] = row[:members.shape[1]]
    return GroupSet(centers, members, members.shape[1])


def base_descriptors(groups: GroupSet, cloud: PointCloud, field: FpfhField) -> np.ndarray:
    """(G, 72): centre FPFH, member-mean FPFH, covariance eigenvalues, RMS spreads about the centre.

    The last six entries are the descending eigenvalues of the member
    covariance and the square roots of the descending eigenvalues of the
    second-moment matrix of offsets from the centre point.
    """
    g, m = groups.members.shape
    desc = field.descriptors
    avg = sparse.csr_matrix(
        (np.full(g * m, 1.0 / m), groups.members.ravel(), np.arange(0, g * m + 1, m)),
        shape=(g, len(desc)),
    )
    mean_fpfh = avg @ desc

    xyz = cloud.points[groups.members]
    centered = xyz - xyz.mean(axis=1, keepdims=True)
    cov = np.einsum("gmi,gmj->gij", centered, centered) / m
    offsets = xyz - cloud.points[groups.centers][:, None, :]
    second = np.einsum("gmi,gmj->gij", offsets, offsets) / m
    ev_cov = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)
    ev_sec = np.sqrt(np.clip(np.linalg.eigvalsh(second)[:, ::-1], 0.0, None))
    return np.hstack([desc[groups.centers], mean_fpfh, ev_cov, ev_sec])


def base_descriptor(members, cloud: PointCloud, field: FpfhField) -> np.ndarray:
    """Base descriptor of one group given its member indices (centre first)."""
    members = np.asarray(members, dtype=np.int64)
    one = GroupSet(members[:1], members[None, :], len(members))
    return base_descriptors(one, cloud, field)[0]


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, base):
        base = np.asarray(base, dtype=np.float64)
        std = base.std(axis=0)
        return cls(base.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def identity(cls, dim=BASE_DIM):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, base):
        return (np.asarray(base) - self.mean) / self.std


@dataclass(frozen=True, eq=False)
class EncoderParams:
    W1: np.ndarray   # (H, B)
    b1: np.ndarray   # (H,)
    W2: np.ndarray   # (D, H)
    b2: np.ndarray   # (D,)

    def __post_init__(self):
        h, b = self.W1.shape
        d = self.W2.shape[0]
        if self.b1.shape != (h,) or self.W2.shape != (d, h) or self.b2.shape != (d,):
            raise PreconditionError("inconsistent encoder parameter shapes")

    @property
    def dims(self):
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    @classmethod
    def init(cls, B=BASE_DIM, H=DEFAULT_HIDDEN, D=DEFAULT_DIM, seed=0):
        rng = np.random.default_rng(seed)
        r1, r2 = 1.0 / np.sqrt(B), 1.0 / np.sqrt(H)
        return cls(rng.uniform(-r1, r1, (H, B)), rng.uniform(-r1, r1, H),
                   rng.uniform(-r2, r2, (D, H)), rng.uniform(-r2, r2, D))

    def flat(self):
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def unflat(self, vec):
        B, H, D = self.dims
        vec = np.asarray(vec, dtype=np.float64)
        cuts = np.cumsum([H * B, H, D * H])
        w1, b1, w2, b2 = np.split(vec, cuts)
        return EncoderParams(w1.reshape(H, B), b1, w2.reshape(D, H), b2)

    def scaled_add(self, other, step):
        return self.unflat(self.flat() + step * other.flat())

    def tobytes(self):
        B, H, D = self.dims
        head = PARAMS_MAGIC + struct.pack("<IIII", PARAMS_VERSION, B, H, D)
        return head + self.flat().astype("<f8").tobytes()

    @classmethod
    def frombytes(cls, raw):
        if raw[:4] != PARAMS_MAGIC:
            raise DataError("not an encoder parameter file (bad magic)")
        version, B, H, D = struct.unpack_from("<IIII", raw, 4)
        if version != PARAMS_VERSION:
            raise DataError(f"unsupported parameter file version {version}")
        count = H * B + H + D * H + D
        body = np.frombuffer(raw, dtype="<f8", offset=20)
        if len(body) != count:
            raise DataError(f"parameter file holds {len(body)} values, expected {count}")
        shell = cls(np.zeros((H, B)), np.zeros(H), np.zeros((D, H)), np.zeros(D))
        return shell.unflat(body.astype(np.float64))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.frombytes(fh.read())


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    rows: np.ndarray            # (G, D), unit rows
    group_centers: np.ndarray   # (G, 3)

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True, eq=False)
class _HeadCache:
    x: np.ndarray
    h: np.ndarray
    y: np.ndarray
    norm: np.ndarray
    rows: np.ndarray


def head_forward(x, params: EncoderParams):
    """Apply the head to standardized base rows; returns ``(rows, cache)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = np.tanh(x @ params.W1.T + params.b1)
    y = h @ params.W2.T + params.b2
    norm = np.linalg.norm(y, axis=1)
    if np.any(norm < ZERO_NORM):
        raise ZeroVector(f"{int((norm < ZERO_NORM).sum())} feature rows collapsed to zero")
    rows = y / norm[:, None]
    return rows, _HeadCache(x, h, y, norm, rows)


def head_backward(cache: _HeadCache, params: EncoderParams, upstream) -> EncoderParams:
    """Gradient of a scalar loss w.r.t. the head parameters given dL/drows."""
    g = np.asarray(upstream, dtype=np.float64)
    f = cache.rows
    dy = (g - f * np.einsum("ij,ij->i", f, g)[:, None]) / cache.norm[:, None]
    dz = (dy @ params.W2) * (1.0 - cache.h ** 2)
    return EncoderParams(dz.T @ cache.x, dz.sum(axis=0), dy.T @ cache.h, dy.sum(axis=0))


def encode(groups: GroupSet, cloud: PointCloud, field: FpfhField, params: EncoderParams,
           standardizer: Standardizer | None = None) -> FeatureMatrix:
    base = base_descriptors(groups, cloud, field)
    x = standardizer(base) if standardizer is not None else base
    rows, _ = head_forward(x, params)
    return FeatureMatrix(rows, cloud.points[groups.centers])


def encode_backward(groups: GroupSet, cloud: PointCloud, field: FpfhField, params: EncoderParams,
                    upstream, standardizer: Standardizer | None = None) -> EncoderParams:
    base = base_descriptors(groups, cloud, field)
    x = standardizer(base) if standardizer is not None else base
    _, cache = head_forward(x, params)
    return head_backward(cache, params, upstream)
