"""Coreset memory banks over group features and group-centre coordinates.

Test groups are scored by nearest-neighbour distance to each bank, every
stream standardized by (median, MAD) of leave-self-out distances measured
on a slice of the training rows, and the two streams averaged.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, EmptyBank, EmptyInput, PreconditionError
from .sampling import farthest_iter

DEFAULT_MEMORY_SIZE = 10000
DEFAULT_K_INTERP = 3
BANK_MAGIC = b"G3BK"
BANK_VERSION = 1
FEAT, COORD = 0, 1
CALIB_STRIDE = 10


def greedy_coreset(rows, size):
    """Greedy minimax selection, seeded by the row farthest from the mean."""
    rows = np.asarray(rows, dtype=np.float64)
    size = min(size, len(rows))
    first = int(np.argmax(((rows - rows.mean(axis=0)) ** 2).sum(axis=1)))
    it = farthest_iter(rows, first, expanded=rows.shape[1] > 3)
    return np.fromiter((next(it) for _ in range(size)), dtype=np.int64, count=size)


def nearest_distances(queries, entries, exclude=None, chunk=1024):
    """Exact nearest-neighbour distance from each query row to ``entries``.

    ``exclude`` optionally gives, per query, one entry index to skip
    (-1 for none). Candidates are ranked with a matrix product and the
    best few are re-measured directly.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    e = np.asarray(entries, dtype=np.float64)
    if len(e) == 0:
        raise EmptyBank("memory bank is empty")
    esq = (e ** 2).sum(axis=1)
    out = np.empty(len(q))
    top = min(4, len(e))
    for s in range(0, len(q), chunk):
        blk = q[s:s + chunk]
        d2 = (blk ** 2).sum(axis=1)[:, None] - 2.0 * blk @ e.T + esq[None, :]
        if exclude is not None:
            ex = np.asarray(exclude[s:s + chunk])
            rows = np.flatnonzero(ex >= 0)
            d2[rows, ex[rows]] = np.inf
        cand = np.argpartition(d2, top - 1, axis=1)[:, :top]
        exact = np.sqrt(((e[cand] - blk[:, None, :]) ** 2).sum(axis=2))
        exact[~np.isfinite(np.take_along_axis(d2, cand, axis=1))] = np.inf
        out[s:s + chunk] = exact.min(axis=1)
    return out


@dataclass(frozen=True, eq=False)
class Stream:
    entries: np.ndarray   # (M, dim)
    median: float
    mad: float

    def tobytes(self, tag):
        head = BANK_MAGIC + struct.pack("<IBIQ", BANK_VERSION, tag, self.entries.shape[1], len(self.entries))
        body = np.ascontiguousarray(self.entries, dtype="<f8").tobytes()
        return head + body + struct.pack("<dd", self.median, self.mad)

    @classmethod
    def frombytes(cls, raw):
        if raw[:4] != BANK_MAGIC:
            raise DataError("not a memory-bank file (bad magic)")
        version, tag, dim, count = struct.unpack_from("<IBIQ", raw, 4)
        if version != BANK_VERSION:
            raise DataError(f"unsupported bank file version {version}")
        off = 4 + struct.calcsize("<IBIQ")
        need = off + 8 * dim * count + 16
        if len(raw) != need:
            raise DataError(f"bank file has {len(raw)} bytes, expected {need}")
        entries = np.frombuffer(raw, dtype="<f8", count=dim * count, offset=off).reshape(count, dim)
        median, mad = struct.unpack_from("<dd", raw, off + 8 * dim * count)
        return tag, cls(entries.astype(np.float64), median, mad)

    def standardize(self, raw):
        return (raw - self.median) / self.mad


@dataclass(frozen=True, eq=False)
class MemoryBank:
    feat: Stream
    coord: Stream

    @property
    def feat_entries(self):
        return self.feat.entries

    @property
    def coord_entries(self):
        return self.coord.entries

    def save(self, feat_path, coord_path):
        with open(feat_path, "wb") as fh:
            fh.write(self.feat.tobytes(FEAT))
        with open(coord_path, "wb") as fh:
            fh.write(self.coord.tobytes(COORD))

    @classmethod
    def load(cls, feat_path, coord_path):
        streams = {}
        for path in (feat_path, coord_path):
            with open(path, "rb") as fh:
                tag, stream = Stream.frombytes(fh.read())
            streams[tag] = stream
        if set(streams) != {FEAT, COORD}:
            raise DataError("bank files must hold one feature and one coordinate stream")
        return cls(streams[FEAT], streams[COORD])


def _robust_scale(values):
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    if mad <= 1e-12:
        mad = float(np.mean(np.abs(values - med)))
    if mad <= 1e-12:
        mad = 1.0
    return med, mad


def _calibrate(rows, entries, source):
    """Leave-self-out NN distances of every CALIB_STRIDE-th row -> (median, MAD)."""
    held = np.arange(0, len(rows), CALIB_STRIDE)
    if len(entries) < 2:
        return _robust_scale(np.zeros(1))
    slot = np.full(len(rows), -1)
    slot[source] = np.arange(len(source))
    return _robust_scale(nearest_distances(rows[held], entries, exclude=slot[held]))


def build_bank(features, coords, memory_size: int = DEFAULT_MEMORY_SIZE) -> MemoryBank:
    """Coreset both streams down to ``memory_size`` entries and calibrate them.

    Coordinate entries are the centres paired with the selected feature rows.
    """
    feats = np.asarray(getattr(features, "rows", features), dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if len(feats) == 0:
        raise EmptyInput("no training feature rows")
    if len(coords) != len(feats):
        raise PreconditionError("features and coordinates must pair up row for row")
    if memory_size < 1:
        raise PreconditionError("memory_size must be >= 1")

    sel = greedy_coreset(feats, memory_size)
    # An independent coordinate pass appended after the paired coordinates and
    # truncated to memory_size can never contribute: either the paired set
    # already fills the budget or it already holds every row.
    coord_src = sel
    feat = Stream(feats[sel], *_calibrate(feats, feats[sel], sel))
    coord = Stream(coords[coord_src], *_calibrate(coords, coords[coord_src], coord_src))
    return MemoryBank(feat, coord)


@dataclass(frozen=True, eq=False)
class GroupScores:
    score: np.ndarray
    raw_feat: np.ndarray
    raw_coord: np.ndarray


def score_groups(bank: MemoryBank, features, centers) -> GroupScores:
    """Mean of the two standardized nearest-neighbour distance streams."""
    if bank is None or len(bank.feat.entries) == 0 or len(bank.coord.entries) == 0:
        raise EmptyBank("memory bank is empty")
    rows = np.asarray(getattr(features, "rows", features), dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    s_feat = nearest_distances(rows, bank.feat.entries)
    s_coord, _ = cKDTree(bank.coord.entries).query(centers, k=1)
    s_coord = np.asarray(s_coord, dtype=np.float64)
    score = 0.5 * (bank.feat.standardize(s_feat) + bank.coord.standardize(s_coord))
    return GroupScores(score, s_feat, s_coord)


def interpolate_point_scores(centers, group_scores, cloud, k_interp: int = DEFAULT_K_INTERP):
    """Inverse-distance-weighted mean over the k nearest group centres."""
    centers = np.asarray(centers, dtype=np.float64)
    scores = np.asarray(group_scores, dtype=np.float64)
    if len(centers) == 0:
        raise PreconditionError("need at least one group")
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    k = min(k_interp, len(centers))
    d, nb = cKDTree(centers).query(pts, k=k)
    d = np.asarray(d, dtype=np.float64).reshape(len(pts), k)
    nb = np.asarray(nb).reshape(len(pts), k)
    w = 1.0 / (d + 1e-9)
    out = (w * scores[nb]).sum(axis=1) / w.sum(axis=1)
    hit = d[:, 0] == 0.0
    out[hit] = scores[nb[hit, 0]]
    return out
