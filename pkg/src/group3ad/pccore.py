"""Point-cloud data model, PLY I/O, exact k-NN index and PCA normals."""
from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateCloud,
    MalformedHeader,
    PreconditionError,
    TruncatedBody,
    UnsupportedFormat,
)

UNIT_TOL = 1e-6


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable cloud: (N, 3) positions, optional unit normals, optional 0/1 labels."""

    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise PreconditionError(f"points must be a nonempty (N, 3) array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise PreconditionError("points contain non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))

        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise PreconditionError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= UNIT_TOL):
                raise PreconditionError("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(nrm))

        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (len(pts),):
                raise PreconditionError(f"labels shape {lab.shape} does not match {len(pts)} points")
            if not np.isin(lab, (0, 1)).all():
                raise PreconditionError("labels must be 0 or 1")
            object.__setattr__(self, "labels", _frozen(lab.astype(np.int64)))

    def __len__(self):
        return len(self.points)

    def with_normals(self, normals):
        return PointCloud(self.points, normals, self.labels)

    def with_labels(self, labels):
        return PointCloud(self.points, self.normals, labels)


@dataclass(frozen=True)
class Transform:
    """``normalized = (raw + translation) * scale``."""

    translation: np.ndarray
    scale: float

    def apply(self, pts):
        return (np.asarray(pts, dtype=np.float64) + self.translation) * self.scale

    def invert(self, pts):
        return np.asarray(pts, dtype=np.float64) / self.scale - self.translation


def max_extent(points):
    pts = np.asarray(points)
    return float(np.max(pts.max(axis=0) - pts.min(axis=0)))


def normalize(cloud: PointCloud) -> tuple[PointCloud, Transform]:
    """Center on the centroid and scale so the largest axis-aligned extent is 1."""
    pts = cloud.points
    extent = max_extent(pts)
    if extent == 0.0:
        raise DegenerateCloud("all points coincide; cannot normalize")
    translation = -pts.mean(axis=0)
    scale = 1.0 / extent
    out = (pts + translation) * scale
    # second centering pass removes the rounding residue of the first
    out = out - out.mean(axis=0)
    return PointCloud(out, cloud.normals, cloud.labels), Transform(translation, scale)


def is_normalized(cloud, tol=1e-6):
    return abs(max_extent(cloud.points) - 1.0) <= tol


# ---------------------------------------------------------------- k-NN

class SpatialIndex:
    """Exact k-nearest-neighbour index over a fixed set of 3-D points.

    Results are sorted by squared Euclidean distance with ties resolved
    toward the lower point index, so they agree exactly with a brute-force
    ``lexsort`` of the distance vector.
    """

    def __init__(self, points):
        pts = points.points if isinstance(points, PointCloud) else points
        self.points = _frozen(np.asarray(pts, dtype=np.float64))
        self._tree = cKDTree(self.points)
        self._self_nb = None

    def __len__(self):
        return len(self.points)

    def query(self, queries, k):
        """Return an (M, min(k, N)) int array of neighbour indices."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        k = int(max(1, min(k, n)))
        if k == n:
            return np.stack([self._brute(row, k) for row in q]) if len(q) else np.empty((0, k), int)

        _, cand = self._tree.query(q, k=k + 1)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), k + 1)
        d2 = ((self.points[cand] - q[:, None, :]) ** 2).sum(axis=2)
        # sort each row by (distance, index)
        key = np.argsort(cand, axis=1, kind="stable")
        cand = np.take_along_axis(cand, key, axis=1)
        d2 = np.take_along_axis(d2, key, axis=1)
        order = np.argsort(d2, axis=1, kind="stable")
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)

        # a near-tie at the k/k+1 boundary means the candidate set may be wrong
        gap = d2[:, k] - d2[:, k - 1]
        ambiguous = gap <= 1e-9 * (d2[:, k] + 1e-300)
        out = cand[:, :k].copy()
        for i in np.flatnonzero(ambiguous):
            out[i] = self._brute(q[i], k)
        return out

    def self_query(self, k):
        """``query(self.points, k)``, memoized; smaller k reuse the prefix of larger ones."""
        k = int(max(1, min(k, len(self.points))))
        if self._self_nb is None or self._self_nb.shape[1] < k:
            nb = self.query(self.points, k)
            nb.setflags(write=False)
            self._self_nb = nb
        return self._self_nb[:, :k]

    def _brute(self, q, k):
        d2 = ((self.points - q) ** 2).sum(axis=1)
        return np.lexsort((np.arange(len(d2)), d2))[:k]


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    """Indices of the k nearest points to a single query position."""
    return index.query(np.asarray(query, dtype=np.float64)[None, :], k)[0]


def neighbors_excluding_self(index, k):
    """(N, min(k, N-1)) neighbour indices of every indexed point, self removed."""
    n = len(index)
    k = min(k, n - 1)
    if k < 1:
        return np.empty((n, 0), dtype=np.int64)
    nb = index.self_query(k + 1)
    own = np.arange(n)[:, None]
    is_self = nb == own
    # rows where a lower-index duplicate pushed self out of the list drop the last column
    missing = ~is_self.any(axis=1)
    is_self[missing, -1] = True
    return nb[~is_self].reshape(n, k)


# ------------------------------------------------------------- normals

def estimate_normals(cloud: PointCloud, k: int = 16, index: SpatialIndex | None = None):
    """PCA normals over k-neighbourhoods (self included).

    Returns ``(cloud_with_normals, degenerate)`` where ``degenerate`` flags
    points whose neighbourhood covariance has rank < 2; those get +z.
    Orientation: nonnegative dot product with (point - centroid). When that
    product vanishes the largest-magnitude component is made positive.
    """
    n = len(cloud)
    if not 3 <= k <= n:
        raise PreconditionError(f"estimate_normals needs N >= k >= 3, got N={n}, k={k}")
    index = index or SpatialIndex(cloud.points)
    nb = index.self_query(k)
    local = cloud.points[nb]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    top = evals[:, 2]
    degenerate = evals[:, 1] <= 1e-12 * np.maximum(top, 1e-300)
    normals[degenerate] = (0.0, 0.0, 1.0)

    radial = cloud.points - cloud.points.mean(axis=0)
    dots = np.einsum("ij,ij->i", normals, radial)
    scale = np.linalg.norm(radial, axis=1)
    flat = np.abs(dots) <= 1e-9 * np.maximum(scale, 1e-300)
    lead = normals[np.arange(n), np.argmax(np.abs(normals), axis=1)]
    flip = np.where(flat, lead < 0, dots < 0) & ~degenerate
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(normals), degenerate


# ----------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(raw: bytes):
    if not raw.startswith(b"ply"):
        raise MalformedHeader("missing 'ply' magic", "byte 0")
    end = raw.find(b"end_header")
    if end < 0:
        raise MalformedHeader("no end_header line", f"byte {len(raw)}")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader("end_header not terminated by newline", f"byte {end}")
    body_start = nl + 1
    text = raw[:end].decode("ascii", errors="replace").replace("\r", "")

    fmt = None
    elements = []  # [name, count, [(prop, dtype)]]
    for lineno, line in enumerate(text.split("\n")[1:], start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        where = f"header line {lineno}"
        if parts[0] == "format":
            if len(parts) < 2:
                raise MalformedHeader("bad format line", where)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise MalformedHeader(f"bad element line {line!r}", where)
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element", where)
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], None))
                continue
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise MalformedHeader(f"bad property line {line!r}", where)
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise MalformedHeader(f"unexpected header keyword {parts[0]!r}", where)

    if fmt is None:
        raise MalformedHeader("no format line", "header")
    if fmt == "binary_big_endian":
        raise UnsupportedFormat("big-endian PLY is not supported", "header")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"unknown PLY format {fmt!r}", "header")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise MalformedHeader("no 'element vertex' declared", "header")
    vi = names.index("vertex")
    if fmt == "binary_little_endian":
        for e in elements[:vi]:
            if any(t is None for _, t in e[2]):
                raise UnsupportedFormat("list properties before the vertex element", "header")
    props = elements[vi][2]
    if any(t is None for _, t in props):
        raise UnsupportedFormat("list property on vertex element", "header")
    pnames = [p for p, _ in props]
    for axis in "xyz":
        if axis not in pnames:
            raise MalformedHeader(f"vertex element lacks property {axis}", "header")
        if dict(props)[axis] not in ("f4", "f8"):
            raise MalformedHeader(f"vertex property {axis} must be float", "header")
    return fmt, elements, vi, body_start


def read_ply_table(path) -> dict[str, np.ndarray]:
    """Read all scalar vertex properties of a PLY file into a dict of arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fmt, elements, vi, body_start = _parse_header(raw)
    count, props = elements[vi][1], elements[vi][2]

    if fmt == "binary_little_endian":
        skip = sum(e[1] * np.dtype([(p, "<" + t) for p, t in e[2]]).itemsize for e in elements[:vi])
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        start = body_start + skip
        need = count * dtype.itemsize
        if len(raw) - start < need:
            have = max(0, (len(raw) - start) // dtype.itemsize)
            raise TruncatedBody(f"expected {count} vertices, found {have}", f"byte {len(raw)}")
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        return {p: np.array(rec[p]) for p, _ in props}

    header_lines = raw[:body_start].count(b"\n")
    lines = raw[body_start:].decode("ascii", errors="replace").splitlines()
    skip = sum(e[1] for e in elements[:vi])
    rows = lines[skip:skip + count]
    if len(rows) < count:
        raise TruncatedBody(f"expected {count} vertices, found {len(rows)}",
                            f"line {header_lines + skip + len(rows) + 1}")
    table = []
    for j, line in enumerate(rows):
        tok = line.split()
        if len(tok) < len(props):
            raise TruncatedBody(f"vertex row has {len(tok)} of {len(props)} values",
                                f"line {header_lines + skip + j + 1}")
        table.append(tok[:len(props)])
    arr = np.array(table, dtype=np.float64).reshape(count, len(props))
    out = {}
    for col, (p, t) in enumerate(props):
        out[p] = arr[:, col].astype(t)
    return out


def load_ply(path) -> PointCloud:
    table = read_ply_table(path)
    # float32 payloads are widened after the cast so values are exact float32
    points = np.stack([table[a].astype(np.float64) for a in "xyz"], axis=1)
    normals = None
    if all(a in table for a in ("nx", "ny", "nz")):
        normals = np.stack([table[a].astype(np.float64) for a in ("nx", "ny", "nz")], axis=1)
    labels = table["label"].astype(np.int64) if "label" in table else None
    return PointCloud(points, normals, labels)


def load_ply_scalar(path, name="score"):
    table = read_ply_table(path)
    if name not in table:
        raise MalformedHeader(f"vertex property {name!r} not present", "header")
    return table[name].astype(np.float64)


def _score_colors(scalar):
    lo, hi = float(scalar.min()), float(scalar.max())
    t = (scalar - lo) / (hi - lo) if hi > lo else np.zeros_like(scalar)
    red = np.rint(255 * t)
    blue = np.rint(255 * (1 - t))
    return np.stack([red, np.zeros_like(red), blue], axis=1)


def save_ply(cloud: PointCloud, path, scalar=None) -> None:
    """Write an ASCII PLY; coordinates and scalars go through float32."""
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    cols, fmts = [], []

    def add(names, values, kind, fmt):
        header.extend(f"property {kind} {n}" for n in names)
        cols.append(np.asarray(values, dtype=np.float64).reshape(len(cloud), -1))
        fmts.extend([fmt] * len(names))

    as32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    add("xyz", as32(cloud.points), "float", "%.9g")
    if cloud.normals is not None:
        add(("nx", "ny", "nz"), as32(cloud.normals), "float", "%.9g")
    if cloud.labels is not None:
        add(("label",), cloud.labels, "uchar", "%d")
    if scalar is not None:
        s = np.asarray(scalar, dtype=np.float64)
        if s.shape != (len(cloud),) or not np.isfinite(s).all():
            raise PreconditionError("scalar must hold one finite value per point")
        add(("score",), as32(s), "float", "%.9g")
        add(("red", "green", "blue"), _score_colors(s), "uchar", "%d")
    header.append("end_header")

    buf = io.StringIO()
    buf.write("\n".join(header) + "\n")
    np.savetxt(buf, np.hstack(cols), fmt=fmts)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(buf.getvalue())


def write_labels(path, labels) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        vals = [int(line) for line in fh if line.strip()]
    lab = np.array(vals, dtype=np.int64)
    if not np.isin(lab, (0, 1)).all():
        raise PreconditionError(f"{os.fspath(path)}: labels must be 0 or 1")
    return lab
