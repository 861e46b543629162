"""FPFH-guided fake anomalies: Gaussian noise on the neighbourhood of the most salient point."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .descriptors import FpfhField
from .errors import NotNormalized, PreconditionError
from .pccore import PointCloud, SpatialIndex, knn, max_extent

RATIO_RANGE = (0.01, 0.10)
SIGMA2_RANGE = (0.01, 0.05)


@dataclass(frozen=True)
class AnomalySpec:
    """Region size as a fraction of N, per-coordinate noise variance, RNG seed.

    Construction only requires ``0 < ratio <= 1`` and ``sigma2 >= 0`` so
    limit cases can be expressed; ``random`` draws inside the usual
    training ranges, reported by ``in_training_range``.
    """

    ratio: float
    sigma2: float
    seed: int = 0
    center_index: int | None = None

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise PreconditionError(f"ratio must lie in (0, 1], got {self.ratio}")
        if not (self.sigma2 >= 0.0 and math.isfinite(self.sigma2)):
            raise PreconditionError(f"sigma2 must be finite and >= 0, got {self.sigma2}")

    @classmethod
    def random(cls, seed, ratio_range=RATIO_RANGE, sigma2_range=SIGMA2_RANGE):
        rng = np.random.default_rng(seed)
        ratio = float(rng.uniform(*ratio_range))
        sigma2 = float(rng.uniform(*sigma2_range))
        noise_seed = int(rng.integers(2**63))
        return cls(ratio, sigma2, noise_seed)

    @property
    def in_training_range(self):
        return (RATIO_RANGE[0] <= self.ratio <= RATIO_RANGE[1]
                and SIGMA2_RANGE[0] <= self.sigma2 <= SIGMA2_RANGE[1])

    def region_size(self, n_points):
        # tolerance keeps e.g. 0.05 * 1000 from rounding up to 51
        return max(1, math.ceil(self.ratio * n_points - 1e-9))


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    cloud: PointCloud
    mask: np.ndarray
    spec: AnomalySpec


def generate_fake_anomaly(cloud: PointCloud, field: FpfhField, spec="random",
                          seed=None, index: SpatialIndex | None = None) -> LabeledCloud:
    """Replace the ceil(r*N) points nearest the max-variation point with noisy copies.

    ``spec="random"`` draws ratio and sigma2 uniformly from their training
    ranges using ``seed``. The returned cloud carries the mask as labels and
    no normals (perturbed normals would be stale).
    """
    if abs(max_extent(cloud.points) - 1.0) > 1e-6:
        raise NotNormalized("fake anomalies are defined on normalized clouds (max extent 1)")
    if field.variation is None:
        raise PreconditionError("FpfhField has no variation scores")
    if isinstance(spec, str):
        if spec != "random":
            raise PreconditionError(f"unknown anomaly spec {spec!r}")
        spec = AnomalySpec.random(seed)

    n = len(cloud)
    center = int(np.argmax(field.variation))
    index = index or SpatialIndex(cloud.points)
    local = knn(index, cloud.points[center], spec.region_size(n))

    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, math.sqrt(spec.sigma2), size=(len(local), 3))
    pts = np.array(cloud.points)
    pts[local] = pts[local] + noise
    mask = np.zeros(n, dtype=np.int64)
    mask[local] = 1
    out = PointCloud(pts, None, mask)
    return LabeledCloud(out, out.labels, replace(spec, center_index=center))
