"""Synthetic few-shot benchmark: quasi-uniform shapes with injected defects."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import kvfile
from .descriptors import fpfh_field
from .errors import PreconditionError
from .pccore import PointCloud, normalize, read_labels, save_ply, write_labels, load_ply
from .synthesis import RATIO_RANGE, SIGMA2_RANGE, AnomalySpec, generate_fake_anomaly

SHAPES = ("sphere", "torus", "ellipsoid")
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from a tuple of nonnegative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def fibonacci_sphere(n, phase=0.0):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    theta = GOLDEN_ANGLE * np.arange(n) + phase
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def torus_points(n, phase=0.0, major=1.0, minor=0.4):
    """Area-weighted quasi-uniform torus samples (tube angle by inverse CDF)."""
    u = 2 * np.pi * np.mod(np.arange(n) * (np.sqrt(5.0) - 1.0) / 2.0 + phase / (2 * np.pi), 1.0)
    grid = np.linspace(0.0, 2 * np.pi, 4097)
    cdf = (major * grid + minor * np.sin(grid)) / (2 * np.pi * major)
    v = np.interp((np.arange(n) + 0.5) / n, cdf, grid)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def make_shape(shape: str, n: int, seed=0, jitter=0.05) -> PointCloud:
    """Normalized quasi-uniform samples of ``shape``.

    Each seed rotates the sampling pattern about z and adds Gaussian jitter
    of ``jitter`` times the mean point spacing, so clouds of one shape are
    pre-aligned but not identical.
    """
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0.0, 2 * np.pi))
    if shape == "sphere":
        pts = fibonacci_sphere(n, phase)
        area = 4 * np.pi
    elif shape == "ellipsoid":
        pts = fibonacci_sphere(n, phase) * np.array([1.0, 0.75, 0.5])
        area = 4 * np.pi * 0.7
    elif shape == "torus":
        pts = torus_points(n, phase)
        area = 4 * np.pi ** 2 * 0.4
    else:
        raise PreconditionError(f"unknown shape {shape!r}; choose from {SHAPES}")
    spacing = np.sqrt(area / n)
    pts = pts + rng.normal(0.0, jitter * spacing, size=pts.shape)
    cloud, _ = normalize(PointCloud(pts))
    return cloud


def bumped_sphere(n, seed=0, height=0.12, width=0.15, jitter=0.0):
    """Fibonacci sphere with one Gaussian radial bump; returns ``(cloud, mask)``.

    The mask covers points within two bump widths (angular) of the bump axis.
    """
    rng = np.random.default_rng(seed)
    pts = fibonacci_sphere(n, float(rng.uniform(0, 2 * np.pi)))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.arccos(np.clip(pts @ axis, -1.0, 1.0))
    pts = pts * (1.0 + height * np.exp(-ang ** 2 / (2 * width ** 2)))[:, None]
    if jitter:
        pts = pts + rng.normal(0.0, jitter * np.sqrt(4 * np.pi / n), size=pts.shape)
    cloud, _ = normalize(PointCloud(pts))
    return cloud, (ang < 2 * width).astype(np.int64)


@dataclass(frozen=True)
class BenchmarkConfig:
    shape: str = "sphere"
    n_points: int = 30000
    n_train: int = 4
    n_test: int = 20
    n_defective: int = -1          # -1: half of n_test
    ratio_min: float = RATIO_RANGE[0]
    ratio_max: float = RATIO_RANGE[1]
    sigma2_min: float = SIGMA2_RANGE[0]
    sigma2_max: float = SIGMA2_RANGE[1]
    jitter: float = 0.05
    group_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise PreconditionError(f"unknown shape {self.shape!r}")
        if self.n_points < 4 * self.group_size:
            raise PreconditionError("n_points must be at least 4 x group_size")
        if self.n_test < 2 or not 1 <= self.defective_count <= self.n_test - 1:
            raise PreconditionError("test split needs both good and defective clouds")
        if self.n_train < 1:
            raise PreconditionError("need at least one training cloud")

    @property
    def defective_count(self):
        return self.n_test // 2 if self.n_defective < 0 else self.n_defective

    @classmethod
    def from_file(cls, path, **overrides):
        items = kvfile.read(path)
        items.update({k: str(v) for k, v in overrides.items()})
        return kvfile.to_dataclass(cls, items)


@dataclass(frozen=True, eq=False)
class BenchSample:
    name: str
    cloud: PointCloud
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class Benchmark:
    category: str
    train: list
    test: list     # of BenchSample


def generate_benchmark(config: BenchmarkConfig) -> Benchmark:
    """Build the dataset in memory; ``synth_benchmark`` writes the same data to disk."""
    s = config.seed
    train = [make_shape(config.shape, config.n_points, derive_seed(s, 1, i), config.jitter)
             for i in range(config.n_train)]
    defective = set(np.random.default_rng(derive_seed(s, 2)).permutation(config.n_test)[:config.defective_count])
    test = []
    for i in range(config.n_test):
        cloud = make_shape(config.shape, config.n_points, derive_seed(s, 3, i), config.jitter)
        mask = np.zeros(len(cloud), dtype=np.int64)
        if i in defective:
            cloud, index, field = fpfh_field(cloud)
            spec = AnomalySpec.random(derive_seed(s, 4, i), (config.ratio_min, config.ratio_max),
                                      (config.sigma2_min, config.sigma2_max))
            labeled = generate_fake_anomaly(cloud, field, spec, index=index)
            cloud, mask = PointCloud(labeled.cloud.points), labeled.mask
        test.append(BenchSample(f"test_{i:03d}", cloud, mask))
    return Benchmark(config.shape, train, test)


def synth_benchmark(config: BenchmarkConfig, outdir) -> str:
    """Write train/*.ply, test/*.ply, gt/*.txt, manifest.csv and benchmark.kv under ``outdir``."""
    bench = generate_benchmark(config)
    for sub in ("train", "test", "gt"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    rows = []
    for i, cloud in enumerate(bench.train):
        rel = f"train/train_{i:03d}.ply"
        save_ply(cloud, os.path.join(outdir, rel))
        rows.append((rel, "train", "good", ""))
    for sample in bench.test:
        rel = f"test/{sample.name}.ply"
        gt = f"gt/{sample.name}.txt"
        save_ply(sample.cloud, os.path.join(outdir, rel))
        write_labels(os.path.join(outdir, gt), sample.mask)
        rows.append((rel, "test", "defect" if sample.mask.any() else "good", gt))
    with open(os.path.join(outdir, "manifest.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("file", "split", "class", "gt"))
        w.writerows(rows)
    kvfile.write(os.path.join(outdir, "benchmark.kv"), kvfile.from_dataclass(config))
    return outdir


def read_manifest(datadir):
    with open(os.path.join(datadir, "manifest.csv"), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_benchmark(datadir) -> Benchmark:
    manifest = read_manifest(datadir)
    category = "unknown"
    meta = os.path.join(datadir, "benchmark.kv")
    if os.path.exists(meta):
        category = kvfile.read(meta).get("shape", category)
    train, test = [], []
    for row in manifest:
        cloud = load_ply(os.path.join(datadir, row["file"]))
        if row["split"] == "train":
            train.append(cloud)
        else:
            mask = read_labels(os.path.join(datadir, row["gt"]))
            name = os.path.splitext(os.path.basename(row["file"]))[0]
            test.append(BenchSample(name, cloud, mask))
    return Benchmark(category, train, test)
