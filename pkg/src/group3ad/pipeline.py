"""Two-phase encoder training (uniformity, then alignment) and inference."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kvfile
from .benchmark import derive_seed
from .contrastive import (
    Clustering,
    alignment_loss,
    center_distances,
    elbow_clustering,
    kmeans,
    uniformity_loss,
)
from .descriptors import DEFAULT_K, fpfh_field
from .encoder import (
    BASE_DIM,
    EncoderParams,
    FeatureMatrix,
    GroupSet,
    Standardizer,
    base_descriptors,
    extract_groups,
    head_backward,
    head_forward,
)
from .errors import DegenerateCenters, DivergedLoss, EmptyBank, EmptyInput, NotNormalized, PreconditionError
from .membank import MemoryBank, build_bank, interpolate_point_scores, score_groups
from .pccore import PointCloud, is_normalized
from .sampling import CenterSelection, agcs, fps
from .synthesis import generate_fake_anomaly

LOGGER = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "phase", "cloud", "K", "uniformity", "alignment", "min_dist", "mean_max_dist", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-2
    n_groups: int = 4096
    group_size: int = 128
    temperature: float = 1.0
    k_min: int = 2
    k_max: int = 20
    seed: int = 0
    freeze_k: bool = False
    alpha: float = 0.2
    hidden: int = 64
    dim: int = 32
    fpfh_k: int = DEFAULT_K
    memory_size: int = 10000
    k_interp: int = 3
    grad_clip: float = 10.0
    kmeans_max_iter: int = 100
    contrastive: bool = True
    phase2_synthesis: bool = False

    def __post_init__(self):
        if self.epochs < 2 or self.epochs % 2:
            raise PreconditionError(f"epochs must be even and >= 2, got {self.epochs}")
        if not self.lr > 0:
            raise PreconditionError("learning rate must be positive")
        if self.n_groups < 1 or self.group_size < 1:
            raise PreconditionError("n_groups and group_size must be >= 1")

    def to_kv(self):
        return kvfile.from_dataclass(self)

    @classmethod
    def from_kv(cls, items, base=None):
        return kvfile.to_dataclass(cls, items, base)


@dataclass(frozen=True, eq=False)
class ModelBundle:
    params: EncoderParams
    standardizer: Standardizer
    bank: MemoryBank | None
    config: TrainConfig
    history: list = dc_field(default_factory=list)

    def save(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        self.params.save(os.path.join(outdir, "params.bin"))
        if self.bank is not None:
            self.bank.save(os.path.join(outdir, "bank_feat.bin"), os.path.join(outdir, "bank_coord.bin"))
        kvfile.write(os.path.join(outdir, "config.kv"), self.config.to_kv())
        fmt = lambda a: ",".join(repr(float(v)) for v in a)
        kvfile.write(os.path.join(outdir, "stats.kv"),
                     {"dim": len(self.standardizer.mean), "mean": fmt(self.standardizer.mean),
                      "std": fmt(self.standardizer.std)})
        write_log(os.path.join(outdir, "train_log.csv"), self.history)

    @classmethod
    def load(cls, indir):
        params = EncoderParams.load(os.path.join(indir, "params.bin"))
        feat, coord = os.path.join(indir, "bank_feat.bin"), os.path.join(indir, "bank_coord.bin")
        bank = MemoryBank.load(feat, coord) if os.path.exists(feat) else None
        config = TrainConfig.from_kv(kvfile.read(os.path.join(indir, "config.kv")))
        stats = kvfile.read(os.path.join(indir, "stats.kv"))
        parse = lambda s: np.array([float(v) for v in s.split(",")])
        std = Standardizer(parse(stats["mean"]), parse(stats["std"]))
        return cls(params, std, bank, config)


@dataclass(eq=False)
class _Prepared:
    cloud: PointCloud
    field: object
    index: object
    groups: GroupSet
    base: np.ndarray


def _prepare(cloud, config, seed, index=None, variation=True):
    cloud, index, field = fpfh_field(cloud, config.fpfh_k, index, variation)
    n = min(config.n_groups, len(cloud))
    centers = fps(cloud, n, seed)
    groups = extract_groups(cloud, centers, config.group_size, index)
    return _Prepared(cloud, field, index, groups, base_descriptors(groups, cloud, field))


def _cluster(rows, config, seed, frozen_k):
    if frozen_k is not None:
        return kmeans(rows, frozen_k, seed, config.kmeans_max_iter)
    k_max = min(config.k_max, len(rows) - 1)
    _, clustering, _ = elbow_clustering(rows, config.k_min, k_max, seed, config.kmeans_max_iter)
    return clustering


def _min_center_distance(clustering):
    if clustering.K < 2:
        return float("nan")
    d = center_distances(clustering.centers)
    return float(d[np.triu_indices(clustering.K, 1)].min())


def _drop_rows(rows, clustering, keep):
    _, assignment = np.unique(clustering.assignment[keep], return_inverse=True)
    return rows[keep], Clustering.from_assignment(rows[keep], assignment)


def train(dataset, config: TrainConfig = TrainConfig()) -> ModelBundle:
    """Train the encoder head in two phases, then fill the memory banks.

    Phase 1 (first half of the epochs) takes one descent step per cloud on
    the uniformity loss of a freshly perturbed copy; phase 2 steps on the
    alignment loss of the clean cloud. Banks are built from the final
    parameters.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyInput("training set is empty")
    for i, cloud in enumerate(dataset):
        if not is_normalized(cloud):
            raise NotNormalized(f"training cloud {i} is not normalized")

    s = config.seed
    prepared = [_prepare(c, config, derive_seed(s, 3, i)) for i, c in enumerate(dataset)]
    standardizer = Standardizer.fit(np.vstack([p.base for p in prepared]))
    params = EncoderParams.init(BASE_DIM, config.hidden, config.dim, derive_seed(s, 1))

    history = []
    frozen_k = {}
    half = config.epochs // 2
    epochs = range(1, config.epochs + 1) if config.contrastive else ()
    for epoch in epochs:
        phase = 1 if epoch <= half else 2
        for ci, prep in enumerate(prepared):
            mask = None
            if phase == 1 or config.phase2_synthesis:
                labeled = generate_fake_anomaly(prep.cloud, prep.field, "random",
                                                seed=derive_seed(s, 2, epoch, ci), index=prep.index)
                work = _prepare(PointCloud(labeled.cloud.points), config, derive_seed(s, 4, epoch, ci),
                                    variation=False)
                base, mask = work.base, labeled.mask[work.groups.centers].astype(bool)
            else:
                base = prep.base

            rows, cache = head_forward(standardizer(base), params)
            clustering = _cluster(rows, config, derive_seed(s, 5, epoch, ci), frozen_k.get(ci))
            if config.freeze_k and ci not in frozen_k:
                frozen_k[ci] = clustering.K

            if phase == 1:
                loss = uniformity_loss(clustering)
                align = alignment_loss(rows, clustering, config.temperature)
                unif_value = loss.value
            else:
                if mask is not None and mask.any() and (~mask).sum() >= 2:
                    loss = alignment_loss(*_drop_rows(rows, clustering, ~mask), config.temperature)
                    grad_rows = np.zeros_like(rows)
                    grad_rows[~mask] = loss.grad_rows
                    loss = type(loss)(loss.value, grad_rows, loss.pairs, loss.distances)
                else:
                    loss = alignment_loss(rows, clustering, config.temperature)
                align = loss
                try:
                    unif_value = uniformity_loss(clustering).value
                except (DegenerateCenters, PreconditionError):
                    unif_value = float("inf")

            if not math.isfinite(loss.value):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}, cloud {ci}")
            grad = head_backward(cache, params, loss.grad_rows).flat()
            gnorm = float(np.linalg.norm(grad))
            if not math.isfinite(gnorm):
                raise DivergedLoss(f"non-finite gradient at epoch {epoch}, cloud {ci}")
            if gnorm > config.grad_clip:
                grad *= config.grad_clip / gnorm
            params = params.unflat(params.flat() - config.lr * grad)

            record = {
                "epoch": epoch, "phase": phase, "cloud": ci, "K": clustering.K,
                "uniformity": unif_value, "alignment": align.value,
                "min_dist": _min_center_distance(clustering),
                "mean_max_dist": float(np.mean(align.distances)), "grad_norm": gnorm,
            }
            history.append(record)
            LOGGER.info("epoch %d phase %d cloud %d K=%d loss=%.6g", epoch, phase, ci, clustering.K, loss.value)

    rows, coords = [], []
    for prep in prepared:
        feats, _ = head_forward(standardizer(prep.base), params)
        rows.append(feats)
        coords.append(prep.cloud.points[prep.groups.centers])
    bank = build_bank(np.vstack(rows), np.vstack(coords), config.memory_size)
    return ModelBundle(params, standardizer, bank, config, history)


@dataclass(frozen=True, eq=False)
class InferenceResult:
    point_scores: np.ndarray
    object_score: float
    selection: CenterSelection
    group_scores: np.ndarray
    features: FeatureMatrix


def infer(bundle: ModelBundle, cloud: PointCloud, alpha: float | None = None, seed=None) -> InferenceResult:
    """Score every point of ``cloud``; the object score is the maximum point score.

    The cloud must be in the same normalized frame as the training data. Its
    extent is not checked, because a defect may push points past the unit
    box of the clean part it was made from.
    """
    if bundle.bank is None:
        raise EmptyBank("bundle has no memory bank")
    cfg = bundle.config
    alpha = cfg.alpha if alpha is None else alpha
    seed = derive_seed(cfg.seed, 6) if seed is None else seed
    cloud, index, field = fpfh_field(PointCloud(cloud.points, cloud.normals), cfg.fpfh_k)
    selection = agcs(cloud, field, min(cfg.n_groups, len(cloud)), alpha, seed)
    groups = extract_groups(cloud, selection.indices, cfg.group_size, index)
    rows, _ = head_forward(bundle.standardizer(base_descriptors(groups, cloud, field)), bundle.params)
    feats = FeatureMatrix(rows, cloud.points[groups.centers])
    scored = score_groups(bundle.bank, feats, feats.group_centers)
    points = interpolate_point_scores(feats.group_centers, scored.score, cloud, cfg.k_interp)
    return InferenceResult(points, float(points.max()), selection, scored.score, feats)


def epoch_summary(history):
    """Average the per-cloud records of each epoch."""
    out = {}
    for rec in history:
        out.setdefault(rec["epoch"], []).append(rec)
    summary = []
    for epoch, recs in sorted(out.items()):
        row = {"epoch": epoch, "phase": recs[0]["phase"]}
        for key in ("K", "uniformity", "alignment", "min_dist", "mean_max_dist", "grad_norm"):
            row[key] = float(np.mean([r[key] for r in recs]))
        summary.append(row)
    return summary


def write_log(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
