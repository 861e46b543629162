"""Group-level contrastive anomaly detection for high-resolution point clouds."""
from .pccore import PointCloud, SpatialIndex, load_ply, save_ply, normalize, knn, estimate_normals
from .pipeline import ModelBundle, TrainConfig, infer, train

__version__ = "0.1.0"

__all__ = [
    "PointCloud", "SpatialIndex", "load_ply", "save_ply", "normalize", "knn",
    "estimate_normals", "ModelBundle", "TrainConfig", "infer", "train",
]
