from .cloud import (
    NeighborGraph,
    PointCloud,
    ReceptiveField,
    as_points,
    brute_force_knn,
    build_knn_graph,
    center_receptive_field,
    farthest_point_sample,
    normalize_cloud,
    receptive_field,
    scaling_factor,
)
from .io import load_cloud, load_scan, save_cloud, save_scan
from .scan import OrganizedScan
from .scenes import SceneConfig, generate_scene, synth_shape_bank

__all__ = [
    "NeighborGraph",
    "OrganizedScan",
    "PointCloud",
    "ReceptiveField",
    "SceneConfig",
    "as_points",
    "brute_force_knn",
    "build_knn_graph",
    "center_receptive_field",
    "farthest_point_sample",
    "generate_scene",
    "load_cloud",
    "load_scan",
    "normalize_cloud",
    "receptive_field",
    "save_cloud",
    "save_scan",
    "scaling_factor",
    "synth_shape_bank",
]
