"""Volumetric brain extraction from 3D ultrasound-like volumes.

Trainable encoder-decoder segmentation networks on a from-scratch
reverse-mode autodiff engine, synthetic phantom data with ground-truth
masks, similarity-transform annotation geometry, an ellipsoid baseline,
and a full distance/overlap/symmetry evaluation harness with a CLI.
"""

from .ellipsoid import Ellipsoid, fit_ellipsoid, rasterize_ellipsoid
from .estimators import BrainExtractor, EllipsoidExtractor
from .metrics import (
    MetricsReport,
    centroid_ed,
    dsc,
    hausdorff,
    pearson_r,
    symmetry_coefficient,
    threshold_mask,
    welch_t,
)
from .network import Network, NetworkSpec, build_network, load_checkpoint, param_count, save_checkpoint
from .phantom import PhantomSpec, generate_phantom, make_atlas_mask, annotate_scan
from .transforms import (
    SimilarityTransform,
    apply_similarity,
    compose_similarity,
    euler_from_rotation,
    invert_similarity,
    rotation_from_euler,
)
from .volume import (
    Grid,
    Mask,
    Volume,
    center_crop,
    load_mask,
    load_volume,
    normalize_intensity,
    resample_isotropic,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BrainExtractor",
    "EllipsoidExtractor",
    "Ellipsoid",
    "Grid",
    "Mask",
    "MetricsReport",
    "Network",
    "NetworkSpec",
    "PhantomSpec",
    "SimilarityTransform",
    "Volume",
    "annotate_scan",
    "apply_similarity",
    "build_network",
    "center_crop",
    "centroid_ed",
    "compose_similarity",
    "dsc",
    "euler_from_rotation",
    "fit_ellipsoid",
    "generate_phantom",
    "hausdorff",
    "invert_similarity",
    "load_checkpoint",
    "load_mask",
    "load_volume",
    "make_atlas_mask",
    "normalize_intensity",
    "param_count",
    "pearson_r",
    "rasterize_ellipsoid",
    "resample_isotropic",
    "rotation_from_euler",
    "save_checkpoint",
    "save_volume",
    "symmetry_coefficient",
    "threshold_mask",
    "welch_t",
]
