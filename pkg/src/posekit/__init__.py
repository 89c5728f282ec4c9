"""posekit: category-level 6D pose estimation building blocks on point clouds.

Shift/scale-invariant 3D graph convolution, a decoupled two-vector rotation
representation with symmetry canonicalization, box-cage deformation
augmentation, pose losses and metrics, synthetic data generation, and a
small CPU trainer, all on numpy with optional numba-compiled kernels
(select with POSEKIT_BACKEND=numba|numpy|auto).
"""

from .core_geom import (
    OrientedBox,
    PointCloud,
    PoseRecord,
    SymmetrySpec,
    geodesic_rotation_distance,
    random_rotation,
    rotation_about_axis,
)
from .decoupled_rotation import (
    DecoupledRotation,
    canonicalize_rotation,
    rotation_from_vectors,
    symmetry_aware_rotation_error,
    symmetry_group,
    vectors_from_rotation,
)
from .deform import BoxCage, DeformationSpec, apply_deformation, deform_in_scene
from .metrics import EvalOptions, EvalReport, evaluate, iou_3d, pose_accuracy

__version__ = "0.1.0"

__all__ = [
    "OrientedBox",
    "PointCloud",
    "PoseRecord",
    "SymmetrySpec",
    "geodesic_rotation_distance",
    "random_rotation",
    "rotation_about_axis",
    "DecoupledRotation",
    "canonicalize_rotation",
    "rotation_from_vectors",
    "symmetry_aware_rotation_error",
    "symmetry_group",
    "vectors_from_rotation",
    "BoxCage",
    "DeformationSpec",
    "apply_deformation",
    "deform_in_scene",
    "EvalOptions",
    "EvalReport",
    "evaluate",
    "iou_3d",
    "pose_accuracy",
    "__version__",
]
