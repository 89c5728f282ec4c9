"""Two-vector rotation representation with symmetry handling.

A rotation R is represented by the pair v1 = R e_z (the up / symmetry axis,
"green" vector) and v2 = R e_x (the in-plane reference, "red" vector). The
split lets the two directions be supervised with different weights, and lets
the in-plane term be switched off entirely for circularly symmetric shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_geom import (
    EX,
    EZ,
    SymmetrySpec,
    as_vec3,
    check_rotation,
    geodesic_rotation_distance,
    rotation_about_axis,
)
from .errors import DegenerateVectors, InvalidParameter, UnsupportedForFiniteGroup

PARALLEL_TOL = 1e-3  # radians; minimum angle between the two raw vectors


@dataclass(frozen=True)
class DecoupledRotation:
    """An orthonormalized (v1, v2) pair; v1 is normalized first and v2 is
    Gram-Schmidt projected against it, so |<v1, v2>| <= 1e-9 always holds."""

    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        a = as_vec3(self.v1)
        n1 = np.linalg.norm(a)
        if n1 < 1e-12:
            raise DegenerateVectors("v1 has (near-)zero norm")
        a = a / n1
        b = as_vec3(self.v2)
        r = b - (b @ a) * a
        nr = np.linalg.norm(r)
        if nr < 1e-9:
            raise DegenerateVectors("v2 is parallel to v1 or zero")
        object.__setattr__(self, "v1", a)
        object.__setattr__(self, "v2", r / nr)


@dataclass(frozen=True)
class RotationLossConfig:
    lambda_r: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lambda_r) or self.lambda_r < 0.0:
            raise InvalidParameter(f"lambda_r must be >= 0, got {self.lambda_r}")

    @classmethod
    def for_symmetry(cls, sym: SymmetrySpec, lambda_r: float = 1.0) -> "RotationLossConfig":
        """lambda_r is forced to exactly 0 for circular symmetry."""
        return cls(0.0 if sym.kind == "circular" else lambda_r)


def vectors_from_rotation(rotation) -> DecoupledRotation:
    R = check_rotation(rotation)
    return DecoupledRotation(R[:, 2], R[:, 0])


def rotation_from_vectors(v1_raw, v2_raw) -> np.ndarray:
    """Rebuild the rotation whose e_z image is v1 and e_x image is v2.

    a = normalize(v1_raw), b = Gram-Schmidt of v2_raw against a, c = a x b;
    the result has columns [b, c, a]. Raises DegenerateVectors when v1 is
    (near-)zero or the vectors are within ~1e-3 rad of parallel.
    """
    v1 = as_vec3(v1_raw)
    v2 = as_vec3(v2_raw)
    n1 = np.linalg.norm(v1)
    if n1 <= 1e-6:
        raise DegenerateVectors(f"v1 norm {n1:.3e} too small")
    a = v1 / n1
    n2 = np.linalg.norm(v2)
    if n2 <= 1e-12:
        raise DegenerateVectors("v2 is zero")
    r = v2 - (v2 @ a) * a
    nr = np.linalg.norm(r)
    # ||rejection|| / ||v2|| = sin(angle between v1 and v2)
    if nr / n2 <= PARALLEL_TOL:
        raise DegenerateVectors("v1 and v2 are (near-)parallel")
    b = r / nr
    c = np.cross(a, b)
    return np.column_stack([b, c, a])


def rotation_vector_loss(pred_v1, pred_v2, gt: DecoupledRotation,
                         config: RotationLossConfig = RotationLossConfig()) -> float:
    """Similarity L = cos(pred_v1, v1) + lambda_r * cos(pred_v2, v2).

    Larger is better; the trained objective is (1 + lambda_r) - L, see
    rotation_loss_objective.
    """
    value, _, _ = rotation_loss_objective(pred_v1, pred_v2, gt, config)
    return (1.0 + config.lambda_r) - value


def rotation_loss_objective(pred_v1, pred_v2, gt: DecoupledRotation,
                            config: RotationLossConfig = RotationLossConfig()):
    """Minimized form (1 + lambda_r) - L with analytic gradients.

    Returns (value, grad_v1, grad_v2) where the gradients are taken w.r.t.
    the raw (unnormalized) predicted vectors.
    """
    p1 = as_vec3(pred_v1)
    p2 = as_vec3(pred_v2)
    c1, g1 = _cosine_and_grad(p1, gt.v1)
    value = (1.0 + config.lambda_r) - c1
    if config.lambda_r != 0.0:
        c2, g2 = _cosine_and_grad(p2, gt.v2)
        value -= config.lambda_r * c2
        grad2 = -config.lambda_r * g2
    else:
        grad2 = np.zeros(3)
    return float(value), -g1, grad2


def _cosine_and_grad(p, target_unit):
    n = np.linalg.norm(p)
    if n < 1e-12:
        raise DegenerateVectors("predicted vector has (near-)zero norm")
    u = p / n
    c = float(u @ target_unit)
    grad = (target_unit - c * u) / n
    return c, grad


def symmetry_group(rotation, sym: SymmetrySpec) -> list[np.ndarray]:
    """The finite appearance-equivalence orbit of a rotation.

    n_fold symmetry composes spins about the canonical symmetry axis on the
    right: members are R @ rot(axis, k * 360/n), k = 0..n-1.
    """
    R = check_rotation(rotation)
    if sym.kind == "none":
        return [R.copy()]
    if sym.kind == "circular":
        raise UnsupportedForFiniteGroup("circular symmetry has no finite group")
    return [
        R @ rotation_about_axis(sym.axis, k * 360.0 / sym.n) for k in range(sym.n)
    ]


def canonicalize_rotation(rotation, sym: SymmetrySpec) -> np.ndarray:
    """Map a rotation to a unique representative of its symmetry orbit.

    n_fold: the orbit member closest (geodesically) to the identity, ties
    broken by the smallest group index. circular: the minimal rotation that
    takes the symmetry axis to its image, discarding spin about the axis.
    none: the input itself.
    """
    R = check_rotation(rotation)
    if sym.kind == "none":
        return R.copy()
    if sym.kind == "circular":
        return _min_rotation_between(sym.axis, R @ sym.axis)
    best = None
    best_d = np.inf
    for member in symmetry_group(R, sym):
        d = geodesic_rotation_distance(member, np.eye(3))
        if d < best_d:
            best_d = d
            best = member
    return best


def symmetry_aware_rotation_error(rot_pred, rot_gt, sym: SymmetrySpec) -> float:
    """Rotation error in degrees, minimized over the ground-truth symmetry.

    circular symmetry compares only the symmetry-axis images.
    """
    P = check_rotation(rot_pred)
    G = check_rotation(rot_gt)
    if sym.kind == "none":
        return geodesic_rotation_distance(P, G)
    if sym.kind == "circular":
        c = float((P @ sym.axis) @ (G @ sym.axis))
        c = min(1.0, max(-1.0, c))
        return float(np.degrees(np.arccos(c)))
    return min(geodesic_rotation_distance(P, member) for member in symmetry_group(G, sym))


def _min_rotation_between(a_unit, b_unit) -> np.ndarray:
    """Smallest-angle rotation taking unit vector a onto unit vector b."""
    a = as_vec3(a_unit)
    b = as_vec3(b_unit)
    d = float(a @ b)
    if d > 1.0 - 1e-12:
        return np.eye(3)
    if d < -1.0 + 1e-12:
        # 180 degrees: the axis is any perpendicular; pick deterministically
        helper = EX if abs(a @ EX) < 0.9 else EZ
        axis = np.cross(a, helper)
        return rotation_about_axis(axis, 180.0)
    axis = np.cross(a, b)
    angle = np.degrees(np.arccos(min(1.0, max(-1.0, d))))
    return rotation_about_axis(axis, angle)
