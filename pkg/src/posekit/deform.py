"""Box-cage shape deformation for online data augmentation.

Deformations act in the canonical object frame inside an axis-aligned box
cage. A scene cloud is deformed by conjugation with the pose: object points
are moved to canonical coordinates, warped, and moved back; background
points pass through bitwise untouched.

The taper squeezes or widens the x or z coordinate linearly along the cage
height, which here (and only here) is the y axis: the factor is 1 at the
top surface and n at the bottom, so straight vertical edges stay straight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_geom import PointCloud, PoseRecord, as_vec3
from .errors import InvalidParameter, LabelRequired

FACTOR_RANGE = (0.5, 2.0)

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class BoxCage:
    """Axis-aligned deformation cage in the canonical frame (full extents)."""

    extents: np.ndarray

    def __post_init__(self):
        ext = as_vec3(self.extents)
        if np.any(ext <= 0.0):
            raise InvalidParameter(f"cage extents must be positive, got {ext.tolist()}")
        object.__setattr__(self, "extents", ext)


@dataclass(frozen=True)
class DeformationSpec:
    """Per-axis scale factors plus an optional taper about x or z.

    All factors must lie inside FACTOR_RANGE. taper_axis None disables the
    taper; the taper height axis is fixed to y.
    """

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    taper_axis: str | None = None
    taper_factor: float = 1.0

    def __post_init__(self):
        s = as_vec3(self.scale)
        lo, hi = FACTOR_RANGE
        if np.any(s < lo) or np.any(s > hi):
            raise InvalidParameter(
                f"scale factors must lie in [{lo}, {hi}], got {s.tolist()}"
            )
        object.__setattr__(self, "scale", s)
        if self.taper_axis is not None:
            if self.taper_axis not in ("x", "z"):
                raise InvalidParameter("taper_axis must be 'x', 'z' or None")
            t = float(self.taper_factor)
            if not (lo <= t <= hi):
                raise InvalidParameter(
                    f"taper_factor must lie in [{lo}, {hi}], got {t}"
                )

    def to_dict(self) -> dict:
        return {
            "scale": [float(v) for v in self.scale],
            "taper_axis": self.taper_axis,
            "taper_factor": float(self.taper_factor) if self.taper_axis else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationSpec":
        if not isinstance(d, dict):
            raise InvalidParameter("deformation must be a JSON object")
        axis = d.get("taper_axis")
        factor = d.get("taper_factor")
        return cls(
            scale=np.asarray(d.get("scale", [1.0, 1.0, 1.0]), dtype=np.float64),
            taper_axis=axis,
            taper_factor=1.0 if factor is None else float(factor),
        )


def _as_points(points):
    if isinstance(points, PointCloud):
        return points.points, points
    return np.asarray(points, dtype=np.float64), None


def _rewrap(arr, template):
    if template is None:
        return arr
    return PointCloud(arr, labels=template.labels)


def axis_scale(points, axis: str, n: float):
    """Multiply one coordinate by n, e.g. axis 'y': (x, y, z) -> (x, n*y, z)."""
    if axis not in _AXES:
        raise InvalidParameter(f"axis must be one of 'x', 'y', 'z', got {axis!r}")
    if not (np.isfinite(n) and n > 0.0):
        raise InvalidParameter(f"scale factor must be positive, got {n}")
    pts, template = _as_points(points)
    out = pts.copy()
    out[:, _AXES[axis]] *= float(n)
    return _rewrap(out, template)


def taper(points, cage: BoxCage, axis: str, n: float):
    """Linearly scale the x or z coordinate along the cage's y height.

    The scaled coordinate is multiplied by 1 + (n - 1) * l / L where l is
    the (clamped) distance to the cage's top surface and L the cage height,
    so the factor is 1 at the top and n at the bottom. Points above or below
    the cage keep the boundary factor.
    """
    if axis not in ("x", "z"):
        raise InvalidParameter(f"taper axis must be 'x' or 'z', got {axis!r}")
    if not (np.isfinite(n) and n > 0.0):
        raise InvalidParameter(f"taper factor must be positive, got {n}")
    pts, template = _as_points(points)
    height = cage.extents[1]
    l_top = np.clip(cage.extents[1] / 2.0 - pts[:, 1], 0.0, height)
    factor = 1.0 + (float(n) - 1.0) * l_top / height
    out = pts.copy()
    out[:, _AXES[axis]] *= factor
    return _rewrap(out, template)


def apply_deformation(points, cage: BoxCage, spec: DeformationSpec):
    """Scale first, then taper (against the scaled cage)."""
    pts, template = _as_points(points)
    out = pts * spec.scale
    if spec.taper_axis is not None:
        scaled_cage = BoxCage(cage.extents * spec.scale)
        out = taper(out, scaled_cage, spec.taper_axis, spec.taper_factor)
    return _rewrap(out, template)


def deformed_size(cage: BoxCage, spec: DeformationSpec) -> np.ndarray:
    """Tight axis-aligned extents of the deformed cage.

    A widening taper (n > 1) grows the tapered extent by the bottom factor;
    a shrinking taper keeps the top cross-section as the maximum.
    """
    size = cage.extents * spec.scale
    if spec.taper_axis is not None and spec.taper_factor > 1.0:
        size = size.copy()
        size[_AXES[spec.taper_axis]] *= float(spec.taper_factor)
    return size


def assign_points_to_surfaces(points, cage: BoxCage) -> np.ndarray:
    """Nearest cage face id per point, faces ordered +x,-x,+y,-y,+z,-z = 1..6.

    Distances are to the bounded face rectangles; exact ties pick the
    smallest id.
    """
    pts, _ = _as_points(points)
    half = cage.extents / 2.0
    d2 = np.empty((len(pts), 6))
    face = 0
    for axis in range(3):
        o1, o2 = [a for a in range(3) if a != axis]
        over1 = np.maximum(np.abs(pts[:, o1]) - half[o1], 0.0)
        over2 = np.maximum(np.abs(pts[:, o2]) - half[o2], 0.0)
        for sign in (1.0, -1.0):
            gap = pts[:, axis] - sign * half[axis]
            d2[:, face] = gap * gap + over1 * over1 + over2 * over2
            face += 1
    return (np.argmin(d2, axis=1) + 1).astype(np.int64)


def deform_in_scene(scene: PointCloud, pose: PoseRecord, cage: BoxCage,
                    spec: DeformationSpec):
    """Deform the object inside a labelled scene cloud.

    Object points (label != 0) are conjugated through the pose:
    R(F(R^T (p - T))) + T with F = apply_deformation. Background points are
    returned bitwise unchanged. Returns (deformed cloud, new ground-truth
    size) where the size is deformed_size(cage, spec).
    """
    if scene.labels is None:
        raise LabelRequired("deform_in_scene needs a labelled scene cloud")
    mask = scene.labels != 0
    out = scene.points.copy()
    if mask.any():
        canonical = (scene.points[mask] - pose.translation) @ pose.rotation
        warped = apply_deformation(canonical, cage, spec)
        out[mask] = warped @ pose.rotation.T + pose.translation
    return PointCloud(out, labels=scene.labels), deformed_size(cage, spec)


def sample_random_deformation(seed, scale_range=FACTOR_RANGE,
                              taper_range=FACTOR_RANGE,
                              taper_prob: float = 0.5) -> DeformationSpec:
    """Draw a deformation: three uniform scales, then with probability
    ``taper_prob`` a taper with uniform axis ('x' or 'z') and factor.

    Draw order is fixed (scale triple, coin, axis, factor) so a seed fully
    determines the result.
    """
    lo, hi = float(scale_range[0]), float(scale_range[1])
    tlo, thi = float(taper_range[0]), float(taper_range[1])
    if not (FACTOR_RANGE[0] <= lo <= hi <= FACTOR_RANGE[1]):
        raise InvalidParameter(f"scale_range must nest inside {FACTOR_RANGE}")
    if not (FACTOR_RANGE[0] <= tlo <= thi <= FACTOR_RANGE[1]):
        raise InvalidParameter(f"taper_range must nest inside {FACTOR_RANGE}")
    if not 0.0 <= taper_prob <= 1.0:
        raise InvalidParameter("taper_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    scale = rng.uniform(lo, hi, size=3)
    if rng.random() < taper_prob:
        axis = "x" if rng.random() < 0.5 else "z"
        factor = rng.uniform(tlo, thi)
        return DeformationSpec(scale=scale, taper_axis=axis, taper_factor=factor)
    return DeformationSpec(scale=scale)
