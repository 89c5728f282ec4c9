"""Core geometric types and primitives shared by the whole package.

Conventions:
  * coordinates are meters, stored as float64 numpy arrays, points as (N, 3)
  * rotation matrices are 3x3 row-major, proper orthonormal
  * user-facing angles are degrees
  * the canonical object frame uses +Z as the up / symmetry axis
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, InvalidParameter, InvalidRotation

ROTATION_TOL = 1e-6

EX = np.array([1.0, 0.0, 0.0])
EY = np.array([0.0, 1.0, 0.0])
EZ = np.array([0.0, 0.0, 1.0])


def as_vec3(v) -> np.ndarray:
    """Coerce to a finite float64 3-vector (copy)."""
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise InvalidParameter(f"expected a 3-vector, got shape {np.shape(v)}")
    if not np.all(np.isfinite(a)):
        raise InvalidParameter(f"non-finite vector components: {a.tolist()}")
    return a.copy()


def vec3(x, y, z) -> np.ndarray:
    return as_vec3((x, y, z))


def normalized(v) -> np.ndarray:
    a = as_vec3(v)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise InvalidParameter("cannot normalize a zero vector")
    return a / n


def check_rotation(R, tol: float = ROTATION_TOL) -> np.ndarray:
    """Validate a proper rotation matrix and return it as float64 (3, 3)."""
    M = np.asarray(R, dtype=np.float64)
    if M.shape != (3, 3):
        raise InvalidRotation(f"rotation must be 3x3, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidRotation("non-finite rotation entries")
    err = np.abs(M.T @ M - np.eye(3)).max()
    if err > tol:
        raise InvalidRotation(f"not orthonormal: max |R^T R - I| = {err:.3e}")
    det = np.linalg.det(M)
    if abs(det - 1.0) > tol:
        raise InvalidRotation(f"determinant {det:.9f}, expected +1")
    return M.copy()


def is_rotation(R, tol: float = ROTATION_TOL) -> bool:
    try:
        check_rotation(R, tol)
        return True
    except InvalidRotation:
        return False


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Right-handed rotation about ``axis`` by ``angle_deg`` (Rodrigues form)."""
    u = normalized(axis)
    t = np.deg2rad(float(angle_deg))
    c, s = np.cos(t), np.sin(t)
    x, y, z = u
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def rotation_x(angle_deg: float) -> np.ndarray:
    return rotation_about_axis(EX, angle_deg)


def rotation_y(angle_deg: float) -> np.ndarray:
    return rotation_about_axis(EY, angle_deg)


def rotation_z(angle_deg: float) -> np.ndarray:
    return rotation_about_axis(EZ, angle_deg)


def nearest_rotation(M) -> np.ndarray:
    """Orthogonal Procrustes projection of a near-rotation onto SO(3)."""
    A = np.asarray(M, dtype=np.float64).reshape(3, 3)
    U, _, Vt = np.linalg.svd(A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (unit quaternion from an isotropic Gaussian)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def geodesic_rotation_distance(rot_a, rot_b) -> float:
    """Geodesic distance between two rotations, in degrees.

    Uses atan2 of the rotation's sine (off-diagonal antisymmetric part) and
    cosine (trace); unlike plain arccos this stays accurate for near-zero
    angles, where arccos bottoms out around 1e-8 rad.
    """
    A = check_rotation(rot_a)
    B = check_rotation(rot_b)
    R = A.T @ B
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.sqrt(
        (R[2, 1] - R[1, 2]) ** 2
        + (R[0, 2] - R[2, 0]) ** 2
        + (R[1, 0] - R[0, 1]) ** 2
    )
    return float(np.degrees(np.arctan2(s, c)))


@dataclass(frozen=True)
class PointCloud:
    """A set of 3D points with optional integer labels (0 = background, 1 = object).

    Arrays are float64 / int64 and should be treated as immutable after
    construction. An empty cloud (N = 0) is allowed; operations that need
    data raise EmptyInput.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidParameter(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidParameter("non-finite point coordinates")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
            if lab.shape != (len(pts),):
                raise InvalidParameter(
                    f"labels must have shape ({len(pts)},), got {lab.shape}"
                )
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SymmetrySpec:
    """Category symmetry: 'none', 'circular', or discrete 'n_fold' about an axis."""

    kind: str = "none"
    n: int | None = None
    axis: np.ndarray = field(default_factory=lambda: EZ.copy())

    def __post_init__(self):
        if self.kind not in ("none", "circular", "n_fold"):
            raise InvalidParameter(f"unknown symmetry kind {self.kind!r}")
        if self.kind == "n_fold":
            if self.n is None or int(self.n) < 2:
                raise InvalidParameter("n_fold symmetry needs integer n >= 2")
            object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "axis", normalized(self.axis))

    @classmethod
    def none(cls) -> "SymmetrySpec":
        return cls("none")

    @classmethod
    def circular(cls, axis=EZ) -> "SymmetrySpec":
        return cls("circular", axis=axis)

    @classmethod
    def n_fold(cls, n: int, axis=EZ) -> "SymmetrySpec":
        return cls("n_fold", n=n, axis=axis)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "axis": [float(c) for c in self.axis],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SymmetrySpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise InvalidParameter("symmetry must be an object with a 'kind' key")
        axis = d.get("axis")
        return cls(
            d["kind"],
            n=d.get("n"),
            axis=EZ if axis is None else axis,
        )


@dataclass(frozen=True)
class PoseRecord:
    """A category-level pose: rotation, translation (m), tight box size (m)."""

    rotation: np.ndarray
    translation: np.ndarray
    size: np.ndarray
    category: str = ""
    symmetry: SymmetrySpec = field(default_factory=SymmetrySpec.none)

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", as_vec3(self.translation))
        size = as_vec3(self.size)
        if np.any(size <= 0.0):
            raise InvalidParameter(f"size must be strictly positive, got {size.tolist()}")
        object.__setattr__(self, "size", size)


@dataclass(frozen=True)
class OrientedBox:
    """A rotated box: center, per-axis extents (full widths) and orientation."""

    rotation: np.ndarray
    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "center", as_vec3(self.center))
        ext = as_vec3(self.extents)
        if np.any(ext <= 0.0):
            raise InvalidParameter(f"extents must be strictly positive, got {ext.tolist()}")
        object.__setattr__(self, "extents", ext)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))


def pose_box(pose: PoseRecord) -> OrientedBox:
    """The tight oriented bounding box implied by a pose record."""
    return OrientedBox(pose.rotation, pose.translation, pose.size)


def oriented_box_corners(box: OrientedBox) -> np.ndarray:
    """The 8 corners of a box as (8, 3).

    Corner i carries sign (+ if bit set, - otherwise) of bit 0 -> x,
    bit 1 -> y, bit 2 -> z, so the order is (---), (+--), (-+-), (++-),
    (--+), (+-+), (-++), (+++) in the box frame.
    """
    half = box.extents / 2.0
    corners = np.empty((8, 3))
    for i in range(8):
        sx = half[0] if i & 1 else -half[0]
        sy = half[1] if i & 2 else -half[1]
        sz = half[2] if i & 4 else -half[2]
        corners[i] = box.center + box.rotation @ np.array([sx, sy, sz])
    return corners


def transform_points(cloud: PointCloud, rotation, translation) -> PointCloud:
    """Apply p -> R p + T to every point; labels are carried through."""
    if len(cloud) == 0:
        raise EmptyInput("cannot transform an empty cloud")
    R = check_rotation(rotation)
    T = as_vec3(translation)
    return PointCloud(cloud.points @ R.T + T, labels=cloud.labels)


def inverse_transform_points(cloud: PointCloud, rotation, translation) -> PointCloud:
    """Apply the inverse map p -> R^T (p - T); labels are carried through."""
    if len(cloud) == 0:
        raise EmptyInput("cannot transform an empty cloud")
    R = check_rotation(rotation)
    T = as_vec3(translation)
    return PointCloud((cloud.points - T) @ R, labels=cloud.labels)


def crop_sphere(cloud: PointCloud, center, radius: float) -> PointCloud:
    """Keep points with ||p - center|| <= radius. The result may be empty."""
    if radius <= 0.0:
        raise InvalidParameter(f"radius must be positive, got {radius}")
    c = as_vec3(center)
    diff = cloud.points - c
    mask = np.einsum("ij,ij->i", diff, diff) <= float(radius) ** 2
    labels = cloud.labels[mask] if cloud.labels is not None else None
    return PointCloud(cloud.points[mask], labels=labels)


def k_nearest_neighbors(cloud: PointCloud, query_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest points to ``query_index``, excluding itself.

    Ordered by increasing Euclidean distance; exact ties are broken by the
    smaller point index.
    """
    n = len(cloud)
    if n == 0:
        raise EmptyInput("k_nearest_neighbors on an empty cloud")
    if not 0 <= int(query_index) < n:
        raise InvalidParameter(f"query index {query_index} out of range for {n} points")
    if not 1 <= int(k) <= n - 1:
        raise InvalidParameter(f"k must be in [1, {n - 1}], got {k}")
    diff = cloud.points - cloud.points[int(query_index)]
    d2 = np.einsum("ij,ij->i", diff, diff)
    d2[int(query_index)] = np.inf
    order = np.argsort(d2, kind="stable")
    return order[: int(k)].astype(np.int64)
