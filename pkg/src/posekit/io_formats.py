"""File formats and synthetic data generation.

Point clouds are ASCII PLY or whitespace XYZ text (chosen by extension),
poses are a JSON array of records. Floats are written with repr(), i.e. the
shortest string that parses back to the same double, so every writer/reader
pair in this module roundtrips losslessly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core_geom import (
    EZ,
    PointCloud,
    PoseRecord,
    SymmetrySpec,
    as_vec3,
    nearest_rotation,
)
from .errors import (
    DuplicateId,
    InvalidParameter,
    InvalidRotation,
    ParseError,
)

LOAD_ROTATION_TOL = 1e-4  # inputs this far from orthonormal are projected back

# how much the top cross-section of the tapered_box base shape is shrunk
TAPERED_BOX_TOP = 0.6


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# point clouds


def write_pointcloud(cloud: PointCloud, path) -> None:
    """Write a cloud as ASCII PLY (.ply) or XYZ text (.xyz)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        _write_ply(cloud, path)
    elif ext == ".xyz":
        _write_xyz(cloud, path)
    else:
        raise InvalidParameter(f"unsupported cloud extension {ext!r} (use .ply or .xyz)")


def read_pointcloud(path) -> PointCloud:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return _read_ply(path)
    if ext == ".xyz":
        return _read_xyz(path)
    raise InvalidParameter(f"unsupported cloud extension {ext!r} (use .ply or .xyz)")


def _write_ply(cloud: PointCloud, path) -> None:
    with open(path, "w") as f:
        f.write("ply\n")
        f.write("format ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\n")
        f.write("property float y\n")
        f.write("property float z\n")
        if cloud.labels is not None:
            f.write("property uchar label\n")
        f.write("end_header\n")
        if cloud.labels is not None:
            for p, lab in zip(cloud.points, cloud.labels):
                f.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(lab)}\n")
        else:
            for p in cloud.points:
                f.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def _read_ply(path) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    ln = 0

    def need_line():
        nonlocal ln
        while ln < len(lines):
            stripped = lines[ln].strip()
            ln += 1
            if stripped.startswith("comment"):
                continue
            return stripped
        raise ParseError("unexpected end of header", path, ln)

    if need_line() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    if need_line() != "format ascii 1.0":
        raise ParseError("only 'format ascii 1.0' is supported", path, ln)
    tok = need_line().split()
    if len(tok) != 3 or tok[:2] != ["element", "vertex"]:
        raise ParseError("expected 'element vertex N'", path, ln)
    try:
        count = int(tok[2])
    except ValueError:
        raise ParseError(f"bad vertex count {tok[2]!r}", path, ln)
    props = []
    while True:
        line = need_line()
        if line == "end_header":
            break
        tok = line.split()
        if len(tok) != 3 or tok[0] != "property":
            raise ParseError(f"unexpected header line {line!r}", path, ln)
        props.append((tok[1], tok[2]))
    has_label = False
    if props[:3] != [("float", "x"), ("float", "y"), ("float", "z")]:
        raise ParseError("vertex properties must start with float x, y, z", path, ln)
    if len(props) == 4:
        if props[3] != ("uchar", "label"):
            raise ParseError("optional fourth property must be 'uchar label'", path, ln)
        has_label = True
    elif len(props) != 3:
        raise ParseError("unsupported vertex property list", path, ln)

    pts = np.empty((count, 3))
    labels = np.empty(count, dtype=np.int64) if has_label else None
    want = 4 if has_label else 3
    for i in range(count):
        if ln >= len(lines):
            raise ParseError(f"expected {count} vertices, file ends after {i}", path, ln)
        row = lines[ln].split()
        ln += 1
        if len(row) != want:
            raise ParseError(f"expected {want} columns, got {len(row)}", path, ln)
        try:
            x, y, z = float(row[0]), float(row[1]), float(row[2])
        except ValueError:
            raise ParseError(f"bad float in {lines[ln - 1]!r}", path, ln)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise ParseError("non-finite coordinate", path, ln)
        pts[i] = (x, y, z)
        if has_label:
            try:
                lab = int(row[3])
            except ValueError:
                raise ParseError(f"bad label {row[3]!r}", path, ln)
            if not 0 <= lab <= 255:
                raise ParseError(f"label {lab} outside uchar range", path, ln)
            labels[i] = lab
    while ln < len(lines):
        if lines[ln].strip():
            raise ParseError("trailing data after the declared vertices", path, ln + 1)
        ln += 1
    return PointCloud(pts, labels=labels)


def _write_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w") as f:
        if cloud.labels is not None:
            for p, lab in zip(cloud.points, cloud.labels):
                f.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(lab)}\n")
        else:
            for p in cloud.points:
                f.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def _read_xyz(path) -> PointCloud:
    pts = []
    labels = []
    ncols = None
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            row = line.split()
            if not row:
                continue
            if ncols is None:
                ncols = len(row)
                if ncols not in (3, 4):
                    raise ParseError(f"expected 3 or 4 columns, got {ncols}", path, ln)
            elif len(row) != ncols:
                raise ParseError(
                    f"inconsistent column count ({len(row)} vs {ncols})", path, ln
                )
            try:
                x, y, z = float(row[0]), float(row[1]), float(row[2])
            except ValueError:
                raise ParseError(f"bad float in {line.strip()!r}", path, ln)
            if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
                raise ParseError("non-finite coordinate", path, ln)
            pts.append((x, y, z))
            if ncols == 4:
                try:
                    labels.append(int(row[3]))
                except ValueError:
                    raise ParseError(f"bad label {row[3]!r}", path, ln)
    pts = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return PointCloud(pts, labels=np.array(labels, dtype=np.int64) if ncols == 4 else None)


# ---------------------------------------------------------------------------
# pose files

_POSE_KEYS = {"id", "category", "rotation", "translation", "size", "symmetry"}


def write_poses(poses: dict[str, PoseRecord], path,
                deformations: dict[str, dict] | None = None) -> None:
    """Write an id -> PoseRecord mapping as a JSON array (insertion order).

    ``deformations`` optionally attaches a deformation object per id under
    the "deformation" key.
    """
    out = []
    for pid, pose in poses.items():
        obj = {
            "id": pid,
            "category": pose.category,
            "rotation": [float(v) for v in pose.rotation.reshape(-1)],
            "translation": [float(v) for v in pose.translation],
            "size": [float(v) for v in pose.size],
            "symmetry": pose.symmetry.to_dict(),
        }
        if deformations and pid in deformations:
            obj["deformation"] = deformations[pid]
        out.append(obj)
    with open(path, "w") as f:
        json.dump(out, f, indent=2)
        f.write("\n")


def read_poses(path) -> dict[str, PoseRecord]:
    """Read a pose file. Returns an ordered id -> PoseRecord mapping.

    Rotations up to 1e-4 from orthonormal are projected back onto SO(3);
    worse matrices and reflections (det <= 0) are rejected.
    """
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno)
    if not isinstance(data, list):
        raise ParseError("pose file must be a JSON array", path)
    poses: dict[str, PoseRecord] = {}
    for i, obj in enumerate(data):
        where = f"record {i}"
        if not isinstance(obj, dict):
            raise ParseError(f"{where}: not an object", path)
        missing = _POSE_KEYS - obj.keys()
        if missing:
            raise ParseError(f"{where}: missing keys {sorted(missing)}", path)
        unknown = obj.keys() - _POSE_KEYS - {"deformation"}
        if unknown:
            raise ParseError(f"{where}: unknown keys {sorted(unknown)}", path)
        pid = obj["id"]
        if not isinstance(pid, str) or not pid:
            raise ParseError(f"{where}: id must be a nonempty string", path)
        if pid in poses:
            raise DuplicateId(f"{path}: duplicate pose id {pid!r}")
        rot = np.asarray(obj["rotation"], dtype=np.float64)
        if rot.shape != (9,):
            raise ParseError(f"{where}: rotation must hold 9 numbers", path)
        rot = rot.reshape(3, 3)
        if not np.all(np.isfinite(rot)):
            raise ParseError(f"{where}: non-finite rotation", path)
        det = np.linalg.det(rot)
        if det <= 0.0:
            raise InvalidRotation(f"{path}: {where}: determinant {det:.6f} <= 0")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > LOAD_ROTATION_TOL:
            raise InvalidRotation(
                f"{path}: {where}: max |R^T R - I| = {err:.3e} exceeds {LOAD_ROTATION_TOL}"
            )
        rot = nearest_rotation(rot)
        try:
            sym = SymmetrySpec.from_dict(obj["symmetry"])
            pose = PoseRecord(
                rotation=rot,
                translation=as_vec3(obj["translation"]),
                size=as_vec3(obj["size"]),
                category=str(obj["category"]),
                symmetry=sym,
            )
        except InvalidParameter as e:
            raise ParseError(f"{where}: {e}", path)
        poses[pid] = pose
    return poses


def read_pose_deformations(path) -> dict[str, dict]:
    """The raw "deformation" objects of a pose file, keyed by id."""
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno)
    out = {}
    for obj in data:
        if isinstance(obj, dict) and "deformation" in obj and "id" in obj:
            out[obj["id"]] = obj["deformation"]
    return out


# ---------------------------------------------------------------------------
# synthetic samples

_BASES = ("box", "cylinder", "tapered_box")


@dataclass(frozen=True)
class SyntheticShapeSpec:
    """Recipe for one synthetic single-view sample."""

    base: str
    extents: np.ndarray
    points_per_sample: int = 256
    background_points: int = 64
    noise_sigma: float = 0.002
    seed: int | tuple[int, ...] = 0  # anything np.random.default_rng accepts

    def __post_init__(self):
        if self.base not in _BASES:
            raise InvalidParameter(f"base must be one of {_BASES}, got {self.base!r}")
        ext = as_vec3(self.extents)
        if np.any(ext <= 0.0):
            raise InvalidParameter(f"extents must be positive, got {ext.tolist()}")
        if self.base == "cylinder" and abs(ext[0] - ext[1]) > 1e-12:
            raise InvalidParameter("cylinder extents must satisfy x == y")
        object.__setattr__(self, "extents", ext)
        if int(self.points_per_sample) < 64:
            raise InvalidParameter("points_per_sample must be >= 64")
        object.__setattr__(self, "points_per_sample", int(self.points_per_sample))
        if int(self.background_points) < 0:
            raise InvalidParameter("background_points must be >= 0")
        object.__setattr__(self, "background_points", int(self.background_points))
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0.0):
            raise InvalidParameter("noise_sigma must be >= 0")


def _sample_box_surface(rng: np.random.Generator, extents, count: int) -> np.ndarray:
    ex, ey, ez = extents
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    pts = np.empty((count, 3))
    axis = face // 2  # 0 -> x faces, 1 -> y faces, 2 -> z faces
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    for a in range(3):
        sel = axis == a
        o1, o2 = ((1, 2), (0, 2), (0, 1))[a]
        pts[sel, a] = sign[sel] * extents[a]
        pts[sel, o1] = u[sel] * extents[o1]
        pts[sel, o2] = v[sel] * extents[o2]
    return pts


def _sample_cylinder_surface(rng: np.random.Generator, extents, count: int) -> np.ndarray:
    r = extents[0] / 2.0
    h = extents[2]
    lateral = 2.0 * np.pi * r * h
    cap = np.pi * r * r
    areas = np.array([lateral, cap, cap])
    part = rng.choice(3, size=count, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    u = rng.uniform(0.0, 1.0, size=count)
    pts = np.empty((count, 3))
    side = part == 0
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 1] = r * np.sin(theta[side])
    pts[side, 2] = (u[side] - 0.5) * h
    for pi, zsign in ((1, 0.5), (2, -0.5)):
        sel = part == pi
        rad = r * np.sqrt(u[sel])
        pts[sel, 0] = rad * np.cos(theta[sel])
        pts[sel, 1] = rad * np.sin(theta[sel])
        pts[sel, 2] = zsign * h
    return pts


def _taper_base_shape(pts: np.ndarray, extents) -> np.ndarray:
    # shrink x/y cross-sections linearly toward the +z top of the box
    h = extents[2]
    l_top = extents[2] / 2.0 - pts[:, 2]  # distance to the top surface
    factor = TAPERED_BOX_TOP + (1.0 - TAPERED_BOX_TOP) * (l_top / h)
    out = pts.copy()
    out[:, 0] *= factor
    out[:, 1] *= factor
    return out


def _sample_surface(rng: np.random.Generator, base: str, extents, count: int) -> np.ndarray:
    if base == "cylinder":
        return _sample_cylinder_surface(rng, extents, count)
    pts = _sample_box_surface(rng, extents, count)
    if base == "tapered_box":
        pts = _taper_base_shape(pts, extents)
    return pts


def sample_model_surface(spec: SyntheticShapeSpec, count: int,
                         seed: int | None = None) -> np.ndarray:
    """Noise-free points on the full (uncropped) canonical surface."""
    if count < 1:
        raise InvalidParameter("count must be >= 1")
    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    return _sample_surface(rng, spec.base, spec.extents, count)


def generate_synthetic_sample(spec: SyntheticShapeSpec, pose: PoseRecord):
    """One synthetic scene: a single-view object crop plus background clutter.

    Surface points are drawn uniformly on the canonical shape and kept only
    on the visible half-space z >= 0 (single-view culling along the
    canonical +Z view direction). Gaussian noise (clipped at 3 sigma per
    component) is added in the canonical frame, the points are transformed
    by the pose and labelled 1. background_points uniform clutter points,
    labelled 0, are appended inside a sphere of radius 2 * max(extents)
    around the translation. Deterministic in spec.seed.

    Returns (PointCloud with labels, the ground-truth PoseRecord).
    """
    rng = np.random.default_rng(spec.seed)
    need = spec.points_per_sample
    chunks = []
    while need > 0:
        batch = _sample_surface(rng, spec.base, spec.extents, max(2 * need, 64))
        keep = batch[batch[:, 2] >= 0.0]
        chunks.append(keep[:need])
        need -= len(keep[:need])
    obj = np.concatenate(chunks, axis=0)
    if spec.noise_sigma > 0.0:
        noise = rng.normal(0.0, spec.noise_sigma, size=obj.shape)
        limit = 3.0 * spec.noise_sigma  # keeps points inside extents/2 + 3 sigma
        obj = obj + np.clip(noise, -limit, limit)
    obj = obj @ pose.rotation.T + pose.translation

    nbg = spec.background_points
    if nbg > 0:
        radius = 2.0 * float(spec.extents.max())
        dirs = rng.normal(size=(nbg, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rad = radius * rng.uniform(0.0, 1.0, size=nbg) ** (1.0 / 3.0)
        bg = pose.translation + dirs * rad[:, None]
        pts = np.concatenate([obj, bg], axis=0)
        labels = np.concatenate(
            [np.ones(len(obj), dtype=np.int64), np.zeros(nbg, dtype=np.int64)]
        )
    else:
        pts = obj
        labels = np.ones(len(obj), dtype=np.int64)
    return PointCloud(pts, labels=labels), pose


# ---------------------------------------------------------------------------
# dataset directories (manifest + clouds + poses)


@dataclass
class DatasetSample:
    id: str
    category: str
    cloud: PointCloud
    pose: PoseRecord
    model_points: np.ndarray | None = None


def write_dataset(directory, samples: list[DatasetSample],
                  categories: dict[str, SymmetrySpec]) -> None:
    """Write a dataset directory: manifest.json, poses.json, clouds/, models/."""
    directory = str(directory)
    os.makedirs(os.path.join(directory, "clouds"), exist_ok=True)
    have_models = any(s.model_points is not None for s in samples)
    if have_models:
        os.makedirs(os.path.join(directory, "models"), exist_ok=True)
    manifest = {
        "categories": {name: sym.to_dict() for name, sym in categories.items()},
        "samples": [],
    }
    poses: dict[str, PoseRecord] = {}
    for s in samples:
        if s.id in poses:
            raise DuplicateId(f"duplicate sample id {s.id!r}")
        rel_cloud = os.path.join("clouds", f"{s.id}.ply")
        write_pointcloud(s.cloud, os.path.join(directory, rel_cloud))
        entry = {"id": s.id, "category": s.category, "cloud": rel_cloud}
        if s.model_points is not None:
            rel_model = os.path.join("models", f"{s.id}.ply")
            write_pointcloud(PointCloud(s.model_points), os.path.join(directory, rel_model))
            entry["model"] = rel_model
        manifest["samples"].append(entry)
        poses[s.id] = s.pose
    write_poses(poses, os.path.join(directory, "poses.json"))
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def read_dataset(directory, load_models: bool = False):
    """Read a dataset directory written by write_dataset.

    Returns (samples, categories). Clouds keep their labels; canonical model
    clouds are loaded only on request.
    """
    directory = str(directory)
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ParseError("manifest.json not found", directory)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, manifest_path, e.lineno)
    poses = read_poses(os.path.join(directory, "poses.json"))
    categories = {
        name: SymmetrySpec.from_dict(d)
        for name, d in manifest.get("categories", {}).items()
    }
    samples = []
    for entry in manifest["samples"]:
        sid = entry["id"]
        if sid not in poses:
            raise ParseError(f"sample {sid!r} has no pose record", manifest_path)
        cloud = read_pointcloud(os.path.join(directory, entry["cloud"]))
        model = None
        if load_models and "model" in entry:
            model = read_pointcloud(os.path.join(directory, entry["model"])).points
        samples.append(DatasetSample(sid, entry["category"], cloud, poses[sid], model))
    return samples, categories
