"""3D graph convolution on point clouds.

A kernel is a small set of unit direction vectors with scalar weights plus a
center weight. Applied at a point, each kernel vector is matched against the
unit directions toward the point's k nearest neighbors by cosine similarity
(weighted by the neighbor feature), which makes the responses invariant to
translating or uniformly scaling the cloud. Directions toward duplicate
points are zero vectors and are excluded.

Kernel directions are stored unit-length; the response uses the plain dot
product, so the optimizer is expected to project direction gradients onto
the unit-sphere tangent plane and re-normalize after each step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core_geom import PointCloud
from .errors import EmptyInput, InvalidParameter, ShapeError, StateError


@dataclass(frozen=True)
class KernelSet:
    """m unit directions, m weights and a center weight."""

    directions: np.ndarray
    weights: np.ndarray
    center_weight: float

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] < 1:
            raise InvalidParameter(f"directions must be (m, 3) with m >= 1, got {d.shape}")
        norms = np.linalg.norm(d, axis=1)
        if np.any(norms == 0.0) or not np.all(np.isfinite(d)):
            raise InvalidParameter("kernel directions must be finite and nonzero")
        d = d / norms[:, None]
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape != (d.shape[0],):
            raise InvalidParameter("weights length must match the number of directions")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "center_weight", float(self.center_weight))

    @property
    def m(self) -> int:
        return len(self.weights)


def spread_directions(m: int) -> np.ndarray:
    """m unit vectors spread evenly over the sphere (golden-angle spiral)."""
    if m < 1:
        raise InvalidParameter("m must be >= 1")
    i = np.arange(m) + 0.5
    z = 1.0 - 2.0 * i / m
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


@dataclass(frozen=True)
class GcnLayerConfig:
    in_channels: int
    out_channels: int
    n_neighbors: int
    aggregation: str = "max"  # "max" matches each kernel vector to its best
    #                           neighbor; "sum" sums over all pairs

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidParameter("channel counts must be >= 1")
        if self.n_neighbors < 1:
            raise InvalidParameter("n_neighbors must be >= 1")
        if self.aggregation not in ("max", "sum"):
            raise InvalidParameter(f"unknown aggregation {self.aggregation!r}")


@dataclass
class GcnLayerParams:
    """Stacked kernel parameters, one KernelSet per (out, in) channel pair."""

    directions: np.ndarray  # (Cout, Cin, m, 3), unit rows
    weights: np.ndarray  # (Cout, Cin, m)
    center_weights: np.ndarray  # (Cout, Cin)

    @classmethod
    def init(cls, config: GcnLayerConfig, m: int, rng: np.random.Generator,
             spread: bool = False) -> "GcnLayerParams":
        """Random init. With ``spread`` each (out, in) pair gets a well-spread
        direction lattice under an independent random rotation instead of
        i.i.d. directions (which clump for small m).
        """
        if m < 1:
            raise InvalidParameter("m must be >= 1")
        co, ci = config.out_channels, config.in_channels
        if spread:
            from .core_geom import random_rotation

            base = spread_directions(m)
            d = np.empty((co, ci, m, 3))
            for o in range(co):
                for i in range(ci):
                    d[o, i] = base @ random_rotation(rng).T
        else:
            d = rng.normal(size=(co, ci, m, 3))
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
        scale = 1.0 / np.sqrt(ci * m)
        w = rng.normal(scale=scale, size=(co, ci, m))
        cw = rng.normal(scale=1.0 / np.sqrt(ci), size=(co, ci))
        return cls(d, w, cw)

    @property
    def m(self) -> int:
        return self.weights.shape[2]

    def kernel(self, out_channel: int, in_channel: int) -> KernelSet:
        return KernelSet(
            self.directions[out_channel, in_channel],
            self.weights[out_channel, in_channel],
            float(self.center_weights[out_channel, in_channel]),
        )


def neighbor_directions(cloud: PointCloud, index: int, n_neighbors: int) -> np.ndarray:
    """Unit directions from a point toward its n nearest neighbors.

    Directions toward duplicate points are returned as zero vectors.
    """
    from .core_geom import k_nearest_neighbors

    idx = k_nearest_neighbors(cloud, index, n_neighbors)
    diff = cloud.points[idx] - cloud.points[int(index)]
    norms = np.linalg.norm(diff, axis=1)
    out = np.zeros_like(diff)
    ok = norms > 0.0
    out[ok] = diff[ok] / norms[ok, None]
    return out


def gconv_response(kernel: KernelSet, dirs: np.ndarray, center_feature: float,
                   neighbor_features: np.ndarray, aggregation: str = "max") -> float:
    """Reference scalar response of one kernel at one point.

    response = center_weight * center_feature
             + sum_i weights[i] * agg_j cos(directions[i], dirs[j]) * feats[j]
    where zero-length rows of ``dirs`` are excluded and agg is max or sum.
    An empty candidate set contributes 0 to the max terms.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    feats = np.asarray(neighbor_features, dtype=np.float64).reshape(-1)
    if dirs.shape != (len(feats), 3):
        raise ShapeError("dirs and neighbor_features disagree")
    norms = np.linalg.norm(dirs, axis=1)
    ok = norms > 0.0
    out = kernel.center_weight * float(center_feature)
    if ok.any():
        unit = dirs[ok] / norms[ok, None]
        vals = (kernel.directions @ unit.T) * feats[ok]  # (m, n_ok)
        if aggregation == "max":
            out += float(kernel.weights @ vals.max(axis=1))
        elif aggregation == "sum":
            out += float(kernel.weights @ vals.sum(axis=1))
        else:
            raise InvalidParameter(f"unknown aggregation {aggregation!r}")
    return out


@dataclass
class GconvCache:
    """Forward-pass intermediates needed for the analytic backward pass."""

    config: GcnLayerConfig
    unit_dirs: np.ndarray
    valid: np.ndarray
    feats: np.ndarray
    nbr_idx: np.ndarray
    arg: np.ndarray


@dataclass
class GconvGrads:
    directions: np.ndarray
    weights: np.ndarray
    center_weights: np.ndarray
    features: np.ndarray


def layer_neighbor_geometry(points: np.ndarray, nbr_idx: np.ndarray):
    """Unit directions and validity mask for precomputed neighbor indices."""
    diff = points[nbr_idx] - points[:, None, :]
    norms = np.linalg.norm(diff, axis=-1)
    valid = norms > 0.0
    unit = np.zeros_like(diff)
    unit[valid] = diff[valid] / norms[valid][:, None]
    return unit, valid


def gconv_layer_forward(cloud: PointCloud, features: np.ndarray, config: GcnLayerConfig,
                        params: GcnLayerParams, nbr_idx: np.ndarray | None = None):
    """Per-point responses for all output channels.

    Returns (out (N, Cout), GconvCache). ``nbr_idx`` can be passed to reuse a
    neighbor graph already computed for this cloud.
    """
    n_points = len(cloud)
    if n_points == 0:
        raise EmptyInput("gconv on an empty cloud")
    if n_points < config.n_neighbors + 1:
        raise InvalidParameter(
            f"need at least {config.n_neighbors + 1} points, got {n_points}"
        )
    feats = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if feats.shape != (n_points, config.in_channels):
        raise ShapeError(
            f"features must be ({n_points}, {config.in_channels}), got {feats.shape}"
        )
    if params.weights.shape != (config.out_channels, config.in_channels, params.m):
        raise ShapeError("layer parameters disagree with the layer config")
    if nbr_idx is None:
        nbr_idx = kernels.knn_indices(cloud.points, config.n_neighbors)
    unit, valid = layer_neighbor_geometry(cloud.points, nbr_idx)
    out, arg = kernels.gconv_forward(
        unit, valid, feats, nbr_idx,
        params.directions, params.weights, params.center_weights,
        config.aggregation == "max",
    )
    return out, GconvCache(config, unit, valid, feats, nbr_idx, arg)


def gconv_layer_backward(params: GcnLayerParams, cache: GconvCache | None,
                         upstream: np.ndarray) -> GconvGrads:
    """Gradients w.r.t. kernel parameters and input features.

    Max selections are fixed at the forward argmax; direction gradients are
    raw (tangent projection is an optimizer concern).
    """
    if cache is None:
        raise StateError("gconv_layer_backward needs the forward cache")
    up = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64))
    n_points = cache.feats.shape[0]
    if up.shape != (n_points, cache.config.out_channels):
        raise ShapeError(f"upstream must be ({n_points}, {cache.config.out_channels})")
    d_feats, d_dirs, d_w, d_cw = kernels.gconv_backward(
        up, cache.unit_dirs, cache.valid, cache.feats, cache.nbr_idx,
        params.directions, params.weights, params.center_weights,
        cache.arg, cache.config.aggregation == "max",
    )
    return GconvGrads(d_dirs, d_w, d_cw, d_feats)


def pool_features(features: np.ndarray, mode: str = "max") -> np.ndarray:
    """Channel-wise pooling of per-point features into one vector."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise EmptyInput("pool_features needs a nonempty (N, C) array")
    if mode == "max":
        return feats.max(axis=0)
    if mode == "mean":
        return feats.mean(axis=0)
    raise InvalidParameter(f"unknown pooling mode {mode!r}")


def save_layer_params(params_by_name: dict[str, np.ndarray], path, meta: dict | None = None):
    """Write named tensors to a flat binary file with a JSON manifest.

    Layout: magic line, one JSON line holding metadata and the tensor
    manifest (name, dtype, shape), then raw little-endian row-major bytes in
    manifest order. Roundtrips bitwise.
    """
    manifest = []
    blobs = []
    for name, arr in params_by_name.items():
        a = np.ascontiguousarray(arr)
        manifest.append({"name": name, "dtype": str(a.dtype), "shape": list(a.shape)})
        blobs.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": manifest})
    with open(path, "wb") as f:
        f.write(b"POSEKIT-TENSORS-1\n")
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_layer_params(path):
    """Read a tensor file written by save_layer_params.

    Returns (params dict, meta dict).
    """
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != b"POSEKIT-TENSORS-1\n":
            raise StateError(f"{path}: not a posekit tensor file")
        header = json.loads(f.readline().decode("utf-8"))
        out = {}
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise StateError(f"{path}: truncated tensor data for {entry['name']}")
            out[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if f.read(1):
            raise StateError(f"{path}: trailing bytes after tensor data")
    return out, header["meta"]
