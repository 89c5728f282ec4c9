"""The toy pose network, written directly on numpy arrays.

Encoder: two stacked 3D graph-convolution layers (tanh between them) over a
shared per-cloud neighbor graph; the first layer reads a constant channel,
the normalized centroid distance and the centroid-normalized coordinates
(all shift and scale invariant). Per-point features feed a linear 2-way
segmentation head; the features of the object points are pooled (mean by
default, max as an option) into a latent vector that stays shift and scale
invariant by construction. Decoders on the latent: a reconstruction MLP
emitting M centered points and two small MLPs emitting the rotation vectors
v1 and v2. A separate head regresses translation/size residuals from the
centered object points (a shared per-point linear layer mean-pooled into
learned statistics) plus the category one-hot; the object centroid is added
back outside the learned function, which keeps every branch shift invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .. import kernels
from ..core_geom import PointCloud, PoseRecord, SymmetrySpec
from ..decoupled_rotation import rotation_from_vectors, _min_rotation_between
from ..errors import (
    DegenerateVectors,
    EmptyInput,
    InvalidParameter,
    SegmentationEmpty,
    ShapeError,
)
from ..gcn3d import (
    GcnLayerConfig,
    GcnLayerParams,
    gconv_layer_backward,
    gconv_layer_forward,
    load_layer_params,
    save_layer_params,
)
from .losses import CategoryStats

SIZE_FLOOR = 1e-4  # meters; predicted sizes are clamped to stay positive


@dataclass(frozen=True)
class ToyModelConfig:
    categories: tuple[str, ...]
    n_neighbors: int = 6
    mid_channels: int = 10
    latent_width: int = 64
    m_enc1: int = 8
    m_enc2: int = 3
    recon_points: int = 256
    decoder_hidden: int = 128
    rot_hidden: int = 32
    stat_width: int = 32
    residual_hidden: int = 32
    aggregation: str = "max"
    recon_target: str = "observed"  # or "complete"
    latent_pool: str = "mean"  # or "max"

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.categories:
            raise InvalidParameter("the model needs at least one category")
        if self.recon_target not in ("observed", "complete"):
            raise InvalidParameter(f"unknown recon_target {self.recon_target!r}")
        if self.latent_pool not in ("mean", "max"):
            raise InvalidParameter(f"unknown latent_pool {self.latent_pool!r}")
        for name in ("n_neighbors", "mid_channels", "latent_width", "m_enc1",
                     "m_enc2", "recon_points", "decoder_hidden", "rot_hidden",
                     "stat_width", "residual_hidden"):
            if int(getattr(self, name)) < 1:
                raise InvalidParameter(f"{name} must be >= 1")

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def layer1(self) -> GcnLayerConfig:
        # input channels: constant, normalized centroid distance, and the
        # three centroid-normalized coordinates (see _input_features)
        return GcnLayerConfig(5, self.mid_channels, self.n_neighbors, self.aggregation)

    def layer2(self) -> GcnLayerConfig:
        return GcnLayerConfig(
            self.mid_channels, self.latent_width, self.n_neighbors, self.aggregation
        )


@dataclass
class ToyModel:
    config: ToyModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ToyModelConfig, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        k = config.n_categories

        def glorot(out_dim, in_dim):
            std = np.sqrt(2.0 / (in_dim + out_dim))
            return rng.normal(scale=std, size=(out_dim, in_dim))

        enc1 = GcnLayerParams.init(config.layer1(), config.m_enc1, rng, spread=True)
        enc2 = GcnLayerParams.init(config.layer2(), config.m_enc2, rng, spread=True)
        latent = config.latent_width
        p = {
            "enc1_dirs": enc1.directions, "enc1_w": enc1.weights, "enc1_cw": enc1.center_weights,
            "enc2_dirs": enc2.directions, "enc2_w": enc2.weights, "enc2_cw": enc2.center_weights,
            "seg_w": glorot(2, latent), "seg_b": np.zeros(2),
            "dec_w1": glorot(config.decoder_hidden, latent + k),
            "dec_b1": np.zeros(config.decoder_hidden),
            "dec_w2": glorot(3 * config.recon_points, config.decoder_hidden),
            "dec_b2": np.zeros(3 * config.recon_points),
            "rot1_w1": glorot(config.rot_hidden, latent), "rot1_b1": np.zeros(config.rot_hidden),
            "rot1_w2": glorot(3, config.rot_hidden) * 0.1, "rot1_b2": np.array([0.0, 0.0, 1.0]),
            "rot2_w1": glorot(config.rot_hidden, latent), "rot2_b1": np.zeros(config.rot_hidden),
            "rot2_w2": glorot(3, config.rot_hidden) * 0.1, "rot2_b2": np.array([1.0, 0.0, 0.0]),
            "pn_w": glorot(config.stat_width, 3), "pn_b": np.zeros(config.stat_width),
            "res_w1": glorot(config.residual_hidden, config.stat_width + k),
            "res_b1": np.zeros(config.residual_hidden),
            "res_w2": glorot(6, config.residual_hidden) * 0.1, "res_b2": np.zeros(6),
        }
        return cls(config, p)

    def one_hot(self, category: str) -> np.ndarray:
        if category not in self.config.categories:
            raise InvalidParameter(
                f"unknown category {category!r}; model knows {list(self.config.categories)}"
            )
        v = np.zeros(self.config.n_categories)
        v[self.config.categories.index(category)] = 1.0
        return v

    def enc_params(self, which: int) -> GcnLayerParams:
        p = self.params
        return GcnLayerParams(
            p[f"enc{which}_dirs"], p[f"enc{which}_w"], p[f"enc{which}_cw"]
        )


@dataclass
class ToyForward:
    seg_logits: np.ndarray
    recon: np.ndarray  # (M, 3) centered reconstruction
    v1: np.ndarray
    v2: np.ndarray
    t_res: np.ndarray
    s_res: np.ndarray
    object_idx: np.ndarray  # indices of the points used by the object branches
    anchor: np.ndarray  # mean of those points; T estimate = anchor + t_res
    latent: np.ndarray
    cache: "_Cache"


@dataclass
class _Cache:
    cache1: object
    cache2: object
    a1: np.ndarray
    h2: np.ndarray
    object_idx: np.ndarray
    pool_arg: np.ndarray
    latent: np.ndarray
    onehot: np.ndarray
    z: np.ndarray
    d1: np.ndarray
    r1_h: np.ndarray
    r2_h: np.ndarray
    pn_in: np.ndarray  # radius-normalized centered object points
    pn_scale: float
    s1: np.ndarray
    u: np.ndarray
    e1: np.ndarray


@dataclass
class HeadGrads:
    """Upstream gradients entering the network outputs (already weighted)."""

    seg_logits: np.ndarray | None = None
    recon: np.ndarray | None = None
    v1: np.ndarray | None = None
    v2: np.ndarray | None = None
    t_res: np.ndarray | None = None
    s_res: np.ndarray | None = None


def _input_features(pts: np.ndarray) -> np.ndarray:
    """Per-point input channels: constant, normalized centroid distance, and
    the centroid-normalized coordinates.

    Everything is divided by the mean centroid distance, so the channels are
    exactly shift and scale invariant while keeping absolute orientation
    (required: the network outputs world-frame rotation vectors). The radius
    channel separates background clutter (large normalized radii) from the
    object surface; the coordinate channels let pooled features act as
    directional extent statistics.
    """
    n = len(pts)
    centered = pts - pts.mean(axis=0)
    r = np.linalg.norm(centered, axis=1)
    mean = r.mean()
    if mean <= 0.0:
        return np.column_stack([np.ones(n), np.zeros((n, 4))])
    return np.column_stack([np.ones(n), r / mean, centered / mean])


def forward(model: ToyModel, cloud: PointCloud, category: str,
            object_mask: np.ndarray | None = None) -> ToyForward:
    """Run the network. ``object_mask`` selects the points fed to the object
    branches (teacher forcing at train time); None uses the predicted
    segmentation and raises SegmentationEmpty when nothing is classified as
    object.
    """
    cfg = model.config
    pts = cloud.points
    n = len(pts)
    if n == 0:
        raise EmptyInput("forward on an empty cloud")
    if n < cfg.n_neighbors + 1:
        raise InvalidParameter(f"need at least {cfg.n_neighbors + 1} points, got {n}")
    onehot = model.one_hot(category)
    p = model.params

    nbr = kernels.knn_indices(pts, cfg.n_neighbors)
    h1, cache1 = gconv_layer_forward(cloud, _input_features(pts), cfg.layer1(),
                                     model.enc_params(1), nbr_idx=nbr)
    a1 = np.tanh(h1)
    h2, cache2 = gconv_layer_forward(cloud, a1, cfg.layer2(),
                                     model.enc_params(2), nbr_idx=nbr)
    seg_logits = h2 @ p["seg_w"].T + p["seg_b"]

    if object_mask is None:
        object_mask = seg_logits.argmax(axis=1) == 1
        if not object_mask.any():
            raise SegmentationEmpty("no points classified as object")
    else:
        object_mask = np.asarray(object_mask, dtype=bool).reshape(-1)
        if object_mask.shape != (n,):
            raise ShapeError("object_mask length must match the cloud")
        if not object_mask.any():
            raise EmptyInput("object_mask selects no points")
    obj_idx = np.flatnonzero(object_mask)

    # mean pooling generalizes far better for orientation decoding than max
    # (max-pooled responses vary non-smoothly with pose); max stays available
    # for comparison
    h_obj = h2[obj_idx]
    if cfg.latent_pool == "max":
        pool_arg = h_obj.argmax(axis=0)
        latent = h_obj[pool_arg, np.arange(cfg.latent_width)]
    else:
        pool_arg = None
        latent = h_obj.mean(axis=0)

    z = np.concatenate([latent, onehot])
    d1 = np.tanh(z @ p["dec_w1"].T + p["dec_b1"])
    recon = (d1 @ p["dec_w2"].T + p["dec_b2"]).reshape(cfg.recon_points, 3)

    r1_h = np.tanh(latent @ p["rot1_w1"].T + p["rot1_b1"])
    v1 = r1_h @ p["rot1_w2"].T + p["rot1_b2"]
    r2_h = np.tanh(latent @ p["rot2_w1"].T + p["rot2_b1"])
    v2 = r2_h @ p["rot2_w2"].T + p["rot2_b2"]

    # residual head: mean-pooled statistics of the radius-normalized centered
    # points (mean pooling keeps a few mis-segmented outliers from dominating;
    # the translation residual is rescaled by the radius, so it is exactly
    # scale equivariant)
    p_obj = pts[obj_idx]
    anchor = p_obj.mean(axis=0)
    centered = p_obj - anchor
    r_obj = float(np.linalg.norm(centered, axis=1).mean())
    scale = r_obj if r_obj > 0.0 else 1.0
    pn_in = centered / scale
    s1 = np.tanh(pn_in @ p["pn_w"].T + p["pn_b"])
    stats_vec = s1.mean(axis=0)
    u = np.concatenate([stats_vec, onehot])
    e1 = np.tanh(u @ p["res_w1"].T + p["res_b1"])
    out6 = e1 @ p["res_w2"].T + p["res_b2"]
    t_res = out6[:3] * scale

    cache = _Cache(cache1, cache2, a1, h2, obj_idx, pool_arg, latent, onehot,
                   z, d1, r1_h, r2_h, pn_in, scale, s1, u, e1)
    return ToyForward(seg_logits, recon, v1, v2, t_res, out6[3:], obj_idx,
                      anchor, latent, cache)


def backward(model: ToyModel, fwd: ToyForward, grads: HeadGrads) -> dict[str, np.ndarray]:
    """Gradients of the (weighted) losses w.r.t. every model parameter."""
    cfg = model.config
    p = model.params
    c = fwd.cache
    n, latent_w = c.h2.shape
    out = {name: np.zeros_like(arr) for name, arr in p.items()}

    d_h2 = np.zeros_like(c.h2)
    d_latent = np.zeros(latent_w)

    if grads.seg_logits is not None:
        ds = np.asarray(grads.seg_logits, dtype=np.float64)
        out["seg_w"] += ds.T @ c.h2
        out["seg_b"] += ds.sum(axis=0)
        d_h2 += ds @ p["seg_w"]

    if grads.recon is not None:
        d_out = np.asarray(grads.recon, dtype=np.float64).reshape(-1)
        out["dec_w2"] += np.outer(d_out, c.d1)
        out["dec_b2"] += d_out
        d_d1 = (d_out @ p["dec_w2"]) * (1.0 - c.d1 ** 2)
        out["dec_w1"] += np.outer(d_d1, c.z)
        out["dec_b1"] += d_d1
        d_latent += (d_d1 @ p["dec_w1"])[:latent_w]

    for name, g, hid in (("rot1", grads.v1, c.r1_h), ("rot2", grads.v2, c.r2_h)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        out[f"{name}_w2"] += np.outer(g, hid)
        out[f"{name}_b2"] += g
        d_h = (g @ p[f"{name}_w2"]) * (1.0 - hid ** 2)
        out[f"{name}_w1"] += np.outer(d_h, c.latent)
        out[f"{name}_b1"] += d_h
        d_latent += d_h @ p[f"{name}_w1"]

    if grads.t_res is not None or grads.s_res is not None:
        d6 = np.zeros(6)
        if grads.t_res is not None:
            d6[:3] = np.asarray(grads.t_res, dtype=np.float64) * c.pn_scale
        if grads.s_res is not None:
            d6[3:] = grads.s_res
        out["res_w2"] += np.outer(d6, c.e1)
        out["res_b2"] += d6
        d_e1 = (d6 @ p["res_w2"]) * (1.0 - c.e1 ** 2)
        out["res_w1"] += np.outer(d_e1, c.u)
        out["res_b1"] += d_e1
        d_stats = (d_e1 @ p["res_w1"])[: cfg.stat_width]
        d_s1 = np.broadcast_to(d_stats / len(c.s1), c.s1.shape)
        d_pre = d_s1 * (1.0 - c.s1 ** 2)
        out["pn_w"] += d_pre.T @ c.pn_in
        out["pn_b"] += d_pre.sum(axis=0)

    # scatter the pooled-latent gradient back into the object rows of h2
    if cfg.latent_pool == "max":
        d_h2[c.object_idx[c.pool_arg], np.arange(latent_w)] += d_latent
    else:
        d_h2[c.object_idx] += d_latent / len(c.object_idx)

    g2 = gconv_layer_backward(model.enc_params(2), c.cache2, d_h2)
    out["enc2_dirs"] += g2.directions
    out["enc2_w"] += g2.weights
    out["enc2_cw"] += g2.center_weights
    d_h1 = g2.features * (1.0 - c.a1 ** 2)
    g1 = gconv_layer_backward(model.enc_params(1), c.cache1, d_h1)
    out["enc1_dirs"] += g1.directions
    out["enc1_w"] += g1.weights
    out["enc1_cw"] += g1.center_weights
    return out


def predict_pose(model: ToyModel, cloud: PointCloud, category: str,
                 stats: CategoryStats, symmetry: SymmetrySpec | None = None):
    """Predict a full pose record from a scene cloud.

    Returns (PoseRecord, info dict). info["degenerate_rotation"] is True
    when the two predicted vectors were too close to parallel and the
    rotation fell back to the v1-only recovery. For circular symmetry the
    in-plane vector is ignored by construction.
    """
    fwd = forward(model, cloud, category, object_mask=None)
    translation = fwd.anchor + fwd.t_res
    size = np.maximum(stats.mean_size + fwd.s_res, SIZE_FLOOR)
    sym = symmetry if symmetry is not None else SymmetrySpec.none()
    degenerate = False
    n1 = np.linalg.norm(fwd.v1)
    if n1 <= 1e-6:
        raise DegenerateVectors("predicted v1 has (near-)zero norm")
    if sym.kind == "circular":
        rotation = _min_rotation_between(np.array([0.0, 0.0, 1.0]), fwd.v1 / n1)
    else:
        try:
            rotation = rotation_from_vectors(fwd.v1, fwd.v2)
        except DegenerateVectors:
            rotation = _min_rotation_between(np.array([0.0, 0.0, 1.0]), fwd.v1 / n1)
            degenerate = True
    pose = PoseRecord(rotation=rotation, translation=translation, size=size,
                      category=category, symmetry=sym)
    info = {
        "degenerate_rotation": degenerate,
        "n_object_points": int(len(fwd.object_idx)),
    }
    return pose, info


def save_model(model: ToyModel, path,
               stats: dict[str, CategoryStats] | None = None) -> None:
    """Write the model (and optional per-category size stats) to one file."""
    meta = asdict(model.config)
    meta["categories"] = list(meta["categories"])
    stats_meta = {
        cat: {"mean_size": [float(v) for v in s.mean_size], "count": s.count}
        for cat, s in (stats or {}).items()
    }
    save_layer_params(model.params, path,
                      meta={"toy_model": meta, "category_stats": stats_meta})


def load_model(path) -> tuple[ToyModel, dict[str, CategoryStats]]:
    params, meta = load_layer_params(path)
    cfg_dict = dict(meta["toy_model"])
    cfg_dict["categories"] = tuple(cfg_dict["categories"])
    stats = {
        cat: CategoryStats(np.array(d["mean_size"], dtype=np.float64),
                           int(d["count"]))
        for cat, d in meta.get("category_stats", {}).items()
    }
    return ToyModel(ToyModelConfig(**cfg_dict), params), stats
