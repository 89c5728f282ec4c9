"""Training losses and their analytic gradients.

The reconstruction term is the two-sided sum-of-squared-distances Chamfer
(sums, not means, over both point sets). Translation and size are learned
as residuals against per-category mean sizes; their loss is the plain MSE
averaged over the three components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..core_geom import PointCloud, PoseRecord, as_vec3
from ..errors import EmptyInput, InvalidParameter, ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 0.001
    lambda_rec: float = 1.0
    lambda_rot: float = 0.001
    lambda_res: float = 1.0

    def __post_init__(self):
        for name in ("lambda_seg", "lambda_rec", "lambda_rot", "lambda_res"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise InvalidParameter(f"{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class LossParts:
    seg: float
    rec: float
    rot: float
    res: float


@dataclass(frozen=True)
class CategoryStats:
    mean_size: np.ndarray
    count: int


def _pts(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))


def chamfer_loss(pred, gt):
    """Two-sided Chamfer loss and its gradient w.r.t. the predicted points.

    L = sum_{x in gt} min_{y in pred} ||x - y||^2
      + sum_{y in pred} min_{x in gt} ||x - y||^2
    """
    p = _pts(pred)
    g = _pts(gt)
    if len(p) == 0 or len(g) == 0:
        raise EmptyInput("chamfer_loss needs nonempty point sets")
    loss, grad = kernels.chamfer_and_grad(p, g)
    return float(loss), grad


def segmentation_loss(logits, labels):
    """Mean softmax cross-entropy over points; returns (loss, dL/dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ShapeError(f"logits {z.shape} do not match {y.shape[0]} labels")
    if z.shape[0] == 0:
        raise EmptyInput("segmentation_loss needs at least one point")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise InvalidParameter("labels outside the class range")
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    prob = expz / expz.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.log(prob[np.arange(n), y] + 1e-300).mean())
    grad = prob
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def compute_category_stats(poses) -> dict[str, CategoryStats]:
    """Per-category mean size over ground-truth records."""
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for pose in poses:
        sums[pose.category] = sums.get(pose.category, np.zeros(3)) + pose.size
        counts[pose.category] = counts.get(pose.category, 0) + 1
    if not counts:
        raise EmptyInput("no poses to compute category statistics from")
    return {
        cat: CategoryStats(sums[cat] / counts[cat], counts[cat]) for cat in sums
    }


def residual_targets(object_points, gt_pose: PoseRecord, stats: CategoryStats):
    """Ground-truth residuals for one sample.

    translation residual: T_gt - mean(observed object points)
    size residual:        size_gt - category mean size
    """
    p = _pts(object_points)
    if len(p) == 0:
        raise EmptyInput("residual_targets needs observed object points")
    t_res = gt_pose.translation - p.mean(axis=0)
    s_res = gt_pose.size - stats.mean_size
    return t_res, s_res


def residual_loss(pred_t, pred_s, targets):
    """MSE (mean over the 3 components) of both residual heads, summed.

    Returns (loss, grad_t, grad_s).
    """
    t_tgt, s_tgt = targets
    pt = as_vec3(pred_t)
    ps = as_vec3(pred_s)
    dt = pt - as_vec3(t_tgt)
    ds = ps - as_vec3(s_tgt)
    loss = float((dt @ dt) / 3.0 + (ds @ ds) / 3.0)
    return loss, 2.0 * dt / 3.0, 2.0 * ds / 3.0


def total_loss(parts: LossParts, weights: LossWeights = LossWeights()) -> float:
    return float(
        weights.lambda_seg * parts.seg
        + weights.lambda_rec * parts.rec
        + weights.lambda_rot * parts.rot
        + weights.lambda_res * parts.res
    )
