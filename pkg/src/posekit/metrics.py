"""Pose evaluation: 3D IoU, n-degree m-cm accuracy, ADD(-S), Chamfer report.

All accuracy thresholds are strict inequalities. Per-category results are
macro-averaged (every category weighs the same regardless of instance
count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core_geom import OrientedBox, PoseRecord, oriented_box_corners, pose_box
from .decoupled_rotation import symmetry_aware_rotation_error
from .errors import (
    CategoryMismatch,
    EmptyInput,
    InvalidParameter,
    MissingGroundTruth,
    ShapeError,
)

IOU_THRESHOLDS = (0.25, 0.5, 0.75)
POSE_THRESHOLDS = ((5.0, 5.0), (10.0, 5.0), (10.0, 10.0))  # (degrees, cm)

_SAME_ROTATION_ATOL = 1e-9


def iou_3d(box_a: OrientedBox, box_b: OrientedBox, resolution: int = 64) -> float:
    """Intersection-over-union of two oriented boxes.

    Boxes sharing a rotation (entrywise within 1e-9) use the exact
    axis-aligned closed form. Otherwise the volumes are estimated on a
    deterministic stratified grid (cell centers, no RNG) of
    ``resolution``^3 cells spanning the union's bounding box.
    """
    if resolution < 32:
        raise InvalidParameter(f"resolution must be >= 32, got {resolution}")
    if np.allclose(box_a.rotation, box_b.rotation, rtol=0.0, atol=_SAME_ROTATION_ATOL):
        # both boxes are axis-aligned in their shared rotated frame
        ca = box_a.rotation.T @ box_a.center
        cb = box_a.rotation.T @ box_b.center
        lo = np.maximum(ca - box_a.extents / 2.0, cb - box_b.extents / 2.0)
        hi = np.minimum(ca + box_a.extents / 2.0, cb + box_b.extents / 2.0)
        edges = np.maximum(hi - lo, 0.0)
        inter = float(np.prod(edges))
        union = box_a.volume + box_b.volume - inter
        return inter / union
    corners = np.vstack([oriented_box_corners(box_a), oriented_box_corners(box_b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    inter, union = kernels.box_pair_grid_counts(
        box_a.rotation, box_a.center, box_a.extents,
        box_b.rotation, box_b.center, box_b.extents,
        lo, hi, int(resolution),
    )
    if union == 0:
        return 0.0
    return inter / union


def pose_accuracy(pred: PoseRecord, gt: PoseRecord, n_deg: float, m_cm: float) -> bool:
    """True when rotation error < n_deg and translation error < m_cm (strict).

    The rotation error respects the ground-truth symmetry.
    """
    if pred.category != gt.category:
        raise CategoryMismatch(f"{pred.category!r} vs {gt.category!r}")
    rot_err = symmetry_aware_rotation_error(pred.rotation, gt.rotation, gt.symmetry)
    trans_err_cm = float(np.linalg.norm(pred.translation - gt.translation)) * 100.0
    return rot_err < n_deg and trans_err_cm < m_cm


def add_metric(model_points, pred: PoseRecord, gt: PoseRecord,
               symmetric: bool = False) -> float:
    """ADD (or ADD-S) in meters for one instance.

    ADD: mean distance between corresponding model points under the two
    poses. ADD-S: mean distance from each predicted-pose point to its
    nearest ground-truth-pose point (order-free, for symmetric shapes).
    """
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("add_metric needs model points")
    a = pts @ pred.rotation.T + pred.translation
    b = pts @ gt.rotation.T + gt.translation
    if symmetric:
        return float(kernels.min_dist_mean(a, b))
    return float(np.linalg.norm(a - b, axis=1).mean())


def chamfer_report(pred_clouds, gt_clouds, categories) -> dict[str, float]:
    """Per-category mean Chamfer between paired clouds, reported x 1e-3 m^2."""
    from .nets.losses import chamfer_loss

    if not (len(pred_clouds) == len(gt_clouds) == len(categories)):
        raise ShapeError("pred_clouds, gt_clouds and categories must align")
    if len(categories) == 0:
        raise EmptyInput("chamfer_report needs at least one pair")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for pred, gt, cat in zip(pred_clouds, gt_clouds, categories):
        loss, _ = chamfer_loss(pred, gt)
        sums[cat] = sums.get(cat, 0.0) + loss
        counts[cat] = counts.get(cat, 0) + 1
    return {cat: (sums[cat] / counts[cat]) / 1e-3 for cat in sums}


_METRIC_FIELDS = (
    "iou25", "iou50", "iou75",
    "acc_5d5cm", "acc_10d5cm", "acc_10d10cm",
    "mean_rot_deg", "mean_trans_m", "chamfer_e3",
)


@dataclass(frozen=True)
class CategoryMetrics:
    iou25: float
    iou50: float
    iou75: float
    acc_5d5cm: float
    acc_10d5cm: float
    acc_10d10cm: float
    mean_rot_deg: float
    mean_trans_m: float
    chamfer_e3: float
    count: int


@dataclass(frozen=True)
class EvalOptions:
    iou_resolution: int = 32
    # optional id -> (pred cloud, gt cloud) pairs feeding the Chamfer column
    chamfer_pairs: dict | None = None


@dataclass(frozen=True)
class EvalReport:
    per_category: dict[str, CategoryMetrics]
    average: CategoryMetrics

    def to_csv(self) -> str:
        lines = ["category," + ",".join(_METRIC_FIELDS)]
        for cat in sorted(self.per_category):
            lines.append(_csv_row(cat, self.per_category[cat]))
        lines.append(_csv_row("average", self.average))
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        header = ["category"] + list(_METRIC_FIELDS)
        rows = [header]
        for cat in sorted(self.per_category):
            rows.append(_table_row(cat, self.per_category[cat]))
        rows.append(_table_row("average", self.average))
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in rows
        )


def _csv_row(name: str, m: CategoryMetrics) -> str:
    vals = [getattr(m, f) for f in _METRIC_FIELDS]
    return name + "," + ",".join(f"{v:.6f}" for v in vals)


def _table_row(name: str, m: CategoryMetrics) -> list[str]:
    return [name] + [f"{getattr(m, f):.4f}" for f in _METRIC_FIELDS]


def evaluate(pred: dict[str, PoseRecord], gt: dict[str, PoseRecord],
             options: EvalOptions = EvalOptions()) -> EvalReport:
    """Evaluate predicted pose records against ground truth by id.

    Every prediction must have a ground-truth record (MissingGroundTruth
    otherwise); extra ground-truth records are ignored. The Chamfer column
    is NaN unless cloud pairs are supplied in the options.
    """
    if not pred:
        raise EmptyInput("no predictions to evaluate")
    missing = [pid for pid in pred if pid not in gt]
    if missing:
        raise MissingGroundTruth(missing)

    per_cat_rows: dict[str, list] = {}
    for pid, record in pred.items():
        truth = gt[pid]
        if record.category != truth.category:
            raise CategoryMismatch(
                f"id {pid!r}: predicted category {record.category!r} != {truth.category!r}"
            )
        iou = iou_3d(pose_box(record), pose_box(truth), options.iou_resolution)
        rot_err = symmetry_aware_rotation_error(
            record.rotation, truth.rotation, truth.symmetry
        )
        trans_err = float(np.linalg.norm(record.translation - truth.translation))
        accs = [
            rot_err < n and trans_err * 100.0 < m for n, m in POSE_THRESHOLDS
        ]
        chamfer = math.nan
        if options.chamfer_pairs is not None and pid in options.chamfer_pairs:
            from .nets.losses import chamfer_loss

            pc, gc = options.chamfer_pairs[pid]
            chamfer, _ = chamfer_loss(pc, gc)
        per_cat_rows.setdefault(truth.category, []).append(
            (iou, accs, rot_err, trans_err, chamfer)
        )

    per_category = {}
    for cat, rows in per_cat_rows.items():
        ious = np.array([r[0] for r in rows])
        accs = np.array([r[1] for r in rows], dtype=float)
        rots = np.array([r[2] for r in rows])
        trans = np.array([r[3] for r in rows])
        chams = [r[4] for r in rows if not math.isnan(r[4])]
        per_category[cat] = CategoryMetrics(
            iou25=float((ious > IOU_THRESHOLDS[0]).mean()),
            iou50=float((ious > IOU_THRESHOLDS[1]).mean()),
            iou75=float((ious > IOU_THRESHOLDS[2]).mean()),
            acc_5d5cm=float(accs[:, 0].mean()),
            acc_10d5cm=float(accs[:, 1].mean()),
            acc_10d10cm=float(accs[:, 2].mean()),
            mean_rot_deg=float(rots.mean()),
            mean_trans_m=float(trans.mean()),
            chamfer_e3=(sum(chams) / len(chams)) / 1e-3 if chams else math.nan,
            count=len(rows),
        )

    cats = sorted(per_category)
    def _macro(f):
        vals = [getattr(per_category[c], f) for c in cats]
        finite = [v for v in vals if not math.isnan(v)]
        return sum(finite) / len(finite) if finite else math.nan

    average = CategoryMetrics(
        **{f: _macro(f) for f in _METRIC_FIELDS},
        count=sum(per_category[c].count for c in cats),
    )
    return EvalReport(per_category, average)
