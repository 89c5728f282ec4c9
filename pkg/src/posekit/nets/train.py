"""Training loop: Adam, step decay, teacher-forced losses, deformation augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core_geom import PointCloud, PoseRecord
from ..decoupled_rotation import (
    RotationLossConfig,
    canonicalize_rotation,
    rotation_loss_objective,
    symmetry_group,
    vectors_from_rotation,
)
from ..deform import BoxCage, FACTOR_RANGE, deform_in_scene, sample_random_deformation
from ..errors import EmptyInput, InvalidParameter, ShapeError, StateError
from .losses import (
    LossParts,
    LossWeights,
    chamfer_loss,
    compute_category_stats,
    residual_loss,
    residual_targets,
    segmentation_loss,
    total_loss,
)
from .model import HeadGrads, ToyModel, ToyModelConfig, backward, forward


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    halve_every: int = 10  # epochs between halvings of the learning rate
    max_epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    lambda_r: float = 1.0  # in-plane rotation weight for non-circular shapes
    augment_scale_range: tuple[float, float] = FACTOR_RANGE
    augment_taper_range: tuple[float, float] = FACTOR_RANGE

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise InvalidParameter("learning_rate must be positive")
        if self.halve_every < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise InvalidParameter("halve_every, max_epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class TrainSample:
    id: str
    cloud: PointCloud
    pose: PoseRecord
    category: str
    model_points: np.ndarray | None = None


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    seg: float
    rec: float
    rot: float
    res: float
    total: float


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.items()},
            {k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, g in grads.items():
        if name not in params:
            raise StateError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * 0.5 ** (epoch // config.halve_every)


def _project_and_renormalize_directions(model: ToyModel, grads: dict[str, np.ndarray]) -> None:
    # direction gradients live on the unit sphere: remove the radial part
    for name in ("enc1_dirs", "enc2_dirs"):
        d = model.params[name]
        g = grads[name]
        radial = (g * d).sum(axis=-1, keepdims=True)
        g -= radial * d


def _renormalize_directions(model: ToyModel) -> None:
    for name in ("enc1_dirs", "enc2_dirs"):
        d = model.params[name]
        d /= np.linalg.norm(d, axis=-1, keepdims=True)


def sample_losses_and_grads(model: ToyModel, sample: TrainSample,
                            stats, weights: LossWeights,
                            lambda_r: float = 1.0):
    """Forward + all four losses + full backward for one teacher-forced sample.

    Returns (LossParts, grads dict). The reconstruction target is the
    centered observed object cloud, or the centered complete model (rotated
    by the ground-truth pose) when the model was configured for it.
    """
    if sample.cloud.labels is None:
        raise EmptyInput("training samples need labelled clouds")
    mask = sample.cloud.labels != 0
    fwd = forward(model, sample.cloud, sample.category, object_mask=mask)

    l_seg, d_logits = segmentation_loss(fwd.seg_logits, (sample.cloud.labels != 0).astype(np.int64))

    obj_points = sample.cloud.points[fwd.object_idx]
    if model.config.recon_target == "complete":
        if sample.model_points is None:
            raise StateError("recon_target='complete' needs sample.model_points")
        target = sample.model_points @ sample.pose.rotation.T
        target = target - target.mean(axis=0)
    else:
        target = obj_points - fwd.anchor
    l_rec, d_recon = chamfer_loss(fwd.recon, target)

    sym = sample.pose.symmetry
    rot_cfg = RotationLossConfig.for_symmetry(sym, lambda_r)
    if sym.kind == "n_fold":
        # score against the nearest ground-truth orbit member: every member
        # shares the z image, so only the in-plane vector needs selecting
        candidates = symmetry_group(sample.pose.rotation, sym)
        scores = [float(fwd.v2 @ vectors_from_rotation(r).v2) for r in candidates]
        gt_rot = candidates[int(np.argmax(scores))]
    else:
        gt_rot = canonicalize_rotation(sample.pose.rotation, sym)
    gt_vec = vectors_from_rotation(gt_rot)
    l_rot, d_v1, d_v2 = rotation_loss_objective(fwd.v1, fwd.v2, gt_vec, rot_cfg)

    targets = residual_targets(obj_points, sample.pose, stats[sample.category])
    l_res, d_t, d_s = residual_loss(fwd.t_res, fwd.s_res, targets)

    parts = LossParts(l_seg, l_rec, l_rot, l_res)
    grads = backward(model, fwd, HeadGrads(
        seg_logits=weights.lambda_seg * d_logits,
        recon=weights.lambda_rec * d_recon,
        v1=weights.lambda_rot * d_v1,
        v2=weights.lambda_rot * d_v2,
        t_res=weights.lambda_res * d_t,
        s_res=weights.lambda_res * d_s,
    ))
    return parts, grads


def _augmented(sample: TrainSample, seed, scale_range, taper_range) -> TrainSample:
    spec = sample_random_deformation(seed, scale_range, taper_range)
    cage = BoxCage(sample.pose.size)
    cloud, new_size = deform_in_scene(sample.cloud, sample.pose, cage, spec)
    pose = PoseRecord(sample.pose.rotation, sample.pose.translation, new_size,
                      sample.pose.category, sample.pose.symmetry)
    return TrainSample(sample.id, cloud, pose, sample.category, sample.model_points)


def train_toy(samples: list[TrainSample], config: TrainConfig,
              weights: LossWeights = LossWeights(), augment: bool = False,
              model_config: ToyModelConfig | None = None,
              model: ToyModel | None = None):
    """Train the toy model. Returns (model, list of per-epoch EpochLog rows).

    Deterministic for a fixed config seed: shuffling, augmentation draws and
    parameter init all derive from it. With ``augment`` every sample is
    deformed by a fresh random box-cage deformation each epoch.
    """
    if not samples:
        raise EmptyInput("no training samples")
    if model is None:
        if model_config is None:
            categories = tuple(sorted({s.category for s in samples}))
            model_config = ToyModelConfig(categories=categories)
        model = ToyModel.init(model_config, seed=config.seed)
    stats = compute_category_stats([s.pose for s in samples])
    state = AdamState.for_params(model.params)
    logs: list[EpochLog] = []
    for epoch in range(config.max_epochs):
        lr = lr_for_epoch(config, epoch)
        order_rng = np.random.default_rng((config.seed, 7919, epoch))
        order = order_rng.permutation(len(samples))
        sums = np.zeros(5)
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc: dict[str, np.ndarray] | None = None
            for idx in batch:
                sample = samples[idx]
                if augment:
                    sample = _augmented(sample, (config.seed, 104729, epoch, int(idx)),
                                        config.augment_scale_range,
                                        config.augment_taper_range)
                parts, grads = sample_losses_and_grads(
                    model, sample, stats, weights, lambda_r=config.lambda_r
                )
                sums += (parts.seg, parts.rec, parts.rot, parts.res,
                         total_loss(parts, weights))
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            scale = 1.0 / len(batch)
            for k in acc:
                acc[k] *= scale
            _project_and_renormalize_directions(model, acc)
            adam_step(model.params, acc, state, lr)
            _renormalize_directions(model)
        means = sums / len(order)
        logs.append(EpochLog(epoch, lr, *(float(m) for m in means)))
    return model, logs


def write_loss_log(logs: list[EpochLog], path) -> None:
    with open(path, "w") as f:
        f.write("epoch,lr,L_seg,L_rec,L_rot,L_res,total\n")
        for row in logs:
            cells = [row.lr, row.seg, row.rec, row.rot, row.res, row.total]
            f.write(f"{row.epoch}," + ",".join(repr(float(c)) for c in cells) + "\n")
