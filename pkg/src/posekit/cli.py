"""Command-line interface: scripted pose pipelines on top of the library.

Subcommands: eval, augment, canonicalize, gen-synthetic, train-toy,
infer-toy. Every subcommand is deterministic given --seed (fallback: the
POSEKIT_SEED environment variable) and --threads 1.

Exit codes: 0 success, 2 input error (unreadable or malformed files, bad
flags, reflections), 3 numerical failure (degenerate predicted vectors,
empty predicted segmentation).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields, replace

import numpy as np

from .core_geom import (
    EX,
    EY,
    EZ,
    PoseRecord,
    SymmetrySpec,
    geodesic_rotation_distance,
    nearest_rotation,
    random_rotation,
)
from .decoupled_rotation import canonicalize_rotation, vectors_from_rotation
from .deform import BoxCage, DeformationSpec, apply_deformation, deform_in_scene, sample_random_deformation
from .errors import (
    DegenerateVectors,
    InvalidParameter,
    InvalidRotation,
    ParseError,
    PosekitError,
    SegmentationEmpty,
)
from .io_formats import (
    LOAD_ROTATION_TOL,
    DatasetSample,
    SyntheticShapeSpec,
    generate_synthetic_sample,
    read_dataset,
    read_pointcloud,
    read_poses,
    sample_model_surface,
    write_dataset,
    write_pointcloud,
    write_poses,
)
from .metrics import EvalOptions, evaluate
from .nets import (
    LossWeights,
    ToyModelConfig,
    TrainConfig,
    TrainSample,
    compute_category_stats,
    load_model,
    predict_pose,
    save_model,
    train_toy,
    write_loss_log,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

_BASES = ("box", "cylinder", "tapered_box")

# per-base extent layout: (y range in meters, x/y ratio range, z/x ratio
# range).  The ratio gaps keep axis roles recoverable from geometry alone:
# x is always the longer lateral axis and z the tallest, so a cloud never
# admits two extent labelings related by an undeclared axis swap.
_EXTENT_LAYOUT = {
    "box": ((0.05, 0.09), (1.3, 1.7), (1.4, 1.9)),
    "cylinder": ((0.06, 0.10), None, (1.6, 2.4)),
    "tapered_box": ((0.05, 0.09), (1.3, 1.7), (1.4, 1.9)),
}

_CATEGORY_SYMMETRY = {
    "box": SymmetrySpec.n_fold(2, EZ),
    "cylinder": SymmetrySpec.circular(EZ),
    "tapered_box": SymmetrySpec.n_fold(2, EZ),
}

_AXES = {"x": EX, "y": EY, "z": EZ}


def _fmt(x: float) -> str:
    return repr(float(x))


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("POSEKIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InvalidParameter(f"POSEKIT_SEED must be an integer, got {env!r}")
    return 0


def _nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _note_threads(args) -> None:
    if args.threads != 1:
        print("note: only --threads 1 is supported; running single-threaded",
              file=sys.stderr)


def _verbose(args, message: str) -> None:
    if args.verbose:
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args) -> int:
    _note_threads(args)
    pred = read_poses(args.pred)
    gt = read_poses(args.gt)
    report = evaluate(pred, gt, EvalOptions(iou_resolution=args.iou_res))
    print(report.format_table())
    if args.out is not None:
        with open(args.out, "w") as f:
            f.write(report.to_csv())
        _verbose(args, f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# augment


def _pick_pose(poses: dict[str, PoseRecord], wanted: str | None, path) -> tuple[str, PoseRecord]:
    if wanted is not None:
        if wanted not in poses:
            raise ParseError(f"no pose record with id {wanted!r}", path)
        return wanted, poses[wanted]
    if len(poses) != 1:
        raise InvalidParameter(
            f"pose file holds {len(poses)} records; pick one with --id"
        )
    return next(iter(poses.items()))


def _cmd_augment(args) -> int:
    _note_threads(args)
    cloud = read_pointcloud(args.in_path)
    poses = read_poses(args.pose)
    pose_id, pose = _pick_pose(poses, args.id, args.pose)
    if args.random:
        spec = sample_random_deformation(_resolve_seed(args))
    else:
        try:
            with open(args.spec) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, args.spec, e.lineno)
        spec = DeformationSpec.from_dict(raw)
    cage = BoxCage(pose.size)
    deformed, new_size = deform_in_scene(cloud, pose, cage, spec)
    write_pointcloud(deformed, args.out)
    out_pose = args.out_pose
    if out_pose is None:
        out_pose = os.path.splitext(str(args.out))[0] + "_pose.json"
    new_pose = replace(pose, size=new_size)
    write_poses({pose_id: new_pose}, out_pose,
                deformations={pose_id: spec.to_dict()})
    _verbose(args, f"wrote {args.out} and {out_pose}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# canonicalize


def _parse_rotation(text: str) -> np.ndarray:
    values = text.replace(",", " ").split()
    if len(values) != 9:
        raise InvalidParameter(f"--rotation needs 9 numbers, got {len(values)}")
    try:
        mat = np.array([float(v) for v in values], dtype=np.float64).reshape(3, 3)
    except ValueError:
        raise InvalidParameter(f"--rotation values must be numbers: {text!r}")
    if np.linalg.det(mat) <= 0.0:
        raise InvalidRotation("rotation has non-positive determinant (reflection?)")
    err = np.abs(mat.T @ mat - np.eye(3)).max()
    if err > LOAD_ROTATION_TOL:
        raise InvalidRotation(f"matrix is {err:.2e} from orthonormal (tolerance {LOAD_ROTATION_TOL})")
    return nearest_rotation(mat)


def _parse_symmetry(text: str) -> SymmetrySpec:
    """Parse kind[:n[:axis]]; the axis letter may stand alone for circular."""
    parts = text.split(":")
    kind = parts[0]
    rest = parts[1:]
    axis = EZ
    if rest and rest[-1] in _AXES:
        axis = _AXES[rest.pop()]
    if kind == "none":
        if rest:
            raise InvalidParameter(f"bad symmetry spec {text!r}")
        return SymmetrySpec.none()
    if kind == "circular":
        if rest:
            raise InvalidParameter(f"bad symmetry spec {text!r}")
        return SymmetrySpec.circular(axis)
    if kind == "n_fold":
        if len(rest) != 1:
            raise InvalidParameter(f"n_fold needs a fold count, e.g. n_fold:4:z (got {text!r})")
        try:
            n = int(rest[0])
        except ValueError:
            raise InvalidParameter(f"fold count must be an integer, got {rest[0]!r}")
        return SymmetrySpec.n_fold(n, axis)
    raise InvalidParameter(f"unknown symmetry kind {kind!r} (use none, circular or n_fold)")


def _cmd_canonicalize(args) -> int:
    _note_threads(args)
    rotation = _parse_rotation(args.rotation)
    sym = _parse_symmetry(args.symmetry)
    canonical = canonicalize_rotation(rotation, sym)
    vec = vectors_from_rotation(canonical)
    distance = geodesic_rotation_distance(canonical, np.eye(3))
    print("canonical_rotation:")
    for row in canonical:
        print(" ".join(_fmt(v) for v in row))
    print("v1: " + " ".join(_fmt(v) for v in vec.v1))
    print("v2: " + " ".join(_fmt(v) for v in vec.v2))
    print(f"distance_to_identity_deg: {_fmt(distance)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-synthetic


def _cmd_gen_synthetic(args) -> int:
    _note_threads(args)
    seed = _resolve_seed(args)
    bases = _BASES if args.base == "mixed" else (args.base,)
    samples = []
    for idx in range(args.count):
        base = bases[idx % len(bases)]
        rng = np.random.default_rng((seed, 9973, idx))
        (y_lo, y_hi), lateral, (z_lo, z_hi) = _EXTENT_LAYOUT[base]
        ey = rng.uniform(y_lo, y_hi)
        ex = ey if lateral is None else ey * rng.uniform(*lateral)
        ez = ex * rng.uniform(z_lo, z_hi)
        extents = np.array([ex, ey, ez])
        rotation = random_rotation(rng)
        translation = rng.uniform(-0.5, 0.5, size=3)
        sym = _CATEGORY_SYMMETRY[base]
        pose = PoseRecord(rotation=rotation, translation=translation,
                          size=extents, category=base, symmetry=sym)
        spec = SyntheticShapeSpec(
            base=base, extents=extents,
            points_per_sample=args.points,
            background_points=args.background,
            noise_sigma=args.noise,
            seed=(seed, 15485863, idx),
        )
        cloud, pose = generate_synthetic_sample(spec, pose)
        model_pts = sample_model_surface(spec, args.points, seed=(seed, 27644437, idx))
        if args.deform:
            dspec = sample_random_deformation((seed, 32452843, idx))
            cage = BoxCage(pose.size)
            cloud, new_size = deform_in_scene(cloud, pose, cage, dspec)
            model_pts = apply_deformation(model_pts, cage, dspec)
            pose = replace(pose, size=new_size)
        samples.append(DatasetSample(
            id=f"{base}_{idx:05d}", category=base, cloud=cloud, pose=pose,
            model_points=model_pts,
        ))
    categories = {b: _CATEGORY_SYMMETRY[b] for b in bases}
    write_dataset(args.out, samples, categories)
    _verbose(args, f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-toy / infer-toy


def _check_keys(obj: dict, allowed, where: str, path) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ParseError(f"unknown {where} keys: {', '.join(unknown)}", path)


def _load_train_file(path) -> tuple[dict, dict, dict]:
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno)
    if not isinstance(obj, dict):
        raise ParseError("training config must be a JSON object", path)
    _check_keys(obj, ("train", "model", "weights"), "config", path)
    train_kw = dict(obj.get("train", {}))
    model_kw = dict(obj.get("model", {}))
    weight_kw = dict(obj.get("weights", {}))
    _check_keys(train_kw, [f.name for f in dataclass_fields(TrainConfig)],
                "train config", path)
    model_fields = [f.name for f in dataclass_fields(ToyModelConfig)]
    if "categories" in model_kw:
        raise ParseError("model categories come from the dataset, not the config", path)
    _check_keys(model_kw, [f for f in model_fields if f != "categories"],
                "model config", path)
    _check_keys(weight_kw, [f.name for f in dataclass_fields(LossWeights)],
                "loss weights", path)
    for key in ("augment_scale_range", "augment_taper_range"):
        if key in train_kw:
            train_kw[key] = tuple(train_kw[key])
    return train_kw, model_kw, weight_kw


def _load_train_samples(data_dir, need_models: bool):
    samples, categories = read_dataset(data_dir, load_models=need_models)
    return [
        TrainSample(id=s.id, cloud=s.cloud, pose=s.pose, category=s.category,
                    model_points=s.model_points)
        for s in samples
    ], categories


def _cmd_train_toy(args) -> int:
    _note_threads(args)
    train_kw, model_kw, weight_kw = ({}, {}, {})
    if args.config is not None:
        train_kw, model_kw, weight_kw = _load_train_file(args.config)
    if args.seed is not None or "seed" not in train_kw:
        train_kw["seed"] = _resolve_seed(args)
    config = TrainConfig(**train_kw)
    weights = LossWeights(**weight_kw)
    need_models = model_kw.get("recon_target") == "complete"
    samples, _ = _load_train_samples(args.data, need_models)
    model_config = None
    if model_kw:
        categories = tuple(sorted({s.category for s in samples}))
        model_config = ToyModelConfig(categories=categories, **model_kw)
    _verbose(args, f"training on {len(samples)} samples, {config.max_epochs} epochs")
    model, logs = train_toy(samples, config, weights=weights, augment=args.augment,
                            model_config=model_config)
    stats = compute_category_stats([s.pose for s in samples])
    save_model(model, args.checkpoint, stats)
    if args.log is not None:
        write_loss_log(logs, args.log)
    _verbose(args, f"final loss {logs[-1].total!r}; wrote {args.checkpoint}")
    return EXIT_OK


def _cmd_infer_toy(args) -> int:
    _note_threads(args)
    model, stats = load_model(args.checkpoint)
    samples, categories = read_dataset(args.data)
    preds: dict[str, PoseRecord] = {}
    for s in samples:
        if s.category not in stats:
            raise InvalidParameter(
                f"dataset category {s.category!r} missing from checkpoint stats"
            )
        sym = categories.get(s.category, SymmetrySpec.none())
        record, info = predict_pose(model, s.cloud, s.category, stats[s.category], sym)
        if info["degenerate_rotation"]:
            _verbose(args, f"{s.id}: degenerate in-plane vector, used v1-only rotation")
        preds[s.id] = record
    write_poses(preds, args.out)
    _verbose(args, f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: $POSEKIT_SEED, else 0)")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="worker threads; only 1 is supported (bit-reproducible)")
    common.add_argument("--verbose", action="store_true",
                        help="progress notes on stderr")

    parser = argparse.ArgumentParser(
        prog="posekit",
        description="Category-level 6D pose toolkit: synthetic data, training, evaluation.",
        epilog="Exit codes: 0 success, 2 input error, 3 numerical failure "
               "(e.g. degenerate rotation vectors).",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("eval", parents=[common],
                       help="score predicted poses against ground truth")
    p.add_argument("--pred", required=True, help="predicted pose JSON file")
    p.add_argument("--gt", required=True, help="ground-truth pose JSON file")
    p.add_argument("--out", default=None, help="also write the report CSV here")
    p.add_argument("--iou-res", type=_positive_int, default=32,
                   help="IoU grid resolution per axis (min 32)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("augment", parents=[common],
                       help="apply a box-cage deformation to a labelled scene cloud")
    p.add_argument("--in", dest="in_path", required=True,
                   help="input cloud (.ply/.xyz) with object labels")
    p.add_argument("--pose", required=True, help="pose JSON file for the object")
    p.add_argument("--id", default=None,
                   help="pose record id (needed when the file has several)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", default=None,
                       help="JSON deformation spec (scale/taper_axis/taper_factor)")
    group.add_argument("--random", action="store_true",
                       help="draw a random deformation from --seed")
    p.add_argument("--out", required=True, help="output cloud path")
    p.add_argument("--out-pose", default=None,
                   help="updated pose JSON (default: <out>_pose.json)")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("canonicalize", parents=[common],
                       help="canonicalize a rotation under a symmetry group")
    p.add_argument("--rotation", required=True,
                   help="9 numbers, row-major 3x3 rotation")
    p.add_argument("--symmetry", default="none",
                   help="none | circular[:axis] | n_fold:N[:axis], axis in x/y/z (default z)")
    p.set_defaults(func=_cmd_canonicalize)

    p = sub.add_parser("gen-synthetic", parents=[common],
                       help="generate a labelled synthetic single-view dataset")
    p.add_argument("--count", type=_positive_int, required=True,
                   help="number of samples")
    p.add_argument("--base", required=True,
                   choices=list(_BASES) + ["mixed"],
                   help="shape base; 'mixed' cycles through all three")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--deform", action="store_true",
                   help="deform every sample with a random box-cage warp")
    p.add_argument("--points", type=_positive_int, default=256,
                   help="object surface points per sample")
    p.add_argument("--background", type=_nonnegative_int, default=48,
                   help="background clutter points per sample")
    p.add_argument("--noise", type=float, default=0.002,
                   help="gaussian surface noise sigma (meters)")
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("train-toy", parents=[common],
                       help="train the toy pose model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None,
                   help='JSON config: {"train": {...}, "model": {...}}')
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="output per-epoch loss CSV")
    p.add_argument("--augment", action="store_true",
                   help="online box-cage deformation augmentation")
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("infer-toy", parents=[common],
                       help="predict poses for a dataset with a trained checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint path")
    p.add_argument("--out", required=True, help="output predicted pose JSON")
    p.set_defaults(func=_cmd_infer_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DegenerateVectors, SegmentationEmpty) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PosekitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
