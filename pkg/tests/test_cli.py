
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from posekit.cli import main
from posekit.core_geom import SymmetrySpec, rotation_about_axis
from posekit.io_formats import (
    read_dataset,
    read_pointcloud,
    read_pose_deformations,
    read_poses,
    write_pointcloud,
    write_poses,
)
from posekit.nets.model import load_model, save_model


def rot_arg(mat):
    return " ".join(repr(float(v)) for v in np.asarray(mat).reshape(-1))


def gen(out, count=6, seed=5, extra=()):
    rc = main(["gen-synthetic", "--count", str(count), "--base", "mixed",
               "--out", str(out), "--points", "64", "--seed", str(seed),
               *extra])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# canonicalize


def test_canonicalize_four_fold(capsys):
    mat = rotation_about_axis([0, 0, 1], 100.0)
    rc = main(["canonicalize", "--rotation", rot_arg(mat),
               "--symmetry", "n_fold:4:z"])
    assert rc == 0
    out = capsys.readouterr().out
    line = [l for l in out.splitlines() if l.startswith("distance_to_identity")][0]
    assert abs(float(line.split(": ")[1]) - 10.0) < 1e-6


def test_canonicalize_rejects_bad_rotation(capsys):
    assert main(["canonicalize", "--rotation", "1 0 0"]) == 2
    reflection = np.diag([1.0, 1.0, -1.0])
    assert main(["canonicalize", "--rotation", rot_arg(reflection)]) == 2
    capsys.readouterr()


def test_canonicalize_rejects_bad_symmetry(capsys):
    mat = np.eye(3)
    assert main(["canonicalize", "--rotation", rot_arg(mat),
                 "--symmetry", "n_fold"]) == 2
    assert main(["canonicalize", "--rotation", rot_arg(mat),
                 "--symmetry", "spin:9"]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# gen-synthetic


def test_gen_synthetic_layout_and_extents(tmp_path):
    gen(tmp_path / "d")
    samples, categories = read_dataset(tmp_path / "d")
    assert [s.category for s in samples] == [
        "box", "cylinder", "tapered_box"] * 2
    assert categories["cylinder"].kind == "circular"
    assert categories["box"].kind == "n_fold" and categories["box"].n == 2
    assert categories["tapered_box"].n == 2
    for s in samples:
        ex, ey, ez = s.pose.size
        if s.category == "cylinder":
            assert ex == ey
        else:
            assert ex > 1.2 * ey
        assert ez > 1.3 * ex


def tree_files(root):
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*")
                  if p.is_file())


def trees_identical(a, b):
    names = tree_files(a)
    if names != tree_files(b):
        return False
    return all(
        (Path(a) / n).read_bytes() == (Path(b) / n).read_bytes() for n in names
    )


def test_gen_synthetic_deterministic(tmp_path):
    a = gen(tmp_path / "a", seed=9)
    b = gen(tmp_path / "b", seed=9)
    c = gen(tmp_path / "c", seed=10)
    assert trees_identical(a, b)
    assert not trees_identical(a, c)  # another seed must change the data


def test_gen_synthetic_deform_changes_sizes(tmp_path):
    plain = gen(tmp_path / "p", seed=4)
    warped = gen(tmp_path / "w", seed=4, extra=["--deform"])
    plain_s, _ = read_dataset(plain)
    warped_s, _ = read_dataset(warped)
    changed = sum(
        not np.array_equal(a.pose.size, b.pose.size)
        for a, b in zip(plain_s, warped_s)
    )
    assert changed >= len(plain_s) - 1  # identity draws are possible but rare


# ---------------------------------------------------------------------------
# augment


@pytest.fixture()
def scene(tmp_path):
    d = gen(tmp_path / "d", count=1, seed=3)
    samples, _ = read_dataset(d)
    s = samples[0]
    cloud_path = tmp_path / "scene.ply"
    pose_path = tmp_path / "scene_pose.json"
    write_pointcloud(s.cloud, cloud_path)
    write_poses({s.id: s.pose}, pose_path)
    return s, cloud_path, pose_path


def test_augment_with_spec(tmp_path, scene):
    s, cloud_path, pose_path = scene
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"scale": [1.2, 1.0, 0.9]}))
    out = tmp_path / "warped.ply"
    rc = main(["augment", "--in", str(cloud_path), "--pose", str(pose_path),
               "--spec", str(spec_path), "--out", str(out)])
    assert rc == 0
    warped = read_pointcloud(out)
    orig = read_pointcloud(cloud_path)
    bg = orig.labels == 0
    np.testing.assert_array_equal(warped.points[bg], orig.points[bg])
    assert not np.allclose(warped.points[~bg], orig.points[~bg])
    # companion pose file: new size plus the applied spec
    out_pose = tmp_path / "warped_pose.json"
    assert out_pose.exists()
    new_pose = read_poses(out_pose)[s.id]
    assert not np.array_equal(new_pose.size, s.pose.size)
    deforms = read_pose_deformations(out_pose)
    assert deforms[s.id]["scale"] == [1.2, 1.0, 0.9]


def test_augment_random_is_seeded(tmp_path, scene):
    _, cloud_path, pose_path = scene
    outs = []
    for name in ("r1.ply", "r2.ply"):
        out = tmp_path / name
        rc = main(["augment", "--in", str(cloud_path), "--pose", str(pose_path),
                   "--random", "--seed", "21", "--out", str(out)])
        assert rc == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    out3 = tmp_path / "r3.ply"
    main(["augment", "--in", str(cloud_path), "--pose", str(pose_path),
          "--random", "--seed", "22", "--out", str(out3)])
    assert out3.read_bytes() != outs[0]


def test_augment_needs_id_for_multi_record_files(tmp_path, scene, capsys):
    s, cloud_path, pose_path = scene
    multi = tmp_path / "multi.json"
    write_poses({"a": s.pose, "b": s.pose}, multi)
    args = ["augment", "--in", str(cloud_path), "--pose", str(multi),
            "--random", "--out", str(tmp_path / "x.ply")]
    assert main(args) == 2
    assert main([*args, "--id", "missing"]) == 2
    assert main([*args, "--id", "a"]) == 0
    capsys.readouterr()


# ---------------------------------------------------------------------------
# train-toy / infer-toy / eval pipeline


TINY_MODEL = dict(n_neighbors=4, mid_channels=4, latent_width=8, m_enc1=2,
                  m_enc2=2, recon_points=8, decoder_hidden=12, rot_hidden=6,
                  stat_width=6, residual_hidden=6)


def write_cfg(path, train=None, model=None, weights=None):
    obj = {}
    if train is not None:
        obj["train"] = train
    if model is not None:
        obj["model"] = model
    if weights is not None:
        obj["weights"] = weights
    Path(path).write_text(json.dumps(obj))
    return str(path)


def run_pipeline(tmp_path, capsys):
    data = gen(tmp_path / "data", count=9, seed=8)
    cfg = write_cfg(tmp_path / "cfg.json",
                    train={"max_epochs": 1, "batch_size": 4},
                    model=TINY_MODEL,
                    weights={"lambda_rot": 0.1})
    ckpt = tmp_path / "toy.ckpt"
    log = tmp_path / "loss.csv"
    rc = main(["train-toy", "--data", str(data), "--config", cfg,
               "--checkpoint", str(ckpt), "--log", str(log), "--seed", "0"])
    assert rc == 0
    pred = tmp_path / "pred.json"
    rc = main(["infer-toy", "--data", str(data), "--checkpoint", str(ckpt),
               "--out", str(pred)])
    assert rc == 0
    report = tmp_path / "report.csv"
    rc = main(["eval", "--pred", str(pred), "--gt", str(data / "poses.json"),
               "--out", str(report)])
    assert rc == 0
    table = capsys.readouterr().out
    return data, ckpt, log, pred, report, table


def test_pipeline_end_to_end(tmp_path, capsys):
    data, ckpt, log, pred, report, table = run_pipeline(tmp_path, capsys)
    assert log.read_text().splitlines()[0] == "epoch,lr,L_seg,L_rec,L_rot,L_res,total"
    preds = read_poses(pred)
    assert len(preds) == 9
    assert set(preds) == set(read_poses(data / "poses.json"))
    header = report.read_text().splitlines()[0]
    assert header.startswith("category,iou25,")
    assert "average" in table
    # checkpoint restores with the configured architecture and stats
    model, stats = load_model(ckpt)
    assert model.config.mid_channels == 4
    assert set(stats) == {"box", "cylinder", "tapered_box"}


def test_train_config_rejects_unknown_keys(tmp_path, capsys):
    data = gen(tmp_path / "data", count=3, seed=8)
    ckpt = str(tmp_path / "t.ckpt")
    bad = [
        write_cfg(tmp_path / "c1.json", train={"max_epoch": 1}),
        write_cfg(tmp_path / "c2.json", model={"categories": ["box"]}),
        write_cfg(tmp_path / "c3.json", weights={"lambda_pose": 1.0}),
    ]
    for cfg in bad:
        assert main(["train-toy", "--data", str(data), "--config", cfg,
                     "--checkpoint", ckpt]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{nope")
    assert main(["train-toy", "--data", str(data), "--config", str(broken),
                 "--checkpoint", ckpt]) == 2
    capsys.readouterr()


def test_eval_input_errors(tmp_path, capsys):
    data = gen(tmp_path / "data", count=3, seed=8)
    gt = data / "poses.json"
    assert main(["eval", "--pred", str(tmp_path / "nope.json"),
                 "--gt", str(gt)]) == 2
    # a prediction id with no ground truth
    poses = read_poses(gt)
    first = next(iter(poses))
    stray = tmp_path / "stray.json"
    write_poses({"ghost": poses[first]}, stray)
    assert main(["eval", "--pred", str(stray), "--gt", str(gt)]) == 2
    capsys.readouterr()


def test_infer_rejects_unknown_category(tmp_path, capsys):
    data = gen(tmp_path / "data", count=3, seed=8)
    cfg = write_cfg(tmp_path / "cfg.json", train={"max_epochs": 1}, model=TINY_MODEL)
    ckpt = tmp_path / "toy.ckpt"
    main(["train-toy", "--data", str(data), "--config", cfg,
          "--checkpoint", str(ckpt)])
    model, stats = load_model(ckpt)
    del stats["cylinder"]
    save_model(model, ckpt, stats)
    assert main(["infer-toy", "--data", str(data), "--checkpoint", str(ckpt),
                 "--out", str(tmp_path / "p.json")]) == 2
    capsys.readouterr()


def test_infer_degenerate_vectors_exit_code(tmp_path, capsys):
    data = gen(tmp_path / "data", count=3, seed=8)
    cfg = write_cfg(tmp_path / "cfg.json", train={"max_epochs": 1}, model=TINY_MODEL)
    ckpt = tmp_path / "toy.ckpt"
    main(["train-toy", "--data", str(data), "--config", cfg,
          "--checkpoint", str(ckpt)])
    model, stats = load_model(ckpt)
    # force a zero primary vector so pose recovery cannot proceed
    model.params["rot1_w2"][:] = 0.0
    model.params["rot1_b2"][:] = 0.0
    save_model(model, ckpt, stats)
    assert main(["infer-toy", "--data", str(data), "--checkpoint", str(ckpt),
                 "--out", str(tmp_path / "p.json")]) == 3
    assert "numerical failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# seed resolution and misc plumbing


def gen_without_seed_flag(out):
    return main(["gen-synthetic", "--count", "3", "--base", "mixed",
                 "--out", str(out), "--points", "64"])


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("POSEKIT_SEED", "9")
    assert gen_without_seed_flag(tmp_path / "env") == 0
    # --seed flag wins over the environment
    monkeypatch.setenv("POSEKIT_SEED", "1234")
    flag_dir = gen(tmp_path / "flag", count=3, seed=9)
    assert trees_identical(tmp_path / "env", flag_dir)


def test_seed_env_must_be_integer(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("POSEKIT_SEED", "not-a-number")
    assert gen_without_seed_flag(tmp_path / "d") == 2
    capsys.readouterr()


def test_threads_note(tmp_path, capsys):
    rc = main(["gen-synthetic", "--count", "3", "--base", "box",
               "--out", str(tmp_path / "d"), "--points", "64",
               "--seed", "1", "--threads", "2"])
    assert rc == 0
    assert "single-threaded" in capsys.readouterr().err


def test_module_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "posekit", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "Exit codes" in proc.stdout
    for name in ("eval", "augment", "canonicalize", "gen-synthetic",
                 "train-toy", "infer-toy"):
        assert name in proc.stdout


def test_missing_subcommand_is_usage_error():
    proc = subprocess.run(
        [sys.executable, "-m", "posekit"], capture_output=True, text=True,
    )
    assert proc.returncode == 2
