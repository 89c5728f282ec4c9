"""Time the numeric kernels under both backends and print a comparison table.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

The backend is fixed at import time, so the script re-invokes itself in a
subprocess per backend (POSEKIT_BACKEND=numpy / numba) and merges the
timings. Every workload gets one untimed warm-up call so numba JIT
compilation never lands in a measurement.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

REPEATS = {
    "knn_2000": 20,
    "gconv_fwd_512": 20,
    "gconv_bwd_512": 20,
    "chamfer_256x256": 50,
    "min_dist_mean_1000": 50,
    "iou_grid_64": 5,
}


def build_workloads():
    from posekit.core_geom import (
        OrientedBox,
        PointCloud,
        oriented_box_corners,
        random_rotation,
    )
    from posekit.gcn3d import (
        GcnLayerConfig,
        GcnLayerParams,
        gconv_layer_backward,
        gconv_layer_forward,
    )
    from posekit import kernels

    rng = np.random.default_rng(42)
    big = rng.normal(size=(2000, 3))
    cloud = PointCloud(rng.normal(size=(512, 3)))
    cfg = GcnLayerConfig(in_channels=5, out_channels=10, n_neighbors=6)
    params = GcnLayerParams.init(cfg, m=8, rng=rng)
    feats = rng.normal(size=(512, 5))
    upstream = rng.normal(size=(512, 10))
    _, cache = gconv_layer_forward(cloud, feats, cfg, params)
    a = rng.normal(size=(256, 3))
    b = rng.normal(size=(256, 3))
    p = rng.normal(size=(1000, 3))
    q = rng.normal(size=(1000, 3))
    box_a = OrientedBox(random_rotation(rng), rng.normal(size=3) * 0.01,
                        np.array([0.2, 0.3, 0.4]))
    box_b = OrientedBox(random_rotation(rng), rng.normal(size=3) * 0.01,
                        np.array([0.25, 0.28, 0.35]))
    corners = np.vstack([oriented_box_corners(box_a), oriented_box_corners(box_b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)

    return {
        "knn_2000": lambda: kernels.knn_indices(big, 6),
        "gconv_fwd_512": lambda: gconv_layer_forward(cloud, feats, cfg, params),
        "gconv_bwd_512": lambda: gconv_layer_backward(params, cache, upstream),
        "chamfer_256x256": lambda: kernels.chamfer_and_grad(a, b),
        "min_dist_mean_1000": lambda: kernels.min_dist_mean(p, q),
        "iou_grid_64": lambda: kernels.box_pair_grid_counts(
            box_a.rotation, box_a.center, box_a.extents,
            box_b.rotation, box_b.center, box_b.extents, lo, hi, 64),
    }


def run_child(backend: str) -> None:
    from posekit.kernels import backend_name

    if backend_name() != backend:
        print(json.dumps({"error": f"backend {backend} unavailable "
                                   f"(got {backend_name()})"}))
        return
    times = {}
    for name, fn in build_workloads().items():
        fn()  # warm-up; JIT compile and touch caches
        reps = REPEATS[name]
        start = time.perf_counter()
        for _ in range(reps):
            fn()
        times[name] = (time.perf_counter() - start) / reps
    print(json.dumps({"backend": backend, "times": times}))


def time_backend(backend: str) -> dict:
    env = dict(os.environ, POSEKIT_BACKEND=backend)
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--child", backend],
        capture_output=True, text=True, env=env,
    )
    if proc.returncode != 0:
        raise RuntimeError(f"{backend} run failed:\n{proc.stderr}")
    return json.loads(proc.stdout.splitlines()[-1])


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--child", default=None, help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.child is not None:
        run_child(args.child)
        return 0

    numpy_run = time_backend("numpy")
    numba_run = time_backend("numba")
    if "error" in numba_run:
        print(f"numba backend skipped: {numba_run['error']}")

    header = f"{'workload':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name in REPEATS:
        t_np = numpy_run["times"][name] * 1e3
        if "times" in numba_run:
            t_nb = numba_run["times"][name] * 1e3
            print(f"{name:<20} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{name:<20} {t_np:>10.3f} {'-':>10} {'-':>8}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
