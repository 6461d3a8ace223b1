"""Benchmark the numba kernels against their pure-NumPy fallbacks.

Run: python benchmarks/bench_kernels.py [--batch 64] [--points 64] [--runs 200]

Times each hot kernel under both backends and an end-to-end training
iteration (forward + loss + backward + ADAM) for the beta and the
reprojection losses.
"""

from __future__ import annotations

import argparse
import time
import warnings

import numpy as np

from geopose import kernels, model, scene, training
from geopose.backend import HAS_NUMBA
from geopose.geom import Bounds
from geopose.losses import Norm


def _time(fn, runs, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return np.mean(times) * 1e6, np.std(times) * 1e6  # microseconds


def _report(name, numba_fn, numpy_fn, runs):
    mean_nb, std_nb = _time(numba_fn, runs)
    mean_np, std_np = _time(numpy_fn, runs)
    speedup = mean_np / mean_nb if mean_nb > 0 else float("inf")
    print(
        f"{name:<24} numba {mean_nb:9.1f} +- {std_nb:7.1f} us   "
        f"numpy {mean_np:9.1f} +- {std_np:7.1f} us   speedup {speedup:5.2f}x"
    )


def bench_kernels(b, p, runs):
    rng = np.random.default_rng(0)
    gt_pos = rng.normal(0, 1, (b, 3))
    gt_q = rng.normal(size=(b, 4))
    gt_q /= np.linalg.norm(gt_q, axis=1, keepdims=True)
    pred_pos = gt_pos + rng.normal(0, 0.1, (b, 3))
    pred_qraw = gt_q + rng.normal(0, 0.1, (b, 4))
    kmat = np.eye(3)
    pts = rng.normal(0, 1, (b, p, 3)) + np.array([0, 0, 4.0])
    counts = np.full(b, p, dtype=np.int64)
    norm = Norm.l1()
    bounds = Bounds().to_array()
    gt_uv, gt_w = kernels._NUMPY_IMPL["project_batch"](gt_pos, gt_q, kmat, pts)

    nb, npy = kernels._NUMBA_IMPL, kernels._NUMPY_IMPL
    _report(
        f"project_batch {b}x{p}",
        lambda: nb["project_batch"](gt_pos, gt_q, kmat, pts),
        lambda: npy["project_batch"](gt_pos, gt_q, kmat, pts),
        runs,
    )
    _report(
        f"pose_loss_batch {b}",
        lambda: nb["pose_loss_batch"](pred_pos, pred_qraw, gt_pos, gt_q, norm.code, norm.param),
        lambda: npy["pose_loss_batch"](pred_pos, pred_qraw, gt_pos, gt_q, norm.code, norm.param),
        runs,
    )
    args = (gt_uv, gt_w, pred_pos, pred_qraw, kmat, pts, counts, norm.code, norm.param, bounds, 0.01)
    _report(
        f"reproj_loss_batch {b}x{p}",
        lambda: nb["reproj_loss_batch"](*args),
        lambda: npy["reproj_loss_batch"](*args),
        runs,
    )
    theta = rng.normal(size=8000)
    grad = rng.normal(size=8000)
    m1, v1 = np.zeros(8000), np.zeros(8000)
    m2, v2 = np.zeros(8000), np.zeros(8000)
    _report(
        "adam_update 8k params",
        lambda: nb["adam_update"](theta, grad, m1, v1, 5, 1e-3, 0.9, 0.999, 1e-8),
        lambda: npy["adam_update"](theta, grad, m2, v2, 5, 1e-3, 0.9, 0.999, 1e-8),
        runs,
    )


def bench_train_iteration(runs):
    scn = scene.room_scene(seed=1, n_points=500, n_anchors=16)
    samples = scene.sample_poses(scn, 256, seed=2, split="train")
    mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=0)

    import geopose.kernels as K

    results = {}
    for backend, impl in (("numba", K._NUMBA_IMPL), ("numpy", K._NUMPY_IMPL)):
        saved = {name: getattr(K, name) for name in impl}
        for name, fn in impl.items():
            setattr(K, name, fn)
        try:
            for loss_name, spec in (
                ("beta", training.BetaLossSpec()),
                ("reproj", training.ReprojectionLossSpec()),
            ):
                cfg = training.TrainConfig(
                    loss=spec, learning_rate=1e-3, max_iterations=runs, seed=3,
                    plateau_window=10**9 // 2, plateau_tol=0.0,
                )
                # warmup run absorbs JIT compilation / cache loading
                training.train(model.init(mcfg), samples, cfg, scn)
                st = model.init(mcfg)
                t0 = time.perf_counter()
                training.train(st, samples, cfg, scn)
                per_iter = (time.perf_counter() - t0) / runs * 1e6
                results.setdefault(loss_name, {})[backend] = per_iter
        finally:
            for name, fn in saved.items():
                setattr(K, name, fn)
    for loss_name, by_backend in results.items():
        speedup = by_backend["numpy"] / by_backend["numba"]
        print(
            f"train iteration ({loss_name:<6}) numba {by_backend['numba']:9.1f} us   "
            f"numpy {by_backend['numpy']:9.1f} us   speedup {speedup:5.2f}x"
        )


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--points", type=int, default=64)
    parser.add_argument("--runs", type=int, default=200)
    args = parser.parse_args()
    if not HAS_NUMBA:
        print("numba not installed; nothing to compare")
        return
    print(f"batch={args.batch} points={args.points} runs={args.runs}")
    bench_kernels(args.batch, args.points, args.runs)
    with warnings.catch_warnings():
        # an untrained net projects most points out of view early on
        warnings.simplefilter("ignore")
        bench_train_iteration(args.runs)


if __name__ == "__main__":
    main()
