"""Localization metrics: median/mean pose errors and joint-threshold accuracy.

Position error is the Euclidean distance between label and predicted
position (meters); orientation error is the geodesic angle between the
label quaternion and the normalized prediction (degrees), invariant to
quaternion sign.  Accuracy at (T_x, T_q) is the fraction of samples with
position error < T_x AND orientation error < T_q (strict inequalities).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import geom, kernels, model
from . import scene as scene_mod
from .geom import Bounds, Quaternion, angular_error_deg
from .losses import Norm
from .scene import Sample, Scene

__all__ = [
    "MetricReport",
    "evaluate",
    "mean_reprojection_error",
    "emit_csv",
    "read_metric_csv",
    "DEFAULT_THRESHOLDS",
]

# (T_x meters, T_q degrees) reporting defaults for the two scene presets.
DEFAULT_THRESHOLDS = {"room": (2.0, 5.0), "street": (10.0, 10.0)}


@dataclass
class MetricReport:
    ids: list
    position_errors_m: np.ndarray
    orientation_errors_deg: np.ndarray

    @property
    def median_position_m(self) -> float:
        return float(np.median(self.position_errors_m))

    @property
    def median_orientation_deg(self) -> float:
        return float(np.median(self.orientation_errors_deg))

    @property
    def mean_position_m(self) -> float:
        return float(np.mean(self.position_errors_m))

    @property
    def mean_orientation_deg(self) -> float:
        return float(np.mean(self.orientation_errors_deg))

    def accuracy_at(self, t_pos: float, t_ori: float) -> float:
        hit = (self.position_errors_m < t_pos) & (self.orientation_errors_deg < t_ori)
        return float(np.mean(hit))


def evaluate(
    state: model.RegressorState,
    samples: Sequence[Sample],
    ids: Optional[Sequence[str]] = None,
) -> MetricReport:
    """Per-sample pose errors of the regressor on labelled samples."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    obs = np.stack([s.observation for s in samples])
    fwd = model.forward(state, obs)
    pos_err = np.linalg.norm(
        fwd.position - np.stack([s.pose.position for s in samples]), axis=1
    )
    ori_err = np.array(
        [
            angular_error_deg(
                s.pose.orientation, Quaternion.from_array(fwd.quat_unit[i])
            )
            for i, s in enumerate(samples)
        ]
    )
    if ids is None:
        ids = [f"sample{i:06d}" for i in range(len(samples))]
    return MetricReport(list(ids), pos_err, ori_err)


def mean_reprojection_error(
    state: model.RegressorState,
    samples: Sequence[Sample],
    scene: Scene,
    norm: Norm = Norm.l1(),
    bounds: Bounds = Bounds(),
    max_points: int = 64,
    seed: int = 0,
) -> float:
    """Mean per-sample reprojection residual of the model's predictions.

    Uses the same seeded point subsampling as training, so two models
    evaluated with identical (samples, seed) see identical point sets.
    Samples whose retained set is empty are excluded from the mean; if
    every sample is excluded the result is +inf (the model projects all
    geometry out of view).
    """
    obs = np.stack([s.observation for s in samples])
    fwd = model.forward(state, obs)
    gt_pos = np.stack([s.pose.position for s in samples])
    gt_q = np.stack([s.pose.orientation.to_array() for s in samples])
    pts, counts = scene_mod.reproj_point_sets(samples, scene, max_points, seed)
    kmat = scene.intrinsics.matrix
    gt_uv, gt_w = kernels.project_batch(gt_pos, gt_q, kmat, pts)
    loss, _, _, used = kernels.reproj_loss_batch(
        gt_uv, gt_w, fwd.position, fwd.quat_raw, kmat, pts, counts,
        norm.code, norm.param, bounds.to_array(), geom.VISIBLE_MIN_DEPTH,
    )
    kept = used > 0
    if not np.any(kept):
        return math.inf
    return float(np.mean(loss[kept]))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_csv(report: MetricReport, path, thresholds=((2.0, 5.0),)) -> None:
    """Deterministic CSV: per-sample rows then summary footer rows."""
    lines = ["id,pos_err_m,ori_err_deg"]
    for i, sample_id in enumerate(report.ids):
        sid = str(sample_id)
        if "," in sid or sid.startswith("__"):
            raise ValueError(f"sample id {sid!r} not representable in the CSV")
        lines.append(
            f"{sid},{_fmt(report.position_errors_m[i])},{_fmt(report.orientation_errors_deg[i])}"
        )
    lines.append(f"__median__,{_fmt(report.median_position_m)},{_fmt(report.median_orientation_deg)}")
    lines.append(f"__mean__,{_fmt(report.mean_position_m)},{_fmt(report.mean_orientation_deg)}")
    for t_pos, t_ori in thresholds:
        tag = f"__accuracy_{t_pos:g}m_{t_ori:g}deg__"
        lines.append(f"{tag},{_fmt(report.accuracy_at(t_pos, t_ori))},")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metric_csv(path):
    """Parse back an emitted CSV; returns (ids, pos_err, ori_err) for the
    per-sample rows (summary rows are recomputable)."""
    ids, pos, ori = [], [], []
    with open(path, "r") as fh:
        header = fh.readline().strip()
        if header != "id,pos_err_m,ori_err_deg":
            raise ValueError(f"unexpected metric CSV header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, a, b = line.split(",")
            if sid.startswith("__"):
                continue
            ids.append(sid)
            pos.append(float(a))
            ori.append(float(b))
    return ids, np.asarray(pos), np.asarray(ori)
