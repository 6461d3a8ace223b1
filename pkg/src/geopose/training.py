"""Mini-batch ADAM training for the pose regressor.

Three loss modes, selected by the config's loss spec:

- ``BetaLossSpec``: fixed weighted sum  L_x + beta L_q.
- ``HomoscedasticLossSpec``: learned task weighting; the two log-variance
  scalars join the optimized parameter set.
- ``ReprojectionLossSpec``: scene-geometry reprojection residuals
  (requires the scene); samples whose retained point set is empty
  contribute zero to the batch and are counted in the report.

``two_step_train`` implements the recommended schedule: train with the
homoscedastic loss first, then fine-tune the same weights with the
reprojection loss (fresh optimizer state for the second phase).

Training stops at ``max_iterations`` or when the mean loss over the last
``plateau_window`` iterations improves by less than ``plateau_tol``
(relative) over the window before it.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import geom, kernels, metrics, model
from . import scene as scene_mod
from .errors import ConfigError, NumericsError
from .geom import Bounds
from .losses import Norm
from .scene import Sample, Scene

__all__ = [
    "BetaLossSpec",
    "HomoscedasticLossSpec",
    "ReprojectionLossSpec",
    "TrainConfig",
    "TrainReport",
    "TwoStepReport",
    "SweepRow",
    "adam_step",
    "train",
    "two_step_train",
    "beta_sweep",
    "save_report",
]


@dataclass(frozen=True)
class BetaLossSpec:
    beta: float = 500.0
    norm: Norm = field(default_factory=Norm.l1)

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class HomoscedasticLossSpec:
    s_x: float = 0.0
    s_q: float = -3.0
    norm: Norm = field(default_factory=Norm.l1)


@dataclass(frozen=True)
class ReprojectionLossSpec:
    norm: Norm = field(default_factory=Norm.l1)
    bounds: Bounds = field(default_factory=Bounds)
    min_depth: float = geom.VISIBLE_MIN_DEPTH


LossSpec = Union[BetaLossSpec, HomoscedasticLossSpec, ReprojectionLossSpec]


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec
    learning_rate: float = 1e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iterations: int = 5000
    plateau_window: int = 500
    plateau_tol: float = 1e-3
    seed: int = 0
    # Visible points kept per sample for the reprojection loss (seeded
    # subsample of the visible subset); bounds per-iteration cost.
    max_reproj_points: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.plateau_window < 1 or self.plateau_tol < 0.0:
            raise ConfigError("plateau window must be >= 1 and tol >= 0")
        if self.max_reproj_points < 1:
            raise ConfigError("max_reproj_points must be >= 1")


@dataclass
class TrainReport:
    loss_trace: np.ndarray
    iterations: int
    converged: bool
    wall_time_s: float
    final_s: Optional[np.ndarray] = None
    skipped_samples: int = 0


@dataclass
class TwoStepReport:
    phase1: TrainReport
    phase2: TrainReport


@dataclass(frozen=True)
class SweepRow:
    beta: float
    median_position_m: float
    median_orientation_deg: float


def adam_step(params, grads, moments, t: int, config: TrainConfig):
    """One functional ADAM update: returns (params', (m', v')).

    Standard bias-corrected update with the config's rates.  Non-finite
    gradients abort with ``NumericsError`` (training diagnostic).
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ConfigError("parameter and gradient shapes differ")
    if t < 1:
        raise ConfigError("ADAM step index starts at 1")
    if not np.all(np.isfinite(grads)):
        raise NumericsError(f"non-finite gradient at ADAM step {t}")
    m, v = moments
    new_params = params.copy()
    new_m = np.asarray(m, dtype=float).copy()
    new_v = np.asarray(v, dtype=float).copy()
    kernels.adam_update(
        new_params, grads, new_m, new_v, t,
        config.learning_rate, config.beta1, config.beta2, config.eps,
    )
    return new_params, (new_m, new_v)


def _label_arrays(samples: Sequence[Sample]):
    obs = np.stack([s.observation for s in samples])
    gt_pos = np.stack([s.pose.position for s in samples])
    gt_q = np.stack(
        [geom.canonicalize(s.pose.orientation).to_array() for s in samples]
    )
    return obs, gt_pos, gt_q


class _BatchStream:
    """Seeded shuffle-per-epoch batch index stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self._rng = np.random.default_rng([seed, 6])
        self._n = n
        self._batch = batch_size
        self._queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._queue.size < self._batch:
            self._queue = np.concatenate(
                [self._queue, self._rng.permutation(self._n)]
            )
        out = self._queue[: self._batch]
        self._queue = self._queue[self._batch :]
        return out


def _plateaued(trace: list, window: int, tol: float) -> bool:
    cur = float(np.mean(trace[-window:]))
    prev = float(np.mean(trace[-2 * window : -window]))
    return (prev - cur) < tol * max(abs(prev), 1e-12)


def train(
    state: model.RegressorState,
    samples: Sequence[Sample],
    config: TrainConfig,
    scene: Optional[Scene] = None,
) -> TrainReport:
    """Run mini-batch ADAM on ``state`` in place; returns the report."""
    if len(samples) == 0:
        raise ConfigError("no training samples")
    spec = config.loss
    obs, gt_pos, gt_q = _label_arrays(samples)
    if obs.shape[1] != state.config.input_dim:
        raise ConfigError(
            f"observation dim {obs.shape[1]} != model input_dim {state.config.input_dim}"
        )

    is_reproj = isinstance(spec, ReprojectionLossSpec)
    is_homosc = isinstance(spec, HomoscedasticLossSpec)
    if is_reproj:
        if scene is None:
            raise ConfigError("reprojection loss needs scene geometry")
        pts, counts = scene_mod.reproj_point_sets(
            samples, scene, config.max_reproj_points, config.seed
        )
        kmat = scene.intrinsics.matrix
        bounds_arr = spec.bounds.to_array()
        # label-pose projections never change during training
        gt_uv, gt_w = kernels.project_batch(gt_pos, gt_q, kmat, pts)

    theta = state.theta
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    s = np.array([spec.s_x, spec.s_q]) if is_homosc else None
    ms = np.zeros(2) if is_homosc else None
    vs = np.zeros(2) if is_homosc else None

    stream = _BatchStream(len(samples), config.batch_size, config.seed)
    trace: list[float] = []
    skipped_total = 0
    warned_all_skipped = False
    converged = False
    t0 = time.perf_counter()
    code, param = spec.norm.code, spec.norm.param

    for t in range(1, config.max_iterations + 1):
        idx = stream.next()
        fwd = model.forward(state, obs[idx])
        b_n = idx.size

        if is_reproj:
            loss_b, dpos, draw, used = kernels.reproj_loss_batch(
                gt_uv[idx], gt_w[idx], fwd.position, fwd.quat_raw,
                kmat, pts[idx], counts[idx],
                code, param, bounds_arr, spec.min_depth,
            )
            n_skipped = int((used == 0).sum())
            skipped_total += n_skipped
            if n_skipped == b_n and not warned_all_skipped:
                warned_all_skipped = True
                warnings.warn(
                    f"iteration {t}: every sample in the batch was skipped "
                    "(further occurrences counted silently)"
                )
            batch_loss = float(loss_b.sum()) / b_n
            g_pos = dpos / b_n
            g_raw = draw / b_n
        else:
            lx, lq, dpos, draw = kernels.pose_loss_batch(
                fwd.position, fwd.quat_raw, gt_pos[idx], gt_q[idx], code, param
            )
            if is_homosc:
                wx = np.exp(-s[0])
                wq = np.exp(-s[1])
                batch_loss = float(
                    np.mean(lx) * wx + s[0] + np.mean(lq) * wq + s[1]
                )
                g_pos = (wx / b_n) * dpos
                g_raw = (wq / b_n) * draw
                g_s = np.array(
                    [-float(np.mean(lx)) * wx + 1.0, -float(np.mean(lq)) * wq + 1.0]
                )
            else:
                batch_loss = float(np.mean(lx) + spec.beta * np.mean(lq))
                g_pos = dpos / b_n
                g_raw = (spec.beta / b_n) * draw

        if not np.isfinite(batch_loss):
            raise NumericsError(
                f"non-finite loss {batch_loss} at iteration {t}; training aborted"
            )
        grads = model.backward(state, fwd.tape, g_pos, g_raw)
        if not np.all(np.isfinite(grads)):
            raise NumericsError(f"non-finite gradient at iteration {t}; training aborted")
        kernels.adam_update(
            theta, grads, m, v, t,
            config.learning_rate, config.beta1, config.beta2, config.eps,
        )
        if is_homosc:
            kernels.adam_update(
                s, g_s, ms, vs, t,
                config.learning_rate, config.beta1, config.beta2, config.eps,
            )
        trace.append(batch_loss)

        w = config.plateau_window
        if t % w == 0 and t >= 2 * w and _plateaued(trace, w, config.plateau_tol):
            converged = True
            break

    return TrainReport(
        loss_trace=np.asarray(trace),
        iterations=len(trace),
        converged=converged,
        wall_time_s=time.perf_counter() - t0,
        final_s=s.copy() if is_homosc else None,
        skipped_samples=skipped_total,
    )


def two_step_train(
    state: model.RegressorState,
    samples: Sequence[Sample],
    scene: Scene,
    config1: TrainConfig,
    config2: TrainConfig,
) -> TwoStepReport:
    """Homoscedastic pretraining followed by reprojection fine-tuning."""
    if not isinstance(config1.loss, HomoscedasticLossSpec):
        raise ConfigError("two-step phase 1 must use the homoscedastic loss")
    if not isinstance(config2.loss, ReprojectionLossSpec):
        raise ConfigError("two-step phase 2 must use the reprojection loss")
    r1 = train(state, samples, config1, scene)
    r2 = train(state, samples, config2, scene)
    return TwoStepReport(r1, r2)


def beta_sweep(
    model_factory: Callable[[], model.RegressorState],
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample],
    beta_grid: Sequence[float],
    config: TrainConfig,
) -> list[SweepRow]:
    """Train one model per beta from identical initialization and report
    held-out median errors per grid point."""
    if len(beta_grid) == 0:
        raise ConfigError("beta grid must be nonempty")
    if any(b <= 0.0 for b in beta_grid):
        raise ConfigError("beta grid values must be positive")
    if not isinstance(config.loss, BetaLossSpec):
        raise ConfigError("beta_sweep needs a BetaLossSpec in the config")
    rows = []
    for beta in beta_grid:
        st = model_factory()
        cfg = replace(config, loss=replace(config.loss, beta=float(beta)))
        train(st, train_samples, cfg)
        report = metrics.evaluate(st, eval_samples)
        rows.append(
            SweepRow(
                float(beta),
                report.median_position_m,
                report.median_orientation_deg,
            )
        )
    return rows


def save_report(report: TrainReport, trace_path, checkpoint_ref: str = "") -> None:
    """CSV loss trace plus a small key-value summary next to it."""
    lines = ["iteration,loss"]
    for i, value in enumerate(report.loss_trace, start=1):
        lines.append(f"{i},{format(float(value), '.17g')}")
    with open(trace_path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    # wall time stays off the summary so identical (flags, seed) runs
    # produce byte-identical output files
    summary_path = str(trace_path) + ".summary"
    summary = [
        f"iterations {report.iterations}",
        f"converged {int(report.converged)}",
        f"skipped_samples {report.skipped_samples}",
    ]
    if report.final_s is not None:
        summary.append(f"s_x {format(report.final_s[0], '.17g')}")
        summary.append(f"s_q {format(report.final_s[1], '.17g')}")
    if checkpoint_ref:
        summary.append(f"checkpoint {checkpoint_ref}")
    with open(summary_path, "w", newline="\n") as fh:
        fh.write("\n".join(summary) + "\n")
