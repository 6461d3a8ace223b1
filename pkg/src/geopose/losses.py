"""Pose regression losses with analytic gradients.

Four families:

- ``position_loss``: residual norm on the position vector.
- ``quaternion_loss``: residual norm between the (canonical) label
  quaternion and the unit-normalized raw prediction; the gradient is
  returned w.r.t. the raw 4-vector, chained through the normalization.
- ``beta_loss``: fixed linear combination  L_x + beta * L_q.
- ``homoscedastic_loss``: learned task weighting
  L_x exp(-s_x) + s_x + L_q exp(-s_q) + s_q  with s = log(sigma^2) as
  free parameters (gradients for them come back in ``grad_s``).
- ``reprojection_loss``: mean image-plane residual between scene points
  projected under the ground-truth and the predicted pose.

The functions here are the per-sample reference path, written directly on
top of ``geom``; training uses the batched kernels in ``kernels``, which
are cross-checked against these in the tests.

Orientation labels are canonicalized internally before the residual is
formed; raw predictions are never sign-flipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geom
from .errors import ConfigError
from .geom import Bounds, CameraIntrinsics, Pose, Quaternion
from .kernels import NORM_HUBER, NORM_L1, NORM_L2, NORM_TUKEY

__all__ = [
    "Norm",
    "HomoscedasticParams",
    "LossResult",
    "norm_eval",
    "position_loss",
    "quaternion_loss",
    "beta_loss",
    "homoscedastic_loss",
    "reprojection_loss",
]

# Behind-camera guard on projected depth for the reprojection loss.
DEFAULT_MIN_DEPTH = geom.VISIBLE_MIN_DEPTH

_NORM_CODES = {"l1": NORM_L1, "l2": NORM_L2, "huber": NORM_HUBER, "tukey": NORM_TUKEY}


@dataclass(frozen=True)
class Norm:
    """Regression norm: L1 (default), L2, Huber(delta) or Tukey(c).

    Huber's default delta=1.0 and Tukey's default c=4.685 are the usual
    robust-statistics choices.
    """

    kind: str = "l1"
    delta: float = 1.0
    c: float = 4.685

    def __post_init__(self):
        if self.kind not in _NORM_CODES:
            raise ConfigError(f"unknown norm kind {self.kind!r}")
        if self.delta <= 0.0 or self.c <= 0.0:
            raise ConfigError("norm parameters must be positive")

    @classmethod
    def l1(cls) -> "Norm":
        return cls("l1")

    @classmethod
    def l2(cls) -> "Norm":
        return cls("l2")

    @classmethod
    def huber(cls, delta: float = 1.0) -> "Norm":
        return cls("huber", delta=delta)

    @classmethod
    def tukey(cls, c: float = 4.685) -> "Norm":
        return cls("tukey", c=c)

    @property
    def code(self) -> int:
        return _NORM_CODES[self.kind]

    @property
    def param(self) -> float:
        return self.delta if self.kind == "huber" else self.c


@dataclass(frozen=True)
class HomoscedasticParams:
    """Learned log-variances of the two tasks, s = log(sigma^2)."""

    s_x: float = 0.0
    s_q: float = -3.0

    def __post_init__(self):
        if not (math.isfinite(self.s_x) and math.isfinite(self.s_q)):
            raise ConfigError("homoscedastic parameters must be finite")

    def to_array(self) -> np.ndarray:
        return np.array([self.s_x, self.s_q])


@dataclass
class LossResult:
    """Scalar loss with gradients w.r.t. the predicted pose.

    grad_quaternion_raw is the gradient w.r.t. the pre-normalization head
    output.  grad_s is present only for the homoscedastic loss.
    points_used is present only for the reprojection loss (size of the
    retained subset after exclusion).
    """

    value: float
    grad_position: np.ndarray
    grad_quaternion_raw: np.ndarray
    grad_s: Optional[np.ndarray] = None
    points_used: Optional[int] = None


def norm_eval(n: Norm, r) -> tuple[float, np.ndarray]:
    """Value and gradient of the residual norm of vector ``r``.

    L1 and the robust norms apply elementwise and sum; L2 is the vector
    norm.  Subgradient at kinks is 0 (L1 at 0, L2 at the origin, Tukey
    outside the cutoff), so the gradient is defined everywhere.
    """
    r = np.asarray(r, dtype=float)
    if n.kind == "l1":
        return float(np.abs(r).sum()), np.sign(r)
    if n.kind == "l2":
        val = float(np.linalg.norm(r))
        if val == 0.0:
            return 0.0, np.zeros_like(r)
        return val, r / val
    if n.kind == "huber":
        d = n.delta
        a = np.abs(r)
        inside = a <= d
        val = float(np.where(inside, 0.5 * r * r, d * (a - 0.5 * d)).sum())
        return val, np.where(inside, r, d * np.sign(r))
    d = n.c
    inside = np.abs(r) <= d
    t = 1.0 - (r / d) ** 2
    val = float(np.where(inside, d * d / 6.0 * (1.0 - t**3), d * d / 6.0).sum())
    return val, np.where(inside, r * t * t, 0.0)


def position_loss(x, x_hat, n: Norm = Norm.l1()) -> LossResult:
    """Residual norm between label position x and prediction x_hat."""
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    val, g = norm_eval(n, x - x_hat)
    return LossResult(val, -g, np.zeros(4))


def _normalize_raw(q_raw: np.ndarray) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(q_raw))
    if norm < 1e-300:
        raise ValueError("raw quaternion prediction has zero norm")
    if abs(norm - 1.0) <= 1e-12:
        # already unit: pass through so a bit-identical prediction gives a
        # bit-exact zero residual
        return q_raw, norm
    return q_raw / norm, norm


def _chain_through_normalization(grad_unit, unit, raw_norm):
    """Apply the normalization Jacobian (I - u u^T)/|raw| to an upstream
    gradient taken w.r.t. the unit quaternion."""
    return (grad_unit - np.dot(grad_unit, unit) * unit) / raw_norm


def quaternion_loss(q: Quaternion, q_hat_raw, n: Norm = Norm.l1()) -> LossResult:
    """Residual norm between the canonical unit label and the normalized
    raw prediction; gradient w.r.t. the raw 4-vector."""
    label = geom.canonicalize(geom.normalize(q)).to_array()
    q_hat_raw = np.asarray(q_hat_raw, dtype=float)
    unit, raw_norm = _normalize_raw(q_hat_raw)
    val, g = norm_eval(n, label - unit)
    grad_raw = _chain_through_normalization(-g, unit, raw_norm)
    return LossResult(val, np.zeros(3), grad_raw)


def beta_loss(
    x, q: Quaternion, x_hat, q_hat_raw, beta: float, n: Norm = Norm.l1()
) -> LossResult:
    """Fixed weighted sum of position and orientation losses.

    Typical tuned beta ranges reported for real scenes: roughly 120-750
    indoors and 250-2000 outdoors; it must be strictly positive.
    """
    if beta <= 0.0:
        raise ConfigError(f"beta must be positive, got {beta}")
    lx = position_loss(x, x_hat, n)
    lq = quaternion_loss(q, q_hat_raw, n)
    return LossResult(
        lx.value + beta * lq.value,
        lx.grad_position,
        beta * lq.grad_quaternion_raw,
    )


def homoscedastic_loss(
    x, q: Quaternion, x_hat, q_hat_raw, s: HomoscedasticParams, n: Norm = Norm.l1()
) -> LossResult:
    """Uncertainty-weighted sum with learned log-variances.

    value = L_x exp(-s_x) + s_x + L_q exp(-s_q) + s_q.  The exp keeps the
    effective 1/sigma^2 weights positive without any division that could
    hit zero.  Note the value itself may be negative once the s terms
    dominate; only the residual terms are nonnegative.
    """
    lx = position_loss(x, x_hat, n)
    lq = quaternion_loss(q, q_hat_raw, n)
    wx = math.exp(-s.s_x)
    wq = math.exp(-s.s_q)
    value = lx.value * wx + s.s_x + lq.value * wq + s.s_q
    grad_s = np.array([-lx.value * wx + 1.0, -lq.value * wq + 1.0])
    return LossResult(
        value,
        wx * lx.grad_position,
        wq * lq.grad_quaternion_raw,
        grad_s=grad_s,
    )


def reprojection_loss(
    pose_gt: Pose,
    x_hat,
    q_hat_raw,
    k: CameraIntrinsics,
    visible,
    n: Norm = Norm.l1(),
    bounds: Bounds = Bounds(),
    min_depth: float = DEFAULT_MIN_DEPTH,
) -> Optional[LossResult]:
    """Mean residual between projections under the true and predicted pose.

    ``visible`` holds the scene points observed for this sample.  Points
    are dropped when either depth is <= min_depth (behind-camera guard) or
    when the *predicted* projection leaves the bounds box.  Returns None
    when every point is excluded (sample-skipped signal); raises
    ``ValueError`` when ``visible`` is empty.
    """
    pts = np.asarray(visible, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("reprojection loss needs at least one visible point")
    x_hat = np.asarray(x_hat, dtype=float)
    q_hat_raw = np.asarray(q_hat_raw, dtype=float)
    unit, raw_norm = _normalize_raw(q_hat_raw)

    gt_pos = pose_gt.position
    gt_q = pose_gt.orientation.to_array()
    kmat = k.matrix

    value = 0.0
    grad_pos = np.zeros(3)
    grad_unit = np.zeros(4)
    used = 0
    for g in pts:
        ug, vg, wg = geom._project_arr(gt_pos, gt_q, kmat, g)
        if wg <= min_depth:
            continue
        up, vp, wp = geom._project_arr(x_hat, unit, kmat, g)
        if wp <= min_depth:
            continue
        if not bounds.contains(up, vp):
            continue
        val, gres = norm_eval(n, np.array([ug - up, vg - vp]))
        value += val
        jac = geom._project_grad_arr(x_hat, unit, kmat, g)
        upstream = -gres  # d residual / d (up, vp) = -I
        grad_pos += upstream @ jac[:, :3]
        grad_unit += upstream @ jac[:, 3:]
        used += 1
    if used == 0:
        return None
    value /= used
    grad_pos /= used
    grad_unit /= used
    grad_raw = _chain_through_normalization(grad_unit, unit, raw_norm)
    return LossResult(value, grad_pos, grad_raw, points_used=used)
