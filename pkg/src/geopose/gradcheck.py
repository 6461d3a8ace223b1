"""Finite-difference validation of every loss composed through the regressor.

For each draw a small randomized regressor, observation, labels and norm
are generated, then the analytic directional derivative of the scalar
loss w.r.t. the full parameter vector is compared against a central
finite difference along a random direction.  Draws whose residuals sit
within 1e-4 of a norm kink (or whose reprojection points sit near an
exclusion boundary) are redrawn, since the subgradient convention makes
finite differences meaningless there.

The reported number per loss is the maximum relative error
|analytic - fd| / max(|analytic|, |fd|, 1e-8) over all draws.
"""

from __future__ import annotations

import numpy as np

from . import geom, losses, model
from .geom import Bounds, CameraIntrinsics, Pose, Quaternion
from .losses import HomoscedasticParams, Norm

__all__ = ["run_all", "check_loss", "LOSS_NAMES", "FD_STEP", "KINK_MARGIN"]

LOSS_NAMES = ("quaternion", "beta", "homoscedastic", "reprojection")
FD_STEP = 1e-6
KINK_MARGIN = 1e-4
_NORM_CYCLE = (Norm.l1(), Norm.l2(), Norm.huber(), Norm.tukey())
_CONFIG_DIMS = dict(input_dim=9, hidden_layers=(12, 10))
_MAX_REDRAWS = 80


def _kink_adjacent(r: np.ndarray, norm: Norm, margin: float = KINK_MARGIN) -> bool:
    if norm.kind == "l1":
        return bool(np.any(np.abs(r) < margin))
    if norm.kind == "l2":
        return bool(np.linalg.norm(r) < margin)
    edge = norm.delta if norm.kind == "huber" else norm.c
    return bool(np.any(np.abs(np.abs(r) - edge) < margin))


def _random_unit_quat(rng) -> Quaternion:
    v = rng.normal(size=4)
    while np.linalg.norm(v) < 1e-6:  # pragma: no cover - measure zero
        v = rng.normal(size=4)
    return geom.canonicalize(Quaternion.from_array(v / np.linalg.norm(v)))


def _random_intrinsics(rng) -> CameraIntrinsics:
    fx, fy = rng.uniform(0.7, 1.5, size=2)
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    return CameraIntrinsics(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))


class _Draw:
    """One randomized (model, input, labels) instance for a given loss."""

    def __init__(self, loss_name: str, rng: np.random.Generator, norm: Norm):
        self.loss_name = loss_name
        self.norm = norm
        config = model.RegressorConfig(seed=int(rng.integers(2**31)), **_CONFIG_DIMS)
        self.state = model.init(config)
        self.state.theta += rng.normal(0.0, 0.2, size=config.n_params)
        self.obs = rng.normal(size=config.input_dim)
        self.gt_pos = rng.normal(size=3)
        self.gt_q = _random_unit_quat(rng)
        self.s = HomoscedasticParams(*rng.normal(0.0, 1.0, size=2))
        self.n_extra = 2 if loss_name == "homoscedastic" else 0
        self.s_vec = self.s.to_array()
        if loss_name == "reprojection":
            self._build_reproj_instance(rng)

    def _build_reproj_instance(self, rng):
        # Points are planted in front of the *predicted* camera so the
        # retained subset is nonempty; the ground-truth pose is a nearby
        # perturbation of the prediction.
        fwd = model.forward(self.state, self.obs)
        self.k = _random_intrinsics(rng)
        self.bounds = Bounds()
        pred_pos = fwd.position
        pred_unit = fwd.quat_raw / np.linalg.norm(fwd.quat_raw)
        r_pred = geom._rotmat(pred_unit)
        k_inv = np.linalg.inv(self.k.matrix)
        pts = []
        for _ in range(6):
            u, v = rng.uniform(-0.7, 0.7, size=2)
            w = rng.uniform(1.5, 3.0)
            cam = k_inv @ np.array([u * w, v * w, w])
            pts.append(r_pred.T @ (cam - pred_pos))
        self.points = np.array(pts)
        gt_pos = pred_pos + rng.normal(0.0, 0.1, size=3)
        gt_q4 = pred_unit + rng.normal(0.0, 0.05, size=4)
        gt_q = geom.canonicalize(Quaternion.from_array(gt_q4 / np.linalg.norm(gt_q4)))
        self.pose_gt = Pose(gt_pos, gt_q)

    # -- parameter vector = model theta (+ s for the homoscedastic loss) --

    def param_vector(self) -> np.ndarray:
        if self.n_extra:
            return np.concatenate([self.state.theta, self.s_vec])
        return self.state.theta.copy()

    def _eval(self, vec: np.ndarray):
        theta = vec[: self.state.config.n_params]
        st = model.RegressorState(self.state.config, theta.copy())
        fwd = model.forward(st, self.obs)
        if self.loss_name == "quaternion":
            res = losses.quaternion_loss(self.gt_q, fwd.quat_raw, self.norm)
        elif self.loss_name == "beta":
            res = losses.beta_loss(
                self.gt_pos, self.gt_q, fwd.position, fwd.quat_raw, 500.0, self.norm
            )
        elif self.loss_name == "homoscedastic":
            s = HomoscedasticParams(vec[-2], vec[-1])
            res = losses.homoscedastic_loss(
                self.gt_pos, self.gt_q, fwd.position, fwd.quat_raw, s, self.norm
            )
        else:
            res = losses.reprojection_loss(
                self.pose_gt, fwd.position, fwd.quat_raw, self.k,
                self.points, self.norm, self.bounds,
            )
            if res is None:
                raise _AllExcluded()
        return res, st, fwd

    def value(self, vec: np.ndarray) -> float:
        res, _, _ = self._eval(vec)
        return res.value

    def analytic_gradient(self) -> np.ndarray:
        res, st, fwd = self._eval(self.param_vector())
        g_theta = model.backward(
            st, fwd.tape, res.grad_position, res.grad_quaternion_raw
        )
        if self.n_extra:
            return np.concatenate([g_theta, res.grad_s])
        return g_theta

    def is_kink_adjacent(self) -> bool:
        res, _, fwd = self._eval(self.param_vector())
        unit = fwd.quat_raw / np.linalg.norm(fwd.quat_raw)
        if self.loss_name == "quaternion":
            return _kink_adjacent(self.gt_q.to_array() - unit, self.norm)
        if self.loss_name in ("beta", "homoscedastic"):
            return _kink_adjacent(
                self.gt_pos - fwd.position, self.norm
            ) or _kink_adjacent(self.gt_q.to_array() - unit, self.norm)
        return self._reproj_near_boundary(fwd, unit)

    def _reproj_near_boundary(self, fwd, unit) -> bool:
        b = self.bounds
        for g in self.points:
            ug, vg, wg = geom._project_arr(
                self.pose_gt.position, self.pose_gt.orientation.to_array(),
                self.k.matrix, g,
            )
            up, vp, wp = geom._project_arr(fwd.position, unit, self.k.matrix, g)
            # exclusion boundaries: behind-camera depth guard and box edges
            if abs(wg - losses.DEFAULT_MIN_DEPTH) < 1e-3:
                return True
            if abs(wp - losses.DEFAULT_MIN_DEPTH) < 1e-3:
                return True
            near_edge = (
                abs(up - b.u_min) < KINK_MARGIN
                or abs(up - b.u_max) < KINK_MARGIN
                or abs(vp - b.v_min) < KINK_MARGIN
                or abs(vp - b.v_max) < KINK_MARGIN
            )
            if near_edge:
                return True
            retained = (
                wg > losses.DEFAULT_MIN_DEPTH
                and wp > losses.DEFAULT_MIN_DEPTH
                and b.contains(up, vp)
            )
            if retained and _kink_adjacent(np.array([ug - up, vg - vp]), self.norm):
                return True
        return False


class _AllExcluded(Exception):
    pass


def check_loss(
    loss_name: str, n_draws: int = 1000, seed: int = 0, step: float = FD_STEP
) -> float:
    """Max relative FD error of ``loss_name`` over ``n_draws`` draws."""
    if loss_name not in LOSS_NAMES:
        raise ValueError(f"unknown loss {loss_name!r}; choose from {LOSS_NAMES}")
    loss_code = LOSS_NAMES.index(loss_name)
    worst = 0.0
    for i in range(n_draws):
        rng = np.random.default_rng([seed, loss_code, i])
        norm = _NORM_CYCLE[i % len(_NORM_CYCLE)]
        for _ in range(_MAX_REDRAWS):
            try:
                draw = _Draw(loss_name, rng, norm)
                if not draw.is_kink_adjacent():
                    break
            except _AllExcluded:
                continue
        else:
            raise RuntimeError(f"could not find a kink-free draw for {loss_name}")
        vec = draw.param_vector()
        grad = draw.analytic_gradient()
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-12:
            continue
        d = rng.normal(size=vec.size)
        d /= np.linalg.norm(d)
        # keep the directional derivative well away from zero so FD
        # roundoff cannot dominate the comparison
        if abs(grad @ d) < 0.05 * gnorm:
            d = d + grad / gnorm
            d /= np.linalg.norm(d)
        analytic = float(grad @ d)
        try:
            fd = (draw.value(vec + step * d) - draw.value(vec - step * d)) / (2 * step)
        except _AllExcluded:  # pragma: no cover - excluded by boundary margins
            continue
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst


def run_all(n_draws: int = 1000, seed: int = 0, step: float = FD_STEP) -> dict:
    """FD-check every loss; returns {loss_name: max relative error}."""
    return {name: check_loss(name, n_draws, seed, step) for name in LOSS_NAMES}
