import math

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.spatial.transform import Rotation

from geopose import geom, losses
from geopose.errors import ConfigError
from geopose.geom import Bounds, CameraIntrinsics, Pose, Quaternion
from geopose.losses import (
    HomoscedasticParams,
    Norm,
    beta_loss,
    homoscedastic_loss,
    norm_eval,
    position_loss,
    quaternion_loss,
    reprojection_loss,
)

from conftest import central_diff, random_intrinsics, random_pose, random_unit_quat

ALL_NORMS = [Norm.l1(), Norm.l2(), Norm.huber(), Norm.tukey()]


def _away_from_kinks(r, norm, margin=1e-3):
    r = np.atleast_1d(r)
    if norm.kind == "l1":
        return np.all(np.abs(r) > margin)
    if norm.kind == "l2":
        return np.linalg.norm(r) > margin
    edge = norm.delta if norm.kind == "huber" else norm.c
    return np.all(np.abs(np.abs(r) - edge) > margin)


class TestNormEval:
    def test_l1_sum_of_magnitudes(self):
        val, grad = norm_eval(Norm.l1(), [1, -2, 3])
        assert val == 6.0
        np.testing.assert_array_equal(grad, [1, -1, 1])

    def test_l2_345_triangle(self):
        val, grad = norm_eval(Norm.l2(), [3, 4])
        assert val == 5.0
        np.testing.assert_allclose(grad, [0.6, 0.8], rtol=0)

    def test_huber_quadratic_branch(self):
        val, grad = norm_eval(Norm.huber(1.0), [0.5])
        assert val == 0.125
        assert grad[0] == 0.5

    def test_huber_linear_branch(self):
        val, grad = norm_eval(Norm.huber(1.0), [-3.0])
        assert val == 1.0 * (3.0 - 0.5)
        assert grad[0] == -1.0

    def test_tukey_saturates(self):
        c = 4.685
        val, grad = norm_eval(Norm.tukey(c), [10.0])
        assert val == c * c / 6.0
        assert grad[0] == 0.0

    def test_subgradients_at_kinks(self):
        assert norm_eval(Norm.l1(), [0.0])[1][0] == 0.0
        assert np.all(norm_eval(Norm.l2(), [0.0, 0.0])[1] == 0.0)

    def test_gradients_match_fd(self, rng):
        for norm in ALL_NORMS:
            checked = 0
            while checked < 200:
                r = rng.normal(0.0, 2.0, size=4)
                if not _away_from_kinks(r, norm):
                    continue
                checked += 1
                _, grad = norm_eval(norm, r)
                fd = central_diff(lambda x: norm_eval(norm, x)[0], r)
                np.testing.assert_allclose(grad, fd, atol=1e-6)

    def test_invalid_params_rejected(self):
        with pytest.raises(ConfigError):
            Norm.huber(0.0)
        with pytest.raises(ConfigError):
            Norm("nope")


class TestPositionLoss:
    def test_zero_residual(self):
        res = position_loss([1, 2, 3], [1, 2, 3])
        assert res.value == 0.0

    def test_l1_example(self):
        res = position_loss([1, 0, 0], [0, 0, 0], Norm.l1())
        assert res.value == 1.0
        np.testing.assert_array_equal(res.grad_position, [-1, 0, 0])

    def test_l2_example(self):
        res = position_loss([1, 1, 1], [0, 0, 0], Norm.l2())
        assert abs(res.value - math.sqrt(3)) <= 1e-15


def _unit_quat_with_l1_residual(target):
    """Unit quaternion at L1 distance ``target`` from the identity label."""
    t = brentq(lambda a: (1 - math.cos(a)) + abs(math.sin(a)) - target, 0, 1.5, xtol=1e-15)
    return np.array([math.cos(t), math.sin(t), 0.0, 0.0])


class TestQuaternionLoss:
    def test_scale_invariance_zero(self, rng):
        q = geom.canonicalize(random_unit_quat(rng))
        res = quaternion_loss(q, 2.0 * q.to_array())
        assert res.value <= 1e-15

    def test_l1_example(self):
        res = quaternion_loss(Quaternion(1, 0, 0, 0), [0, 1, 0, 0], Norm.l1())
        assert res.value == 2.0

    def test_positive_rescaling_invariance(self, rng):
        for _ in range(50):
            q = geom.canonicalize(random_unit_quat(rng))
            raw = rng.normal(size=4)
            t = 10 ** rng.uniform(-2, 2)
            a = quaternion_loss(q, raw)
            b = quaternion_loss(q, t * raw)
            assert abs(a.value - b.value) <= 1e-12 * max(1.0, a.value)

    def test_gradient_annihilates_radial_direction(self, rng):
        for _ in range(100):
            q = geom.canonicalize(random_unit_quat(rng))
            raw = rng.normal(size=4)
            res = quaternion_loss(q, raw)
            assert abs(np.dot(res.grad_quaternion_raw, raw)) <= 1e-12

    def test_gradient_matches_fd(self, rng):
        for norm in ALL_NORMS:
            checked = 0
            while checked < 100:
                q = geom.canonicalize(random_unit_quat(rng))
                raw = rng.normal(size=4)
                unit = raw / np.linalg.norm(raw)
                if not _away_from_kinks(q.to_array() - unit, norm):
                    continue
                checked += 1
                res = quaternion_loss(q, raw, norm)
                fd = central_diff(lambda x: quaternion_loss(q, x, norm).value, raw)
                np.testing.assert_allclose(res.grad_quaternion_raw, fd, atol=1e-5)

    def test_zero_raw_rejected(self):
        with pytest.raises(ValueError):
            quaternion_loss(Quaternion.identity(), [0, 0, 0, 0])


class TestBetaLoss:
    def test_perfect_prediction(self, rng):
        q = geom.canonicalize(random_unit_quat(rng))
        x = rng.normal(size=3)
        res = beta_loss(x, q, x, q.to_array(), 500.0)
        assert res.value <= 1e-12

    def test_weighted_sum_example(self):
        # L_x = 1, L_q = 0.01, beta = 500 -> 1 + 500 * 0.01 = 6
        raw = _unit_quat_with_l1_residual(0.01)
        res = beta_loss([1, 0, 0], Quaternion.identity(), [0, 0, 0], raw, 500.0, Norm.l1())
        assert abs(res.value - 6.0) <= 1e-9

    def test_is_sum_of_parts(self, rng):
        for _ in range(50):
            q = geom.canonicalize(random_unit_quat(rng))
            x, x_hat = rng.normal(size=3), rng.normal(size=3)
            raw = rng.normal(size=4)
            beta = 10 ** rng.uniform(1, 3.5)
            lx = position_loss(x, x_hat)
            lq = quaternion_loss(q, raw)
            res = beta_loss(x, q, x_hat, raw, beta)
            assert abs(res.value - (lx.value + beta * lq.value)) <= 1e-12 * res.value

    def test_nonpositive_beta_rejected(self):
        with pytest.raises(ConfigError):
            beta_loss([0, 0, 0], Quaternion.identity(), [0, 0, 0], [1, 0, 0, 0], 0.0)


class TestHomoscedasticLoss:
    def test_direct_evaluation(self):
        # L_x = 2, L_q = 0.5, s_x = 0, s_q = -3 -> 2 + 0 + 0.5 e^3 - 3
        raw = _unit_quat_with_l1_residual(0.5)
        res = homoscedastic_loss(
            [2, 0, 0], Quaternion.identity(), [0, 0, 0], raw,
            HomoscedasticParams(0.0, -3.0), Norm.l1(),
        )
        expected = 2.0 + 0.0 + 0.5 * math.exp(3.0) - 3.0
        assert abs(res.value - expected) <= 1e-9
        # d/ds_x = -L_x exp(-s_x) + 1 = -1
        assert abs(res.grad_s[0] - (-1.0)) <= 1e-9

    def test_zero_s_reduces_to_plain_sum(self, rng):
        for _ in range(50):
            q = geom.canonicalize(random_unit_quat(rng))
            x, x_hat = rng.normal(size=3), rng.normal(size=3)
            raw = rng.normal(size=4)
            res = homoscedastic_loss(x, q, x_hat, raw, HomoscedasticParams(0.0, 0.0))
            plain = position_loss(x, x_hat).value + quaternion_loss(q, raw).value
            assert abs(res.value - plain) <= 1e-12 * max(1.0, plain)

    def test_grad_s_matches_fd(self, rng):
        for _ in range(50):
            q = geom.canonicalize(random_unit_quat(rng))
            x, x_hat = rng.normal(size=3), rng.normal(size=3)
            raw = rng.normal(size=4)
            s = rng.normal(size=2)

            def f(sv):
                return homoscedastic_loss(
                    x, q, x_hat, raw, HomoscedasticParams(sv[0], sv[1])
                ).value

            res = homoscedastic_loss(x, q, x_hat, raw, HomoscedasticParams(s[0], s[1]))
            np.testing.assert_allclose(res.grad_s, central_diff(f, s), atol=1e-6)

    def test_default_initialization(self):
        s = HomoscedasticParams()
        assert s.s_x == 0.0 and s.s_q == -3.0


def _visible_points_for(pose, k, rng, n, depth=(1.0, 4.0)):
    """Points guaranteed in front of (and projecting inside bounds for) pose."""
    pts = []
    r = pose.rotation_matrix()
    k_inv = np.linalg.inv(k.matrix)
    for _ in range(n):
        u, v = rng.uniform(-0.8, 0.8, size=2)
        w = rng.uniform(*depth)
        cam = k_inv @ np.array([u * w, v * w, w])
        pts.append(r.T @ (cam - pose.position))
    return np.array(pts)


def _reproj_oracle(pose_gt, x_hat, q_hat_raw, k, pts, norm, bounds, min_depth=0.01):
    """Brute-force reimplementation using scipy rotations (independent route)."""
    q = pose_gt.orientation
    r_gt = Rotation.from_quat([q.x, q.y, q.z, q.w]).as_matrix()
    u_hat = np.asarray(q_hat_raw, dtype=float)
    u_hat = u_hat / np.linalg.norm(u_hat)
    r_pr = Rotation.from_quat([u_hat[1], u_hat[2], u_hat[3], u_hat[0]]).as_matrix()
    total, used = 0.0, 0
    for g in pts:
        a = k.matrix @ (r_gt @ g + pose_gt.position)
        c = k.matrix @ (r_pr @ g + np.asarray(x_hat, dtype=float))
        if a[2] <= min_depth or c[2] <= min_depth:
            continue
        up, vp = c[0] / c[2], c[1] / c[2]
        if not (bounds.u_min <= up <= bounds.u_max and bounds.v_min <= vp <= bounds.v_max):
            continue
        res = np.array([a[0] / a[2] - up, a[1] / a[2] - vp])
        total += losses.norm_eval(norm, res)[0]
        used += 1
    return (total / used, used) if used else (None, 0)


class TestReprojectionLoss:
    def test_perfect_prediction_any_k(self, rng):
        for _ in range(20):
            pose = random_pose(rng)
            k = random_intrinsics(rng)
            pts = _visible_points_for(pose, k, rng, 8)
            res = reprojection_loss(pose, pose.position, pose.orientation.to_array(), k, pts)
            assert res is not None and res.value == 0.0

    def test_single_point_hand_projection(self):
        # gt identity, pred x = (0.2, 0, 0): residual (0 - 0.1, 0) -> L1 = 0.1
        res = reprojection_loss(
            Pose.identity(), np.array([0.2, 0.0, 0.0]), np.array([1.0, 0, 0, 0]),
            CameraIntrinsics.identity(), [[0.0, 0.0, 2.0]], Norm.l1(),
        )
        assert res is not None
        assert abs(res.value - 0.1) <= 1e-15
        assert res.points_used == 1

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(100):
            pose_gt = random_pose(rng)
            k = random_intrinsics(rng)
            pts = _visible_points_for(pose_gt, k, rng, 6)
            x_hat = pose_gt.position + rng.normal(0, 0.1, size=3)
            raw = pose_gt.orientation.to_array() + rng.normal(0, 0.05, size=4)
            norm = ALL_NORMS[rng.integers(4)]
            res = reprojection_loss(pose_gt, x_hat, raw, k, pts, norm)
            expected, used = _reproj_oracle(pose_gt, x_hat, raw, k, pts, norm, Bounds())
            if expected is None:
                assert res is None
            else:
                assert res.points_used == used
                assert abs(res.value - expected) <= 1e-10

    def test_scale_invariance_on_3_point_scenes(self, rng):
        # scaling points and positions by k leaves the loss unchanged
        for _ in range(30):
            pose_gt = random_pose(rng)
            k = CameraIntrinsics.identity()
            pts = _visible_points_for(pose_gt, k, rng, 3)
            x_hat = pose_gt.position + rng.normal(0, 0.1, size=3)
            raw = pose_gt.orientation.to_array() + rng.normal(0, 0.05, size=4)
            scale = 10 ** rng.uniform(-1, 2)
            a = reprojection_loss(pose_gt, x_hat, raw, k, pts)
            scaled_gt = Pose(pose_gt.position * scale, pose_gt.orientation)
            b = reprojection_loss(scaled_gt, x_hat * scale, raw, k, pts * scale)
            if a is None:
                assert b is None
            else:
                assert abs(a.value - b.value) <= 1e-9 * max(1.0, a.value)

    def test_behind_camera_excluded(self):
        res = reprojection_loss(
            Pose.identity(), np.zeros(3), np.array([1.0, 0, 0, 0]),
            CameraIntrinsics.identity(), [[0, 0, -2.0], [0, 0, 2.0]],
        )
        assert res.points_used == 1

    def test_out_of_bounds_excluded_by_predicted_projection(self):
        # the point stays visible under gt but the shifted prediction
        # pushes it outside the unit box
        pose = Pose.identity()
        res = reprojection_loss(
            pose, np.array([3.0, 0.0, 0.0]), np.array([1.0, 0, 0, 0]),
            CameraIntrinsics.identity(), [[0.0, 0.0, 2.0], [0.0, 0.5, 2.0]],
        )
        assert res is None  # both excluded -> skip signal

    def test_empty_visible_rejected(self):
        with pytest.raises(ValueError):
            reprojection_loss(
                Pose.identity(), np.zeros(3), np.array([1.0, 0, 0, 0]),
                CameraIntrinsics.identity(), np.zeros((0, 3)),
            )

    def test_gradients_match_fd(self, rng):
        checked = 0
        while checked < 60:
            pose_gt = random_pose(rng)
            k = random_intrinsics(rng)
            pts = _visible_points_for(pose_gt, k, rng, 5)
            x_hat = pose_gt.position + rng.normal(0, 0.05, size=3)
            raw = pose_gt.orientation.to_array() + rng.normal(0, 0.03, size=4)
            res = reprojection_loss(pose_gt, x_hat, raw, k, pts)
            if res is None or res.points_used < 5:
                continue  # near an exclusion boundary; FD would be invalid
            checked += 1
            vec = np.concatenate([x_hat, raw])

            def f(v):
                out = reprojection_loss(pose_gt, v[:3], v[3:], k, pts)
                return out.value

            fd = central_diff(f, vec)
            analytic = np.concatenate([res.grad_position, res.grad_quaternion_raw])
            np.testing.assert_allclose(analytic, fd, atol=2e-5)
