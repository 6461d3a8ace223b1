import numpy as np
import pytest

from geopose import geom
from geopose.geom import CameraIntrinsics, Pose, Quaternion


def central_diff(f, x, step=1e-6):
    """Central-difference gradient of scalar f at x (1-D array)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        g[i] = (f(hi) - f(lo)) / (2 * step)
    return g


def central_diff_jacobian(f, x, m, step=1e-6):
    """Central-difference (m, n) Jacobian of vector-valued f at x."""
    x = np.asarray(x, dtype=float)
    jac = np.zeros((m, x.size))
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        jac[:, i] = (np.asarray(f(hi)) - np.asarray(f(lo))) / (2 * step)
    return jac


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return np.abs(a - b).max() / scale


def random_unit_quat(rng) -> Quaternion:
    v = rng.normal(size=4)
    return Quaternion.from_array(v / np.linalg.norm(v))


def random_pose(rng, scale=1.0) -> Pose:
    q = geom.canonicalize(random_unit_quat(rng))
    return Pose(rng.normal(0.0, scale, size=3), q)


def random_intrinsics(rng) -> CameraIntrinsics:
    fx, fy = rng.uniform(0.6, 1.6, size=2)
    s = rng.uniform(-0.05, 0.05)
    cx, cy = rng.uniform(-0.3, 0.3, size=2)
    return CameraIntrinsics(np.array([[fx, s, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
