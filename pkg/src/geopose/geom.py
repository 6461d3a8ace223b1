"""Quaternion and pose algebra plus the pinhole projection used everywhere.

Conventions
-----------
- Quaternions are scalar-first ``(w, x, y, z)``.
- The canonical hemisphere is ``w > 0``, with a lexicographic tie-break on
  ``(x, y, z)`` when ``w == 0``.
- A pose is a position vector ``x`` (meters) plus a unit orientation
  quaternion ``q``.  Projection of a world point ``g`` is

      (u', v', w') = K (R(q) g + x),    (u, v) = (u'/w', v'/w')

  with ``x`` added in the camera frame, i.e. ``x`` plays the role of the
  extrinsic translation column.  All other modules (scene generation,
  losses, metrics) use this same convention, so the toolkit is
  self-consistent end to end.
- All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Quaternion",
    "Pose",
    "CameraIntrinsics",
    "Bounds",
    "normalize",
    "canonicalize",
    "quat_to_rotmat",
    "quat_multiply",
    "quat_from_axis_angle",
    "project",
    "project_grad",
    "angular_error_deg",
]

UNIT_TOL = 1e-9
MIN_DEPTH = 1e-12
# Behind-camera guard shared by visibility tests and the reprojection loss.
VISIBLE_MIN_DEPTH = 0.01


@dataclass(frozen=True)
class Quaternion:
    """Orientation quaternion, scalar-first components."""

    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        a = np.asarray(a, dtype=float)
        if a.shape != (4,):
            raise ValueError(f"quaternion needs 4 components, got shape {a.shape}")
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def to_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    @property
    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def is_unit(self, tol: float = UNIT_TOL) -> bool:
        return abs(self.norm - 1.0) <= tol


def normalize(q: Quaternion) -> Quaternion:
    """Scale ``q`` to unit length.

    Raises ``ValueError`` on (numerically) zero input.
    """
    n = q.norm
    if n < 1e-300:
        raise ValueError("cannot normalize a zero quaternion")
    return Quaternion(q.w / n, q.x / n, q.y / n, q.z / n)


def canonicalize(q: Quaternion) -> Quaternion:
    """Map ``q`` to the canonical hemisphere (same rotation, fixed sign).

    Result has ``w > 0``, or ``w == 0`` and the first nonzero vector
    component positive.
    """
    a = q.to_array()
    for c in a:
        if c != 0.0:
            if c < 0.0:
                return Quaternion(-q.w, -q.x, -q.y, -q.z)
            return q
    raise ValueError("cannot canonicalize a zero quaternion")


def _rotmat(q4: np.ndarray) -> np.ndarray:
    """Rotation matrix from a scalar-first quaternion array (assumed unit).

    Quadratic in the components, so q and -q give the same matrix.
    """
    w, x, y, z = q4
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def _rotmat_grad(q4: np.ndarray) -> np.ndarray:
    """(4, 3, 3) array of dR/dq_k for the unit-form rotation formula."""
    w, x, y, z = q4
    dw = 2.0 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dx = 2.0 * np.array([[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]])
    dy = 2.0 * np.array([[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]])
    dz = 2.0 * np.array([[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]])
    return np.stack([dw, dx, dy, dz])


def quat_to_rotmat(q: Quaternion, tol: float = 1e-6) -> np.ndarray:
    """SO(3) rotation matrix of a unit quaternion.

    Raises ``ValueError`` when the input norm is off unit by more than
    ``tol``; the formula is only a rotation on the unit sphere.
    """
    if abs(q.norm - 1.0) > tol:
        raise ValueError(f"quaternion norm {q.norm} too far from 1 for rotation")
    return _rotmat(q.to_array())


@dataclass(frozen=True)
class Pose:
    """Camera pose: position vector (meters) + unit orientation quaternion."""

    position: np.ndarray
    orientation: Quaternion

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,):
            raise ValueError(f"position needs shape (3,), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("position components must be finite")
        object.__setattr__(self, "position", pos)
        if not self.orientation.is_unit():
            raise ValueError(
                f"orientation norm {self.orientation.norm} not unit within {UNIT_TOL}"
            )

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), Quaternion.identity())

    @classmethod
    def from_arrays(cls, position, quat, normalized: bool = False) -> "Pose":
        """Build a pose from raw arrays; ``normalized=True`` rescales the
        quaternion first (e.g. for raw regressor head output)."""
        q = Quaternion.from_array(quat)
        if normalized:
            q = normalize(q)
        return cls(np.asarray(position, dtype=float), q)

    def rotation_matrix(self) -> np.ndarray:
        return _rotmat(self.orientation.to_array())


@dataclass(frozen=True)
class CameraIntrinsics:
    """Upper-triangular 3x3 intrinsic matrix; defaults to identity."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        k = np.asarray(self.matrix, dtype=float)
        if k.shape != (3, 3):
            raise ValueError(f"intrinsics need shape (3, 3), got {k.shape}")
        lower = np.tril(k, k=-1)
        if np.any(lower != 0.0):
            raise ValueError("intrinsic matrix must be upper triangular")
        if k[2, 2] != 1.0:
            raise ValueError("intrinsic matrix must have K[2][2] == 1")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0:
            raise ValueError("intrinsic focal entries must be positive")
        object.__setattr__(self, "matrix", k)

    @classmethod
    def identity(cls) -> "CameraIntrinsics":
        return cls(np.eye(3))


@dataclass(frozen=True)
class Bounds:
    """Image-coordinate box used for visibility / out-of-bounds exclusion."""

    u_min: float = -1.0
    u_max: float = 1.0
    v_min: float = -1.0
    v_max: float = 1.0

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError("bounds box must have positive extent")

    def contains(self, u: float, v: float) -> bool:
        return self.u_min <= u <= self.u_max and self.v_min <= v <= self.v_max

    def to_array(self) -> np.ndarray:
        return np.array([self.u_min, self.u_max, self.v_min, self.v_max])


def _project_arr(pos: np.ndarray, q4: np.ndarray, kmat: np.ndarray, g: np.ndarray):
    """Projection core on raw arrays, no validation.

    Returns (u, v, w').  Defined for any q4 via the unit-form rotation
    formula, which keeps the map differentiable in all 7 pose parameters.
    """
    p = kmat @ (_rotmat(q4) @ g + pos)
    return p[0] / p[2], p[1] / p[2], p[2]


def project(pose: Pose, k: CameraIntrinsics, g) -> tuple[np.ndarray, float]:
    """Project world point ``g``; returns ((u, v), depth w').

    Raises ``ValueError`` when the point lies on the camera plane
    (|w'| < 1e-12), where the image coordinates are undefined.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (3,):
        raise ValueError(f"point needs shape (3,), got {g.shape}")
    p = k.matrix @ (pose.rotation_matrix() @ g + pose.position)
    if abs(p[2]) < MIN_DEPTH:
        raise ValueError(f"point projects onto the camera plane (w'={p[2]})")
    return np.array([p[0] / p[2], p[1] / p[2]]), float(p[2])


def _project_grad_arr(
    pos: np.ndarray, q4: np.ndarray, kmat: np.ndarray, g: np.ndarray
) -> np.ndarray:
    """(2, 7) Jacobian of (u, v) w.r.t. (position, quaternion components)."""
    p = kmat @ (_rotmat(q4) @ g + pos)
    u, v, w = p[0], p[1], p[2]
    # d(u',v',w')/d(pos) = K; d/dq_k = K (dR/dq_k) g
    dp = np.empty((3, 7))
    dp[:, :3] = kmat
    dr = _rotmat_grad(q4)
    for k_idx in range(4):
        dp[:, 3 + k_idx] = kmat @ (dr[k_idx] @ g)
    jac = np.empty((2, 7))
    jac[0] = (dp[0] * w - u * dp[2]) / (w * w)
    jac[1] = (dp[1] * w - v * dp[2]) / (w * w)
    return jac


def project_grad(pose: Pose, k: CameraIntrinsics, g) -> np.ndarray:
    """Jacobian of the projected image point w.r.t. the 7 pose parameters.

    Columns are (x0, x1, x2, qw, qx, qy, qz); the quaternion columns
    differentiate the unit-form rotation formula directly, matching a
    finite-difference probe of ``project`` around the (unit) orientation.
    """
    g = np.asarray(g, dtype=float)
    q4 = pose.orientation.to_array()
    p = k.matrix @ (pose.rotation_matrix() @ g + pose.position)
    if abs(p[2]) < MIN_DEPTH:
        raise ValueError(f"point projects onto the camera plane (w'={p[2]})")
    return _project_grad_arr(pose.position, q4, k.matrix, g)


def quat_multiply(a: Quaternion, b: Quaternion) -> Quaternion:
    """Hamilton product a * b; composes rotations as R(a*b) = R(a) R(b)."""
    w1, x1, y1, z1 = a.w, a.x, a.y, a.z
    w2, x2, y2, z2 = b.w, b.x, b.y, b.z
    return Quaternion(
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    )


def quat_from_axis_angle(axis, angle: float) -> Quaternion:
    """Unit quaternion rotating by ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n < 1e-300:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    s = math.sin(half) / n
    return Quaternion(math.cos(half), s * a[0], s * a[1], s * a[2])


def angular_error_deg(q: Quaternion, q_hat: Quaternion) -> float:
    """Geodesic rotation angle between two unit quaternions, in degrees.

    Sign-invariant in both arguments (double cover), range [0, 180].
    """
    dot = abs(
        q.w * q_hat.w + q.x * q_hat.x + q.y * q_hat.y + q.z * q_hat.z
    )
    return math.degrees(2.0 * math.acos(min(1.0, dot)))
