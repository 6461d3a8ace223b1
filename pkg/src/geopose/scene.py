"""Synthetic structure-from-motion scenes: points, camera paths, visibility.

Geometry
--------
A scene is a 3-D point cloud placed in a box "in front of" the camera
workspace, plus a smooth closed camera path inside the workspace box
(= the scene ``extent``).  Position labels are sampled directly on the
path, so regression targets span the full extent.  Orientations compose
a fixed view tilt with a roll about the optical axis (smooth path
component plus per-sample jitter) and a small random perturbation; see
``PathConfig`` for why.  Everything uses the package projection
convention p' = K(R g + x), so generated observations, visibility and
the reprojection loss are mutually consistent by construction.

Train and test splits draw the path parameter from disjoint interleaved
bands with safety margins, mimicking distinct walking paths through the
same space.

Frame centering
---------------
``center_frame`` re-expresses the whole system in a translated world
frame: points move by -offset and each position by +R(q) offset, which
leaves every projection (and hence observations and visibility) exactly
invariant.  The offset solves mean(position + R offset) = 0 over the
training samples, so centered training positions average to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import geom
from .errors import ConfigError, DataError
from .geom import Bounds, CameraIntrinsics, Pose, Quaternion
from .kernels import project_points

__all__ = [
    "PathConfig",
    "Scene",
    "Sample",
    "generate_scene",
    "room_scene",
    "street_scene",
    "sample_poses",
    "visible_subset",
    "build_observation",
    "frame_offset",
    "shift_pose",
    "center_frame",
    "cloud_box",
    "save_scene",
    "load_scene",
    "reproj_point_sets",
    "SPLIT_BANDS",
]

# Disjoint path-parameter bands per split, with safety margins between
# them, so the two splits walk distinct (interleaved) path segments.
_N_CELLS = 10


def _split_bands(split: str) -> list[tuple[float, float]]:
    cells = np.arange(_N_CELLS) / _N_CELLS
    if split == "train":
        return [(c, c + 0.055) for c in cells]
    return [(c + 0.0625, c + 0.0925) for c in cells]


SPLIT_BANDS = {s: _split_bands(s) for s in ("train", "test")}

MAX_ATTEMPTS_PER_SAMPLE = 200
MIN_VISIBLE_ANCHORS = 4


@dataclass(frozen=True)
class PathConfig:
    """Camera-path and cloud-placement knobs, persisted with the scene.

    The camera rotation is roll about the optical axis (a smooth path
    component plus a per-sample random jitter) composed with a fixed
    view tilt: R = Rz(roll) Rx(view_tilt).  The tilt pushes the point
    cloud's image off the principal point, onto a ring whose angle is the
    roll, so decoding the camera position from anchor coordinates
    requires resolving the orientation first.  This couples the two
    regression tasks the way shared-representation pose networks are
    coupled on real imagery.
    """

    distance_factor: float = 3.0  # cloud distance / max lateral path radius
    cloud_frac: float = 0.15  # cloud half-extent / cloud distance
    view_tilt: float = 0.3  # fixed tilt between roll axis and cloud (rad)
    roll_amplitude: float = 0.5  # radians of smooth roll variation along the path
    roll_jitter: float = 1.1  # max |random per-sample roll| (rad)
    perturb_max: float = 0.25  # max random orientation perturbation (rad)

    def __post_init__(self):
        if self.distance_factor <= 1.0:
            raise ConfigError("distance_factor must exceed 1 (cloud beyond the path)")
        if not (0.0 < self.cloud_frac < 1.0):
            raise ConfigError("cloud_frac must lie in (0, 1)")
        if not (0.0 <= self.view_tilt < 1.2):
            raise ConfigError("view_tilt must lie in [0, 1.2) radians")
        if self.roll_amplitude < 0.0 or self.perturb_max < 0.0 or self.roll_jitter < 0.0:
            raise ConfigError("angle amplitudes must be nonnegative")


@dataclass(frozen=True)
class Scene:
    """Immutable scene: points, anchor subset, camera model and path box."""

    points: np.ndarray  # (N, 3)
    anchors: np.ndarray  # (m,) indices into points
    intrinsics: CameraIntrinsics
    bounds: Bounds
    extent: np.ndarray  # (2, 3) camera-position box [min; max]
    seed: int
    path_config: PathConfig = PathConfig()
    frame_offset: Optional[np.ndarray] = None  # cumulative centering offset

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        anc = np.asarray(self.anchors, dtype=np.int64)
        ext = np.asarray(self.extent, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ConfigError("points must have shape (N, 3)")
        if not np.all(np.isfinite(pts)):
            raise ConfigError("scene points must be finite")
        if anc.ndim != 1 or anc.size < MIN_VISIBLE_ANCHORS:
            raise ConfigError(f"need at least {MIN_VISIBLE_ANCHORS} anchors")
        if anc.size > pts.shape[0] or anc.min() < 0 or anc.max() >= pts.shape[0]:
            raise ConfigError("anchor indices out of range")
        if ext.shape != (2, 3) or np.any(ext[0] >= ext[1]):
            raise ConfigError("extent must be a (2, 3) box with positive volume")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "anchors", anc)
        object.__setattr__(self, "extent", ext)
        if self.frame_offset is not None:
            off = np.asarray(self.frame_offset, dtype=float)
            if off.shape != (3,):
                raise ConfigError("frame_offset must be a 3-vector")
            object.__setattr__(self, "frame_offset", off)

    @property
    def n_anchors(self) -> int:
        return int(self.anchors.size)

    @property
    def observation_dim(self) -> int:
        return 3 * self.n_anchors


@dataclass(frozen=True)
class Sample:
    """One labelled view: ground-truth pose, observation, visible subset."""

    pose: Pose
    observation: np.ndarray  # (3m,): u, v, visible-flag per anchor
    visible_points: np.ndarray  # indices into scene.points


def _lateral_radius(extent: np.ndarray) -> float:
    half = np.max(np.abs(extent), axis=0)
    return math.hypot(half[0], half[1])


def _cloud_params(extent: np.ndarray, pc: PathConfig):
    dist = pc.distance_factor * _lateral_radius(extent)
    center = np.array([0.0, 0.0, dist])
    half = pc.cloud_frac * dist
    return center, half


def cloud_box(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """(lo, hi) corners of the volume the points were drawn from."""
    center, half = _cloud_params(scene.extent, scene.path_config)
    return center - half, center + half


def _path_phases(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1])
    return rng.uniform(0.0, 2.0 * math.pi, size=4)


def _path_position(extent: np.ndarray, phases: np.ndarray, theta: float) -> np.ndarray:
    center = 0.5 * (extent[0] + extent[1])
    half = 0.5 * (extent[1] - extent[0])
    two_pi = 2.0 * math.pi
    x = 0.85 * math.sin(two_pi * theta) + 0.15 * math.sin(2 * two_pi * theta + phases[0])
    y = 0.85 * math.cos(two_pi * theta) + 0.15 * math.cos(2 * two_pi * theta + phases[1])
    z = math.sin(2 * two_pi * theta + phases[2])
    return center + half * np.array([x, y, z])


_Z_AXIS = np.array([0.0, 0.0, 1.0])
_X_AXIS = np.array([1.0, 0.0, 0.0])


def _pose_at(
    scene_extent: np.ndarray,
    pc: PathConfig,
    phases: np.ndarray,
    theta: float,
    roll_jitter: float,
    perturb: Optional[Quaternion],
) -> Pose:
    position = _path_position(scene_extent, phases, theta)
    roll = pc.roll_amplitude * math.sin(2.0 * math.pi * theta + phases[3]) + roll_jitter
    q = geom.quat_from_axis_angle(_X_AXIS, pc.view_tilt)
    if roll != 0.0:
        q = geom.quat_multiply(geom.quat_from_axis_angle(_Z_AXIS, roll), q)
    if perturb is not None:
        q = geom.quat_multiply(perturb, q)
    q = geom.canonicalize(geom.normalize(q))
    return Pose(position, q)


def generate_scene(
    n_points: int,
    extent,
    n_anchors: int,
    seed: int,
    path_config: PathConfig = PathConfig(),
    bounds: Bounds = Bounds(),
    intrinsics: CameraIntrinsics = CameraIntrinsics.identity(),
) -> Scene:
    """Deterministically generate a scene from ``seed``.

    Points are uniform in the cloud box derived from ``extent`` and
    ``path_config``; the first ``n_anchors`` points are the anchors.
    """
    if n_anchors < MIN_VISIBLE_ANCHORS:
        raise ConfigError(f"need n_anchors >= {MIN_VISIBLE_ANCHORS}")
    if n_points < n_anchors:
        raise ConfigError("need n_points >= n_anchors")
    extent = np.asarray(extent, dtype=float)
    if extent.shape != (2, 3) or np.any(extent[0] >= extent[1]):
        raise ConfigError("extent must be a (2, 3) box with positive volume")
    center, half = _cloud_params(extent, path_config)
    rng = np.random.default_rng([seed, 2])
    points = rng.uniform(center - half, center + half, size=(n_points, 3))
    return Scene(
        points=points,
        anchors=np.arange(n_anchors, dtype=np.int64),
        intrinsics=intrinsics,
        bounds=bounds,
        extent=extent,
        seed=seed,
        path_config=path_config,
    )


def room_scene(seed: int, n_points: int = 1500, n_anchors: int = 16) -> Scene:
    """Room-scale preset: camera workspace about 4 x 3 meters."""
    extent = np.array([[-2.0, -1.5, -0.3], [2.0, 1.5, 0.3]])
    return generate_scene(n_points, extent, n_anchors, seed)


def street_scene(seed: int, n_points: int = 2500, n_anchors: int = 16) -> Scene:
    """Street-scale preset: camera workspace about 100 x 500 meters."""
    extent = np.array([[-50.0, -250.0, -5.0], [50.0, 250.0, 5.0]])
    return generate_scene(n_points, extent, n_anchors, seed)


def _pose_arrays(pose: Pose):
    return pose.position, pose.orientation.to_array()


def visible_subset(scene: Scene, pose: Pose) -> np.ndarray:
    """Indices of scene points in the view frustum under ``pose``.

    A point counts as visible when its depth exceeds the behind-camera
    guard and its projection lies inside the bounds box.
    """
    pos, q4 = _pose_arrays(pose)
    uv, depth = project_points(pos, q4, scene.intrinsics.matrix, scene.points)
    b = scene.bounds
    with np.errstate(invalid="ignore"):
        mask = (
            (depth > geom.VISIBLE_MIN_DEPTH)
            & (uv[:, 0] >= b.u_min)
            & (uv[:, 0] <= b.u_max)
            & (uv[:, 1] >= b.v_min)
            & (uv[:, 1] <= b.v_max)
        )
    return np.nonzero(mask)[0].astype(np.int64)


def build_observation(scene: Scene, pose: Pose) -> np.ndarray:
    """Observation vector: (u, v, 1) per visible anchor, zeros otherwise.

    Anchor projections use exactly the same arithmetic as ``geom.project``
    so a stored observation reproduces bit-for-bit on re-projection.
    """
    kmat = scene.intrinsics.matrix
    rot = pose.rotation_matrix()
    b = scene.bounds
    obs = np.zeros((scene.n_anchors, 3))
    for i, a in enumerate(scene.anchors):
        p = kmat @ (rot @ scene.points[a] + pose.position)
        if p[2] <= geom.VISIBLE_MIN_DEPTH:
            continue
        u, v = p[0] / p[2], p[1] / p[2]
        if b.contains(u, v):
            obs[i] = (u, v, 1.0)
    return obs.reshape(-1)


def _random_perturbation(rng: np.random.Generator, max_angle: float) -> Optional[Quaternion]:
    if max_angle <= 0.0:
        return None
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:  # pragma: no cover - measure zero
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    return geom.quat_from_axis_angle(axis, angle)


def sample_poses(scene: Scene, count: int, seed: int, split: str) -> list[Sample]:
    """Draw ``count`` labelled samples from the split's path region.

    Each sample is rejection-resampled until at least 4 anchors are
    visible; a sample that fails 200 attempts raises ``ConfigError``.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if split not in SPLIT_BANDS:
        raise ConfigError(f"split must be one of {sorted(SPLIT_BANDS)}")
    bands = SPLIT_BANDS[split]
    phases = _path_phases(scene.seed)
    rng = np.random.default_rng([seed, 3 if split == "train" else 4])
    samples = []
    pc = scene.path_config
    for _ in range(count):
        for attempt in range(MAX_ATTEMPTS_PER_SAMPLE):
            lo, hi = bands[rng.integers(len(bands))]
            theta = rng.uniform(lo, hi)
            jitter = rng.uniform(-pc.roll_jitter, pc.roll_jitter) if pc.roll_jitter else 0.0
            perturb = _random_perturbation(rng, pc.perturb_max)
            pose = _pose_at(scene.extent, pc, phases, theta, jitter, perturb)
            if scene.frame_offset is not None:
                pose = shift_pose(pose, scene.frame_offset)
            obs = build_observation(scene, pose)
            if int(obs[2::3].sum()) >= MIN_VISIBLE_ANCHORS:
                samples.append(
                    Sample(pose, obs, visible_subset(scene, pose))
                )
                break
        else:
            raise ConfigError(
                f"could not find a pose with {MIN_VISIBLE_ANCHORS} visible anchors "
                f"in {MAX_ATTEMPTS_PER_SAMPLE} attempts; scene geometry infeasible"
            )
    return samples


def reproj_point_sets(
    samples: Sequence[Sample], scene: Scene, cap: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Padded (N, P, 3) per-sample visible-point tensors plus counts.

    Each sample keeps at most ``cap`` points of its visible subset, chosen
    once by a seeded draw so downstream use stays deterministic.
    """
    rng = np.random.default_rng([seed, 5])
    chosen = []
    for s in samples:
        idx = np.asarray(s.visible_points, dtype=np.int64)
        if idx.size > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        chosen.append(idx)
    p_max = max(max((c.size for c in chosen), default=0), 1)
    pts = np.zeros((len(samples), p_max, 3))
    counts = np.zeros(len(samples), dtype=np.int64)
    for i, idx in enumerate(chosen):
        counts[i] = idx.size
        if idx.size:
            pts[i, : idx.size] = scene.points[idx]
    return pts, counts


def frame_offset(poses: Sequence[Pose]) -> np.ndarray:
    """Offset making the mean of shifted positions exactly zero.

    Solves mean(position_i + R_i offset) = 0; shifting points by -offset
    and positions by +R_i offset is a pure change of world frame, so all
    projections are unchanged.
    """
    if len(poses) == 0:
        raise ValueError("cannot center an empty pose set")
    mean_r = np.zeros((3, 3))
    mean_t = np.zeros(3)
    for p in poses:
        mean_r += p.rotation_matrix()
        mean_t += p.position
    mean_r /= len(poses)
    mean_t /= len(poses)
    try:
        return np.linalg.solve(mean_r, -mean_t)
    except np.linalg.LinAlgError:
        raise DataError("mean rotation is singular; cannot center this pose set")


def shift_pose(pose: Pose, offset: np.ndarray) -> Pose:
    """Re-express a pose in the world frame translated by ``offset``."""
    return Pose(pose.position + pose.rotation_matrix() @ offset, pose.orientation)


def _shift_scene(scene: Scene, offset: np.ndarray) -> Scene:
    prior = scene.frame_offset if scene.frame_offset is not None else np.zeros(3)
    return replace(scene, points=scene.points - offset, frame_offset=prior + offset)


def center_frame(
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample] = (),
    scene: Optional[Scene] = None,
):
    """Center the world frame on the training set.

    Returns (train', test', scene', offset).  The offset is computed from
    the training samples only and applied to everything; with a scene the
    observations and visible subsets are rebuilt from the shifted
    quantities (they are identical up to floating-point roundoff).
    """
    if len(train_samples) == 0:
        raise ValueError("cannot center an empty training set")
    offset = frame_offset([s.pose for s in train_samples])
    new_scene = _shift_scene(scene, offset) if scene is not None else None

    def rebuild(sample: Sample) -> Sample:
        pose = shift_pose(sample.pose, offset)
        if new_scene is None:
            return Sample(pose, sample.observation, sample.visible_points)
        return Sample(
            pose, build_observation(new_scene, pose), visible_subset(new_scene, pose)
        )

    return (
        [rebuild(s) for s in train_samples],
        [rebuild(s) for s in test_samples],
        new_scene,
        offset,
    )


# ---------------------------------------------------------------------------
# scene file format (documented in the README)
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_scene(scene: Scene, path) -> None:
    lines = ["# geopose scene v1"]
    lines.append(f"seed {scene.seed}")
    lines.append("anchors " + " ".join(str(i) for i in scene.anchors))
    k = scene.intrinsics.matrix
    lines.append(
        "intrinsics "
        + " ".join(_fmt(v) for v in (k[0, 0], k[0, 1], k[0, 2], k[1, 1], k[1, 2], k[2, 2]))
    )
    lines.append("bounds " + " ".join(_fmt(v) for v in scene.bounds.to_array()))
    ext = scene.extent
    lines.append(
        "extent "
        + " ".join(_fmt(v) for v in (ext[0, 0], ext[1, 0], ext[0, 1], ext[1, 1], ext[0, 2], ext[1, 2]))
    )
    pc = scene.path_config
    lines.append(
        "path "
        + " ".join(
            _fmt(v)
            for v in (
                pc.distance_factor, pc.cloud_frac, pc.view_tilt,
                pc.roll_amplitude, pc.roll_jitter, pc.perturb_max,
            )
        )
    )
    if scene.frame_offset is not None:
        lines.append("offset " + " ".join(_fmt(v) for v in scene.frame_offset))
    for i, p in enumerate(scene.points):
        lines.append(f"point {i} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    fields: dict = {}
    points: list[tuple[int, np.ndarray]] = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            key, args = tokens[0], tokens[1:]
            try:
                if key == "seed":
                    fields["seed"] = int(args[0])
                elif key == "anchors":
                    fields["anchors"] = np.array([int(a) for a in args], dtype=np.int64)
                elif key == "intrinsics":
                    v = [float(a) for a in args]
                    fields["intrinsics"] = CameraIntrinsics(
                        np.array([[v[0], v[1], v[2]], [0.0, v[3], v[4]], [0.0, 0.0, v[5]]])
                    )
                elif key == "bounds":
                    v = [float(a) for a in args]
                    fields["bounds"] = Bounds(*v)
                elif key == "extent":
                    v = [float(a) for a in args]
                    fields["extent"] = np.array(
                        [[v[0], v[2], v[4]], [v[1], v[3], v[5]]]
                    )
                elif key == "path":
                    v = [float(a) for a in args]
                    fields["path_config"] = PathConfig(*v)
                elif key == "offset":
                    fields["frame_offset"] = np.array([float(a) for a in args])
                elif key == "point":
                    idx = int(args[0])
                    points.append((idx, np.array([float(a) for a in args[1:4]])))
                else:
                    raise ValueError(f"unknown directive {key!r}")
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed scene line: {exc}")
    required = ("seed", "anchors", "intrinsics", "bounds", "extent", "path_config")
    missing = [k for k in required if k not in fields]
    if missing:
        raise DataError(f"{path}: missing scene directives: {missing}")
    points.sort(key=lambda t: t[0])
    if [i for i, _ in points] != list(range(len(points))):
        raise DataError(f"{path}: point indices must be 0..N-1 without gaps")
    pts = np.array([p for _, p in points]).reshape(-1, 3)
    return Scene(points=pts, **fields)
