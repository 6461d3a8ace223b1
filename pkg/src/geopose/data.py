"""Pose-label dataset ingestion and serialization.

File grammar (one record per line, whitespace separated):

    id x y z qw qx qy qz

``#`` starts a comment, blank lines are skipped, and both LF and CRLF
endings are accepted; parsing uses plain ``float()`` and is therefore
independent of the system locale.  Quaternions are normalized and
canonicalized on load; a norm outside [0.5, 2] is rejected as corrupted
rather than silently rescaled.  Reals are written with 17 significant
digits so save -> load round-trips exactly.

A centered dataset records its frame offset in a magic comment
``# frame-offset x y z`` which the loader recognizes; other tools see an
ordinary comment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import geom, scene
from .errors import DataError
from .geom import Pose, Quaternion

__all__ = [
    "PoseRecord",
    "Dataset",
    "load_pose_file",
    "save_pose_file",
    "apply_frame_centering",
]

_HEADER = "# geopose poses v1"
_OFFSET_PREFIX = "# frame-offset"
QUAT_NORM_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class PoseRecord:
    id: str
    pose: Pose

    @property
    def position(self) -> np.ndarray:
        return self.pose.position

    @property
    def quaternion(self) -> Quaternion:
        return self.pose.orientation


@dataclass(frozen=True)
class Dataset:
    records: tuple[PoseRecord, ...]
    frame_offset: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("dataset ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _canonical_unit(q: Quaternion) -> Quaternion:
    # Already-unit quaternions pass through untouched so file round-trips
    # are exact; anything else inside the accepted range is renormalized.
    if abs(q.norm - 1.0) > 1e-12:
        q = geom.normalize(q)
    return geom.canonicalize(q)


def load_pose_file(path) -> Dataset:
    records = []
    offset = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith(_OFFSET_PREFIX):
                try:
                    offset = np.array([float(t) for t in line.split()[2:5]])
                    if offset.shape != (3,):
                        raise ValueError("need 3 components")
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad frame-offset: {exc}")
                continue
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 8:
                raise DataError(
                    f"{path}:{lineno}: expected 'id x y z qw qx qy qz', got {len(tokens)} fields"
                )
            try:
                vals = [float(t) for t in tokens[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable number: {exc}")
            position = np.array(vals[:3])
            if not np.all(np.isfinite(position)):
                raise DataError(f"{path}:{lineno}: non-finite position")
            q = Quaternion(*vals[3:])
            if not (QUAT_NORM_RANGE[0] <= q.norm <= QUAT_NORM_RANGE[1]):
                raise DataError(
                    f"{path}:{lineno}: quaternion norm {q.norm:.6g} outside "
                    f"[{QUAT_NORM_RANGE[0]}, {QUAT_NORM_RANGE[1]}]; label looks corrupted"
                )
            records.append(PoseRecord(tokens[0], Pose(position, _canonical_unit(q))))
    return Dataset(tuple(records), frame_offset=offset)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_pose_file(dataset: Dataset, path) -> None:
    lines = [_HEADER]
    if dataset.frame_offset is not None:
        lines.append(
            _OFFSET_PREFIX + " " + " ".join(_fmt(v) for v in dataset.frame_offset)
        )
    for r in dataset:
        q = r.quaternion
        lines.append(
            " ".join(
                [r.id]
                + [_fmt(v) for v in r.position]
                + [_fmt(q.w), _fmt(q.x), _fmt(q.y), _fmt(q.z)]
            )
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def apply_frame_centering(dataset: Dataset) -> Dataset:
    """Center the dataset frame on its mean camera position.

    Same semantics as ``scene.center_frame``: positions move by
    R(q) offset so that they average to exactly zero, and the offset is
    stored on the result.  A dataset may be centered only once.
    """
    if len(dataset) == 0:
        raise ValueError("cannot center an empty dataset")
    if dataset.frame_offset is not None:
        raise DataError("dataset already carries a frame offset")
    offset = scene.frame_offset([r.pose for r in dataset])
    records = tuple(
        PoseRecord(r.id, scene.shift_pose(r.pose, offset)) for r in dataset
    )
    return Dataset(records, frame_offset=offset)


def records_from_samples(samples: Sequence[scene.Sample], prefix: str = "sample") -> Dataset:
    """Package generated samples as a dataset (ids are sequential)."""
    return Dataset(
        tuple(
            PoseRecord(f"{prefix}{i:06d}", s.pose) for i, s in enumerate(samples)
        )
    )


def samples_from_records(scn: scene.Scene, dataset: Dataset) -> list:
    """Rebuild observation vectors and visible subsets for stored poses."""
    return [
        scene.Sample(
            r.pose,
            scene.build_observation(scn, r.pose),
            scene.visible_subset(scn, r.pose),
        )
        for r in dataset
    ]
