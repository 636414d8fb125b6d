"""Pose and trajectory data model, angle arithmetic and segment pre-processing.

Poses are ``(x, y, z, theta)`` in the camera frame: ``x`` lateral, ``y``
vertical, ``z`` depth (meters) and ``theta`` the yaw in radians, kept in
``[-pi, pi)``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, UnusableSegmentError

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
DEFAULT_CONTEXT_LENGTH = 20
DEFAULT_FRAME_RATE = 10.0


def wrap_angle(theta):
    """Map an angle (scalar or array) to the half-open interval [-pi, pi)."""
    if np.ndim(theta) == 0:
        theta = float(theta)
        if not math.isfinite(theta):
            raise InvalidInputError(f"non-finite angle: {theta}")
        r = (theta + math.pi) % TWO_PI - math.pi
        # float modulo can round up to exactly 2*pi
        if r >= math.pi:
            r -= TWO_PI
        return r
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise InvalidInputError("non-finite angle in array")
    r = np.mod(theta + math.pi, TWO_PI) - math.pi
    return np.where(r >= math.pi, r - TWO_PI, r)


def angular_error(a, b):
    """Geodesic distance on the circle between two angles, in [0, pi]."""
    d = np.abs(wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    if np.ndim(d) == 0:
        return float(d)
    return d


def circular_mean(angles, weights=None) -> float | None:
    """atan2 of the averaged unit vectors; None when the mean vector vanishes."""
    angles = np.asarray(angles, dtype=float)
    s = np.average(np.sin(angles), weights=weights)
    c = np.average(np.cos(angles), weights=weights)
    if math.hypot(s, c) < 1e-12:
        return None
    return wrap_angle(math.atan2(s, c))


class Direction(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.theta)
        if not all(math.isfinite(float(v)) for v in vals):
            raise InvalidInputError(f"non-finite pose component in {vals}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "z", float(self.z))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, v: Sequence[float]) -> "Pose":
        if len(v) != 4:
            raise InvalidInputError(f"pose needs 4 components, got {len(v)}")
        return cls(v[0], v[1], v[2], v[3])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def distance(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


ORIGIN = Pose(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class MeasuredPose:
    """A pose reported by the upstream estimator.

    ``valid=False`` marks a mis-detection; its pose is a placeholder until
    :func:`mean_substitute` fills it in and sets ``substituted``.
    """

    pose: Pose
    valid: bool = True
    substituted: bool = False


@dataclass(frozen=True)
class Trajectory:
    vehicle_id: str
    frame_start: int
    poses: tuple[MeasuredPose, ...]
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if self.frame_rate <= 0:
            raise InvalidInputError(f"frame_rate must be positive, got {self.frame_rate}")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def frames(self) -> range:
        return range(self.frame_start, self.frame_start + len(self.poses))

    def values(self) -> np.ndarray:
        """(L, 4) array of pose components."""
        return poses_to_array(m.pose for m in self.poses)

    def valid_mask(self) -> np.ndarray:
        return np.array([m.valid for m in self.poses], dtype=bool)

    @classmethod
    def from_arrays(cls, vehicle_id, frame_start, values, valid=None,
                    frame_rate=DEFAULT_FRAME_RATE) -> "Trajectory":
        values = np.asarray(values, dtype=float)
        if valid is None:
            valid = np.ones(len(values), dtype=bool)
        items = tuple(MeasuredPose(Pose.from_array(v), bool(ok)) for v, ok in zip(values, valid))
        return cls(str(vehicle_id), int(frame_start), items, float(frame_rate))


@dataclass(frozen=True)
class TrajectorySegment:
    source_id: str
    frame_offset: int
    items: tuple[MeasuredPose, ...]
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def values(self) -> np.ndarray:
        return poses_to_array(m.pose for m in self.items)

    def valid_mask(self) -> np.ndarray:
        return np.array([m.valid for m in self.items], dtype=bool)

    def observed_mask(self) -> np.ndarray:
        """True where the item is a real detection (not substituted, not missing)."""
        return np.array([m.valid and not m.substituted for m in self.items], dtype=bool)

    def chronological_frames(self) -> range:
        return range(self.frame_offset, self.frame_offset + len(self.items))


def poses_to_array(poses: Iterable[Pose]) -> np.ndarray:
    rows = [(p.x, p.y, p.z, p.theta) for p in poses]
    return np.array(rows, dtype=float).reshape(-1, 4)


def segment_trajectory(traj: Trajectory, T: int = DEFAULT_CONTEXT_LENGTH,
                       stride: int = 1) -> list[TrajectorySegment]:
    """Cut a trajectory into forward windows of length ``T``.

    A trajectory shorter than ``T`` yields no windows and a logged warning.
    """
    if T < 2:
        raise InvalidInputError(f"context length must be >= 2, got {T}")
    if stride < 1:
        raise InvalidInputError(f"stride must be >= 1, got {stride}")
    n = len(traj.poses)
    if n < T:
        log.warning("trajectory %s has %d frames < context length %d; skipped",
                    traj.vehicle_id, n, T)
        return []
    return [
        TrajectorySegment(traj.vehicle_id, traj.frame_start + s, traj.poses[s:s + T])
        for s in range(0, n - T + 1, stride)
    ]


def mean_substitute(seg: TrajectorySegment) -> TrajectorySegment:
    """Replace mis-detected items with the mean of the segment's valid poses.

    Translation uses the arithmetic mean, yaw the circular mean. If the valid
    yaws cancel out exactly, each slot takes the yaw of its nearest valid
    neighbour instead.
    """
    valid = seg.valid_mask()
    if not valid.any():
        raise UnusableSegmentError(
            f"segment {seg.source_id}@{seg.frame_offset} has no valid measurement")
    if valid.all():
        return seg
    vals = seg.values()
    mean_t = vals[valid, :3].mean(axis=0)
    mean_theta = circular_mean(vals[valid, 3])
    valid_idx = np.flatnonzero(valid)
    items = list(seg.items)
    for k in np.flatnonzero(~valid):
        theta = mean_theta
        if theta is None:
            nearest = valid_idx[np.argmin(np.abs(valid_idx - k))]
            theta = vals[nearest, 3]
        pose = Pose(mean_t[0], mean_t[1], mean_t[2], theta)
        items[k] = MeasuredPose(pose, valid=True, substituted=True)
    return replace(seg, items=tuple(items))


def reverse_segment(seg: TrajectorySegment) -> TrajectorySegment:
    if seg.direction is not Direction.FORWARD:
        raise InvalidInputError("segment is already time-reversed")
    return replace(seg, items=seg.items[::-1], direction=Direction.BACKWARD)


def unreverse_segment(seg: TrajectorySegment) -> TrajectorySegment:
    """Inverse of :func:`reverse_segment`."""
    if seg.direction is not Direction.BACKWARD:
        raise InvalidInputError("segment is not time-reversed")
    return replace(seg, items=seg.items[::-1], direction=Direction.FORWARD)
