"""Synthetic vehicle trajectories and the trajectory record format.

Ground truth follows simple planar kinematics in the camera frame (x
lateral, y vertical, z depth; heading ``theta`` points the vehicle along
``(cos theta, 0, -sin theta)``). The noisy copy mimics a per-frame monocular
estimator: Gaussian errors that grow linearly with depth, occasional
flicker outliers, and occlusion windows where the detection is missing.

Record format (one file may hold many vehicles)::

    # frame_rate=10
    vehicle_id,frame,x,y,z,theta,valid
    car0007,12,1.5,1.62,23.1,-1.57,1
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, InvalidInputError
from .trajectory import (DEFAULT_FRAME_RATE, ORIGIN, MeasuredPose, Pose, Trajectory, wrap_angle)

log = logging.getLogger(__name__)

COLUMNS = ("vehicle_id", "frame", "x", "y", "z", "theta", "valid")


class MotionKind(enum.Enum):
    CONSTANT_VELOCITY = "cv"
    CONSTANT_TURN_RATE = "ctr"
    ACCELERATING = "accel"
    STOPPING = "stop"


@dataclass(frozen=True)
class MotionPattern:
    kind: MotionKind
    initial: Pose
    speed: float = 5.0
    yaw_rate: float = 0.0
    acceleration: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.speed <= 40.0:
            raise InvalidInputError(f"speed {self.speed} outside [0, 40] m/s")
        if abs(self.yaw_rate) > 0.5:
            raise InvalidInputError(f"|yaw_rate| {self.yaw_rate} exceeds 0.5 rad/s")
        if self.kind is MotionKind.ACCELERATING and self.acceleration < 0:
            raise InvalidInputError("accelerating pattern needs acceleration >= 0")
        if self.kind is MotionKind.STOPPING and self.acceleration > 0:
            raise InvalidInputError("stopping pattern needs acceleration <= 0")


@dataclass(frozen=True)
class NoiseModel:
    sigma_pos_base: float = 0.2
    sigma_pos_slope: float = 0.04
    sigma_theta_base: float = math.radians(2.0)
    sigma_theta_slope: float = math.radians(0.15)
    outlier_prob: float = 0.05
    outlier_scale: float = 5.0

    def __post_init__(self):
        vals = (self.sigma_pos_base, self.sigma_pos_slope, self.sigma_theta_base,
                self.sigma_theta_slope, self.outlier_prob, self.outlier_scale)
        if any(v < 0 for v in vals):
            raise InvalidInputError("noise parameters must be non-negative")
        if self.outlier_prob > 0.2:
            raise InvalidInputError("outlier_prob must be <= 0.2")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class ScenarioConfig:
    n_trajectories: int = 200
    min_length: int = 20
    max_length: int = 60
    frame_rate: float = DEFAULT_FRAME_RATE
    occlusion_prob: float = 0.3
    occlusion_min: int = 3
    occlusion_max: int = 10
    occlusion_margin: int = 3
    occlusion_noise_scale: float = 3.0
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.n_trajectories < 0:
            raise InvalidInputError("n_trajectories must be >= 0")
        if not 2 <= self.min_length <= self.max_length:
            raise InvalidInputError("need 2 <= min_length <= max_length")
        if not 0 <= self.occlusion_min <= self.occlusion_max:
            raise InvalidInputError("need 0 <= occlusion_min <= occlusion_max")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise InvalidInputError("occlusion_prob must be a probability")
        if self.occlusion_margin < 0 or self.occlusion_noise_scale < 0:
            raise InvalidInputError("occlusion margin and noise scale must be non-negative")


def integrate(pattern: MotionPattern, length: int, dt: float) -> np.ndarray:
    """Exact output of the discrete kinematic integrator, shape (length, 4)."""
    out = np.empty((length, 4))
    x, y, z, theta = pattern.initial.x, pattern.initial.y, pattern.initial.z, pattern.initial.theta
    v = pattern.speed
    omega = pattern.yaw_rate if pattern.kind is MotionKind.CONSTANT_TURN_RATE else 0.0
    accel = pattern.acceleration if pattern.kind in (MotionKind.ACCELERATING, MotionKind.STOPPING) else 0.0
    for k in range(length):
        out[k] = (x, y, z, theta)
        x += v * dt * math.cos(theta)
        z -= v * dt * math.sin(theta)
        theta = wrap_angle(theta + omega * dt)
        v = min(max(v + accel * dt, 0.0), 40.0)
    return out


def generate_trajectory(pattern: MotionPattern, noise: NoiseModel, length: int, seed,
                        vehicle_id: str = "car0", frame_start: int = 0,
                        frame_rate: float = DEFAULT_FRAME_RATE,
                        noise_boost=None) -> tuple[Trajectory, Trajectory]:
    """Ground truth and estimator-like noisy observations of one vehicle.

    ``noise_boost`` optionally multiplies the per-frame noise (length
    ``length``), e.g. for partially occluded frames.
    """
    if length < 2:
        raise InvalidInputError(f"length must be >= 2, got {length}")
    gt = integrate(pattern, length, 1.0 / frame_rate)
    rng = np.random.default_rng(seed)
    depth = np.maximum(gt[:, 2], 0.0)
    sig_pos = noise.sigma_pos_base + noise.sigma_pos_slope * depth
    sig_theta = noise.sigma_theta_base + noise.sigma_theta_slope * depth
    eps = rng.standard_normal((length, 4))
    boost = np.where(rng.random(length) < noise.outlier_prob, noise.outlier_scale, 1.0)
    if noise_boost is not None:
        boost = boost * np.asarray(noise_boost, dtype=float)
    noisy = gt.copy()
    noisy[:, :3] += eps[:, :3] * (sig_pos * boost)[:, None]
    noisy[:, 3] = wrap_angle(gt[:, 3] + eps[:, 3] * sig_theta * boost)
    return (Trajectory.from_arrays(vehicle_id, frame_start, gt, frame_rate=frame_rate),
            Trajectory.from_arrays(vehicle_id, frame_start, noisy, frame_rate=frame_rate))


def apply_occlusion(traj: Trajectory, window_start: int, window_len: int) -> Trajectory:
    """Mark ``window_len`` frames from index ``window_start`` as missed detections."""
    if window_len < 0 or window_start < 0 or window_start + window_len > len(traj):
        raise InvalidInputError(
            f"occlusion window [{window_start}, {window_start + window_len}) outside trajectory")
    poses = list(traj.poses)
    for k in range(window_start, window_start + window_len):
        poses[k] = MeasuredPose(ORIGIN, valid=False)
    return Trajectory(traj.vehicle_id, traj.frame_start, tuple(poses), traj.frame_rate)


def sample_pattern(rng: np.random.Generator, length: int, dt: float,
                   max_tries: int = 100) -> MotionPattern:
    """Random pattern whose path stays in front of the camera and in view."""
    kinds = list(MotionKind)
    for _ in range(max_tries):
        kind = kinds[rng.integers(len(kinds))]
        if rng.random() < 0.7:
            theta = (math.pi / 2 if rng.random() < 0.5 else -math.pi / 2) + rng.normal(0, 0.15)
        else:
            theta = rng.uniform(-math.pi, math.pi)
        start = Pose(rng.uniform(-12, 12), 1.6 + rng.normal(0, 0.1), rng.uniform(6, 75), theta)
        speed = rng.uniform(0, 12)
        yaw_rate = rng.uniform(-0.4, 0.4) if kind is MotionKind.CONSTANT_TURN_RATE else 0.0
        accel = {MotionKind.ACCELERATING: rng.uniform(0.5, 3.0),
                 MotionKind.STOPPING: -rng.uniform(0.5, 4.0)}.get(kind, 0.0)
        pattern = MotionPattern(kind, start, speed, yaw_rate, accel)
        path = integrate(pattern, length, dt)
        if path[:, 2].min() >= 4.0 and path[:, 2].max() <= 85.0 and np.abs(path[:, 0]).max() <= 25.0:
            return pattern
    raise InvalidInputError("could not sample an in-view motion pattern")


def generate_scenario(cfg: ScenarioConfig) -> tuple[list[Trajectory], list[Trajectory]]:
    """Paired (ground truth, noisy) trajectories, one independent sub-seed each.

    With probability ``occlusion_prob`` a trajectory gets one dropout
    window; the ``occlusion_margin`` frames on either side are partially
    occluded and their noise is multiplied by ``occlusion_noise_scale``.
    """
    gts, noisies = [], []
    dt = 1.0 / cfg.frame_rate
    for i in range(cfg.n_trajectories):
        rng = np.random.default_rng([cfg.seed, i])
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        pattern = sample_pattern(rng, length, dt)
        vid = f"car{i:04d}"
        frame_start = int(rng.integers(0, 100))
        window = None
        boost = np.ones(length)
        if cfg.occlusion_max > 0 and rng.random() < cfg.occlusion_prob:
            w = min(int(rng.integers(cfg.occlusion_min, cfg.occlusion_max + 1)), length - 1)
            start = int(rng.integers(0, length - w + 1))
            window = (start, w)
            lo, hi = max(0, start - cfg.occlusion_margin), min(length, start + w + cfg.occlusion_margin)
            boost[lo:hi] = cfg.occlusion_noise_scale
        gt, noisy = generate_trajectory(pattern, cfg.noise, length, rng, vid, frame_start,
                                        cfg.frame_rate, noise_boost=boost)
        if window is not None:
            noisy = apply_occlusion(noisy, *window)
        gts.append(gt)
        noisies.append(noisy)
    return gts, noisies


# ---------------------------------------------------------------- record I/O

def _fmt(v: float) -> str:
    return format(v, ".17g")


def write_trajectories(trajs: Sequence[Trajectory], path) -> None:
    rates = {t.frame_rate for t in trajs}
    if len(rates) > 1:
        raise InvalidInputError(f"trajectories in one file must share a frame rate, got {sorted(rates)}")
    rate = rates.pop() if rates else DEFAULT_FRAME_RATE
    with open(path, "w", newline="") as fh:
        fh.write(f"# frame_rate={_fmt(rate)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for t in trajs:
            for frame, m in zip(t.frames, t.poses):
                p = m.pose
                w.writerow([t.vehicle_id, frame, _fmt(p.x), _fmt(p.y), _fmt(p.z), _fmt(p.theta),
                            int(m.valid)])


def read_trajectories(path) -> list[Trajectory]:
    """Parse a record file; frame gaps become missed detections."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    rate = DEFAULT_FRAME_RATE
    rows: dict[str, list[tuple[int, MeasuredPose]]] = {}
    with open(path, newline="") as fh:
        lines = enumerate(fh, start=1)
        for lineno, line in lines:
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                key, _, val = s.lstrip("#").strip().partition("=")
                if key.strip() == "frame_rate":
                    try:
                        rate = float(val)
                    except ValueError:
                        raise DataFormatError(f"{path}:{lineno}: bad frame_rate {val!r}") from None
                continue
            fields = next(csv.reader([s]))
            if tuple(fields) == COLUMNS:
                continue
            if len(fields) != len(COLUMNS):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(fields)}")
            try:
                vid = fields[0]
                frame = int(fields[1])
                pose = Pose(*(float(v) for v in fields[2:6]))
                valid = {"1": True, "0": False}[fields[6].strip()]
            except (ValueError, KeyError, InvalidInputError) as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            seq = rows.setdefault(vid, [])
            if seq and frame <= seq[-1][0]:
                raise DataFormatError(
                    f"{path}:{lineno}: frame {frame} of {vid} not after frame {seq[-1][0]}")
            seq.append((frame, MeasuredPose(pose, valid)))
    trajs = []
    for vid, seq in rows.items():
        start = seq[0][0]
        items = []
        for frame, m in seq:
            while start + len(items) < frame:
                items.append(MeasuredPose(ORIGIN, valid=False))
            items.append(m)
        trajs.append(Trajectory(vid, start, tuple(items), rate))
    return trajs
