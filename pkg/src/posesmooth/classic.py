"""Model-based Kalman filter baseline with a constant-velocity motion model.

The state is ``[x, y, z, theta, vx, vy, vz, vtheta]``; every pose component
is an independent constant-velocity axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalError
from .trajectory import Pose, TrajectorySegment, wrap_angle

N_POSE = 4
N_STATE = 8
H = np.hstack([np.eye(N_POSE), np.zeros((N_POSE, N_POSE))])


@dataclass(frozen=True)
class NoiseConfig:
    q_pos: float = 0.1
    q_vel: float = 1.0
    r_pos: float = 0.5
    r_theta: float = 0.05
    p0: float = 10.0

    def __post_init__(self):
        for name in ("q_pos", "q_vel", "r_pos", "r_theta", "p0"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"NoiseConfig.{name} must be strictly positive")

    @property
    def R(self) -> np.ndarray:
        return np.diag([self.r_pos] * 3 + [self.r_theta])


@dataclass(frozen=True)
class CvState:
    s: np.ndarray
    P: np.ndarray

    @property
    def pose(self) -> Pose:
        return Pose.from_array(self.s[:N_POSE])


def transition(dt: float) -> np.ndarray:
    F = np.eye(N_STATE)
    F[:N_POSE, N_POSE:] = dt * np.eye(N_POSE)
    return F


def process_noise(dt: float, cfg: NoiseConfig) -> np.ndarray:
    """White-noise-acceleration block per axis plus a small position random walk.

    ``q_vel`` is the acceleration variance driving each axis, ``q_pos`` a
    per-second position diffusion that keeps Q full rank.
    """
    Q = np.zeros((N_STATE, N_STATE))
    pp = cfg.q_vel * dt**4 / 4 + cfg.q_pos * dt
    pv = cfg.q_vel * dt**3 / 2
    vv = cfg.q_vel * dt**2
    for i in range(N_POSE):
        j = i + N_POSE
        Q[i, i] = pp
        Q[i, j] = Q[j, i] = pv
        Q[j, j] = vv
    return Q


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def cv_predict(state: CvState, dt: float, cfg: NoiseConfig) -> CvState:
    if not dt > 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    F = transition(dt)
    s = F @ state.s
    s[3] = wrap_angle(s[3])
    P = _symmetrize(F @ state.P @ F.T + process_noise(dt, cfg))
    return CvState(s, P)


def kf_update(state: CvState, meas: Pose | np.ndarray, cfg: NoiseConfig) -> CvState:
    """Measurement update with the yaw innovation wrapped; Joseph-form covariance."""
    z = meas.as_array() if isinstance(meas, Pose) else np.asarray(meas, dtype=float)
    innov = z - H @ state.s
    innov[3] = wrap_angle(innov[3])
    S = H @ state.P @ H.T + cfg.R
    try:
        K = np.linalg.solve(S, H @ state.P).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular innovation covariance") from exc
    s = state.s + K @ innov
    s[3] = wrap_angle(s[3])
    IKH = np.eye(N_STATE) - K @ H
    P = _symmetrize(IKH @ state.P @ IKH.T + K @ cfg.R @ K.T)
    return CvState(s, P)


def initial_state(first: np.ndarray, cfg: NoiseConfig) -> CvState:
    s = np.zeros(N_STATE)
    s[:N_POSE] = first
    return CvState(s, cfg.p0 * np.eye(N_STATE))


def mbkf_filter(values: np.ndarray, cfg: NoiseConfig, dt: float) -> np.ndarray:
    """Forward-filter a (T, 4) measurement array; returns (T, 4) posterior poses.

    The state starts at the first measurement with zero velocity and
    covariance ``p0 * I``; the first frame is an update without prediction.
    """
    values = np.asarray(values, dtype=float)
    state = kf_update(initial_state(values[0], cfg), values[0], cfg)
    out = np.empty_like(values)
    out[0] = state.s[:N_POSE]
    for k in range(1, len(values)):
        state = kf_update(cv_predict(state, dt, cfg), values[k], cfg)
        out[k] = state.s[:N_POSE]
    return out


def mbkf_smooth_segment(seg: TrajectorySegment, cfg: NoiseConfig | None = None,
                        dt: float = 0.1) -> list[Pose]:
    if not all(m.valid for m in seg.items):
        raise InvalidInputError("segment must be mean-substituted before filtering")
    out = mbkf_filter(seg.values(), cfg or NoiseConfig(), dt)
    return [Pose.from_array(v) for v in out]


def mbkf_filter_batch(values: np.ndarray, cfg: NoiseConfig, dt: float) -> np.ndarray:
    """:func:`mbkf_filter` over (B, T, 4) windows at once.

    The covariance recursion does not depend on the data, so the gain
    sequence is computed once and shared by every window.
    """
    values = np.asarray(values, dtype=float)
    B, T, _ = values.shape
    F = transition(dt)
    Q = process_noise(dt, cfg)
    R = cfg.R
    P = cfg.p0 * np.eye(N_STATE)
    gains = []
    for k in range(T):
        if k:
            P = _symmetrize(F @ P @ F.T + Q)
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        IKH = np.eye(N_STATE) - K @ H
        P = _symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
        gains.append(K)
    s = np.zeros((B, N_STATE))
    s[:, :N_POSE] = values[:, 0]
    out = np.empty_like(values)
    for k in range(T):
        if k:
            s = s @ F.T
            s[:, 3] = wrap_angle(s[:, 3])
        innov = values[:, k] - s[:, :N_POSE]
        innov[:, 3] = wrap_angle(innov[:, 3])
        s = s + innov @ gains[k].T
        s[:, 3] = wrap_angle(s[:, 3])
        out[:, k] = s[:, :N_POSE]
    return out
