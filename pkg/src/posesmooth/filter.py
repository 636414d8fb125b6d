"""Learned Kalman recursion, bi-directional orchestration and trajectory smoothing.

Each branch starts from the zero state and, for every measurement in its
processing order, predicts with the future-state predictor and corrects
with the gain produced by the recurrent gain cell. The forward branch reads
a window chronologically, the backward branch reads it reversed. The
conditional output block keeps the branch whose first observed measurement
is closer to the camera.

The batched recursion records a tape that :func:`branch_backward` replays
in reverse to get exact parameter gradients through both the state and the
hidden-state recursions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nets
from .errors import InternalConsistencyError, InvalidInputError
from .nets import NormStats, Params
from .trajectory import (DEFAULT_CONTEXT_LENGTH, Direction, Pose, Trajectory,
                         TrajectorySegment, mean_substitute, reverse_segment,
                         segment_trajectory, wrap_angle)

log = logging.getLogger(__name__)


@dataclass
class FilterModel:
    """Both branch parameter sets plus the normalization they were trained with."""

    forward: Params
    backward: Params
    stats: NormStats
    loss_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def params_for(self, direction: Direction) -> Params:
        return self.forward if direction is Direction.FORWARD else self.backward

    @property
    def config(self) -> nets.NetConfig:
        return nets.config_from_params(self.forward)


def init_model(seed: int, stats: NormStats | None = None,
               cfg: nets.NetConfig = nets.NetConfig()) -> FilterModel:
    """Training start point: Glorot weights with zeroed output projections."""
    rng = np.random.default_rng([seed, 0])
    fwd = nets.init_branch(rng, cfg, zero_output=True)
    bwd = nets.init_branch(rng, cfg, zero_output=True)
    return FilterModel(fwd, bwd, stats or NormStats.identity())


# ---------------------------------------------------------------- recursion

@dataclass
class BranchTape:
    params: Params
    stats: NormStats
    stfem_enabled: bool
    stfem_cache: tuple | None
    steps: list = field(default_factory=list)
    states: np.ndarray | None = None


def _step(p, stats, x, h, res, r_k, P):
    xhat, fcache = nets.fsp_apply(p, stats, x, P)
    delta = r_k - xhat
    delta[:, 3] = wrap_angle(delta[:, 3])
    K, h_new, gcache = nets.gain_apply(p, stats, delta, res, h)
    corr = np.einsum("bij,bj->bi", K, delta)
    x_new = xhat + corr
    x_new[:, 3] = wrap_angle(x_new[:, 3])
    return x_new, h_new, corr, (fcache, delta, K, h_new, gcache)


def branch_forward(p: Params, stats: NormStats, seqs: np.ndarray, *,
                   record: bool = False, stfem_enabled: bool = True):
    """Run one branch over (B, T, 4) measurement windows in processing order.

    Returns the (B, T, 4) posterior states, plus the tape when ``record``.
    """
    seqs = np.asarray(seqs, dtype=float)
    if seqs.ndim != 3 or seqs.shape[2] != 4:
        raise InvalidInputError(f"expected (B, T, 4) windows, got {seqs.shape}")
    if not np.all(np.isfinite(seqs)):
        raise InvalidInputError("non-finite measurements")
    B, T, _ = seqs.shape
    C2 = p["stfem.w2"].shape[2]
    G = p["gain.w_hh"].shape[0]
    if stfem_enabled:
        P, stcache = nets.stfem_apply(p, stats.normalize(seqs))
    else:
        P, stcache = np.zeros((B, C2)), None
    tape = BranchTape(p, stats, stfem_enabled, stcache)
    x = np.zeros((B, 4))
    h = np.zeros((B, G))
    res = np.zeros((B, 4))
    states = np.empty((B, T, 4))
    for k in range(T):
        x, h, res, cache = _step(p, stats, x, h, res, seqs[:, k], P)
        states[:, k] = x
        if record:
            tape.steps.append(cache)
    tape.states = states
    return (states, tape) if record else states


def branch_backward(tape: BranchTape, dstates: np.ndarray) -> Params:
    """Exact gradient of sum(dstates * states) with respect to every parameter."""
    if tape.states is None or dstates.shape != tape.states.shape:
        raise InternalConsistencyError(
            f"gradient shape {np.shape(dstates)} does not match the recorded states")
    if len(tape.steps) != tape.states.shape[1]:
        raise InternalConsistencyError("tape was recorded without step caches")
    p, stats = tape.params, tape.stats
    grads = nets.zero_grads(p)
    B = dstates.shape[0]
    dx = np.zeros((B, 4))
    dh = np.zeros((B, p["gain.w_hh"].shape[0]))
    dres = np.zeros((B, 4))
    dP = np.zeros((B, p["stfem.w2"].shape[2]))
    for k in range(len(tape.steps) - 1, -1, -1):
        fcache, delta, K, h_new, gcache = tape.steps[k]
        dx_new = dstates[:, k] + dx
        dcorr = dx_new + dres
        dK = dcorr[:, :, None] * delta[:, None, :]
        ddelta = np.einsum("bij,bi->bj", K, dcorr)
        dd_gain, dres, dh = nets.gain_backward(p, stats, gcache, h_new, dK, dh, grads)
        ddelta += dd_gain
        dxhat = dx_new - ddelta
        dx, dPk = nets.fsp_backward(p, stats, fcache, dxhat, grads)
        dP += dPk
    if tape.stfem_enabled:
        nets.stfem_backward(p, tape.stfem_cache, dP, grads)
    return grads


backward = branch_backward


def edlkf_step(x_prev, h, r_k, seg_values, params: Params, stats: NormStats,
               residual_prev=None):
    """One predict/correct step for a single window; returns (Pose, h')."""
    x = np.atleast_2d(np.asarray(x_prev.as_array() if isinstance(x_prev, Pose) else x_prev, float))
    r = np.atleast_2d(np.asarray(r_k.as_array() if isinstance(r_k, Pose) else r_k, float))
    res = np.zeros((1, 4)) if residual_prev is None else np.atleast_2d(residual_prev)
    P = np.atleast_2d(nets.stfem_forward(seg_values, params, stats))
    x_new, h_new, _, _ = _step(params, stats, x, np.atleast_2d(h), res, r, P)
    return Pose.from_array(x_new[0]), h_new[0]


# ---------------------------------------------------------------- branches and COB

@dataclass(frozen=True)
class BranchOutput:
    states: tuple[Pose, ...]
    direction: Direction
    start_depth: float


@dataclass(frozen=True)
class SmoothedSegment:
    poses: tuple[Pose, ...]
    chosen_branch: Direction


def start_depth(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Camera distance of the first observed item in processing order.

    values: (B, T, 4), observed: (B, T) bool. Falls back to the first item
    when a window has no observed item.
    """
    first = np.where(observed.any(axis=1), observed.argmax(axis=1), 0)
    t = values[np.arange(len(values)), first, :3]
    return np.linalg.norm(t, axis=1)


def run_branch(seg: TrajectorySegment, model: FilterModel, *,
               stfem_enabled: bool = True) -> BranchOutput:
    if not all(m.valid for m in seg.items):
        raise InvalidInputError("segment must be mean-substituted before filtering")
    vals = seg.values()[None]
    states = branch_forward(model.params_for(seg.direction), model.stats, vals,
                            stfem_enabled=stfem_enabled)[0]
    depth = start_depth(vals, seg.observed_mask()[None])[0]
    return BranchOutput(tuple(Pose.from_array(s) for s in states), seg.direction, float(depth))


def cob_combine(fwd: BranchOutput, bwd: BranchOutput) -> SmoothedSegment:
    if fwd.direction is not Direction.FORWARD or bwd.direction is not Direction.BACKWARD:
        raise InvalidInputError("cob_combine expects (forward, backward) branch outputs")
    if len(fwd.states) != len(bwd.states):
        raise InvalidInputError("branch outputs differ in length")
    if bwd.start_depth < fwd.start_depth:
        return SmoothedSegment(tuple(reversed(bwd.states)), Direction.BACKWARD)
    return SmoothedSegment(tuple(fwd.states), Direction.FORWARD)


def smooth_windows(values: np.ndarray, observed: np.ndarray, model: FilterModel, *,
                   mode: str = "cob", stfem_enabled: bool = True):
    """Batched smoothing of chronological (N, T, 4) mean-substituted windows.

    ``mode`` is ``"cob"`` (both branches, conditional output), ``"forward"``
    or ``"backward"`` (single branch). Returns chronological (N, T, 4)
    estimates and a bool array that is True where the backward branch won.
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    if mode not in ("cob", "forward", "backward"):
        raise InvalidInputError(f"unknown smoothing mode {mode!r}")
    use_bwd = np.zeros(n, dtype=bool)
    out = None
    if mode in ("cob", "forward"):
        out = branch_forward(model.forward, model.stats, values, stfem_enabled=stfem_enabled)
    if mode in ("cob", "backward"):
        rev = values[:, ::-1]
        bwd = branch_forward(model.backward, model.stats, rev,
                             stfem_enabled=stfem_enabled)[:, ::-1]
        if mode == "backward":
            out, use_bwd = bwd, np.ones(n, dtype=bool)
        else:
            d_f = start_depth(values, observed)
            d_b = start_depth(rev, observed[:, ::-1])
            use_bwd = d_b < d_f
            out = np.where(use_bwd[:, None, None], bwd, out)
    return out, use_bwd


# ---------------------------------------------------------------- trajectories

def aggregate_overlaps(offsets: Sequence[int], estimates: np.ndarray, length: int) -> np.ndarray:
    """Per-frame mean of overlapping window estimates.

    offsets[i] is the start frame (relative) of estimates[i] (T, 4). x, y, z
    use the arithmetic mean and yaw the circular mean, both computed as
    deviations from the first estimate so identical inputs come back exactly.
    """
    estimates = np.asarray(estimates, dtype=float)
    T = estimates.shape[1]
    ref = np.full((length, 4), np.nan)
    for off, est in zip(offsets, estimates):
        blank = np.isnan(ref[off:off + T, 0])
        ref[off:off + T][blank] = est[blank]
    if np.isnan(ref[:, 0]).any():
        raise InvalidInputError("windows do not cover every frame")
    dev = np.zeros((length, 3))
    sin = np.zeros(length)
    cos = np.zeros(length)
    count = np.zeros(length)
    for off, est in zip(offsets, estimates):
        sl = slice(off, off + T)
        dev[sl] += est[:, :3] - ref[sl, :3]
        dtheta = est[:, 3] - ref[sl, 3]
        sin[sl] += np.sin(dtheta)
        cos[sl] += np.cos(dtheta)
        count[sl] += 1
    out = np.empty((length, 4))
    out[:, :3] = ref[:, :3] + dev / count[:, None]
    out[:, 3] = wrap_angle(ref[:, 3] + np.arctan2(sin, cos))
    return out


def prepare_windows(traj: Trajectory, T: int):
    """Mean-substituted stride-1 windows as arrays: (offsets, values, observed)."""
    segs = [mean_substitute(s) for s in segment_trajectory(traj, T, 1)]
    if not segs:
        return [], np.zeros((0, T, 4)), np.zeros((0, T), dtype=bool)
    offsets = [s.frame_offset - traj.frame_start for s in segs]
    values = np.stack([s.values() for s in segs])
    observed = np.stack([s.observed_mask() for s in segs])
    return offsets, values, observed


def smooth_trajectory(traj: Trajectory, model: FilterModel, T: int = DEFAULT_CONTEXT_LENGTH,
                      *, mode: str = "cob", stfem_enabled: bool = True) -> Trajectory:
    """Smooth every stride-1 window and merge the overlaps per frame."""
    offsets, values, observed = prepare_windows(traj, T)
    if not offsets:
        log.warning("trajectory %s shorter than %d frames returned unmodified", traj.vehicle_id, T)
        return traj
    est, _ = smooth_windows(values, observed, model, mode=mode, stfem_enabled=stfem_enabled)
    merged = aggregate_overlaps(offsets, est, len(traj))
    return Trajectory.from_arrays(traj.vehicle_id, traj.frame_start, merged,
                                  frame_rate=traj.frame_rate)


def smooth_segment(seg: TrajectorySegment, model: FilterModel) -> SmoothedSegment:
    """Bi-directional smoothing of one forward window."""
    seg = mean_substitute(seg)
    return cob_combine(run_branch(seg, model), run_branch(reverse_segment(seg), model))
