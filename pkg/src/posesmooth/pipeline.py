"""Method dispatch and evaluation plumbing shared by the CLI and the tests."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import classic
from .errors import InvalidInputError
from .filter import FilterModel, aggregate_overlaps, prepare_windows, smooth_trajectory
from .metrics import EvalSet
from .trajectory import (DEFAULT_CONTEXT_LENGTH, Trajectory, TrajectorySegment, mean_substitute)

log = logging.getLogger(__name__)

METHODS = ("raw", "mbkf", "deepkalpose")


def fill_missing(traj: Trajectory, T: int = DEFAULT_CONTEXT_LENGTH) -> Trajectory:
    """Raw estimator output with mis-detections mean-substituted.

    Uses the same stride-1 windows as the filters, so a missing frame gets
    the average of its windows' substitutes. Trajectories shorter than ``T``
    are substituted as a single window.
    """
    if traj.valid_mask().all():
        return traj
    if len(traj) >= T:
        offsets, values, _ = prepare_windows(traj, T)
        merged = aggregate_overlaps(offsets, values, len(traj))
    else:
        merged = mean_substitute(TrajectorySegment(traj.vehicle_id, traj.frame_start,
                                                   traj.poses)).values()
    return Trajectory.from_arrays(traj.vehicle_id, traj.frame_start, merged,
                                  frame_rate=traj.frame_rate)


def mbkf_trajectory(traj: Trajectory, cfg: classic.NoiseConfig | None = None,
                    T: int = DEFAULT_CONTEXT_LENGTH) -> Trajectory:
    """Classic filter over the same overlapping windows as the learned smoother."""
    offsets, values, _ = prepare_windows(traj, T)
    if not offsets:
        log.warning("trajectory %s shorter than %d frames returned unmodified", traj.vehicle_id, T)
        return traj
    est = classic.mbkf_filter_batch(values, cfg or classic.NoiseConfig(), 1.0 / traj.frame_rate)
    merged = aggregate_overlaps(offsets, est, len(traj))
    return Trajectory.from_arrays(traj.vehicle_id, traj.frame_start, merged,
                                  frame_rate=traj.frame_rate)


def run_method(method: str, trajs: Sequence[Trajectory], model: FilterModel | None = None,
               T: int = DEFAULT_CONTEXT_LENGTH, **kw) -> list[Trajectory]:
    if method == "raw":
        return list(trajs)
    if method == "mbkf":
        return [mbkf_trajectory(t, kw.get("noise"), T) for t in trajs]
    if method == "deepkalpose":
        if model is None:
            raise InvalidInputError("the deepkalpose method needs a checkpoint")
        return [smooth_trajectory(t, model, T, mode=kw.get("mode", "cob"),
                                  stfem_enabled=kw.get("stfem_enabled", True)) for t in trajs]
    raise InvalidInputError(f"unknown method {method!r}; choose from {METHODS}")


def eval_set(pred: Sequence[Trajectory], gt: Sequence[Trajectory],
             meas: Sequence[Trajectory] | None = None,
             T: int = DEFAULT_CONTEXT_LENGTH) -> EvalSet:
    """Frame-aligned evaluation pairs.

    A frame counts as occluded when the measurement (``meas``, else
    ``pred``) flags it invalid. Invalid predicted frames are
    mean-substituted first.
    """
    gt_by = {t.vehicle_id: t for t in gt}
    meas_by = {t.vehicle_id: t for t in (meas if meas is not None else pred)}
    if set(gt_by) != {t.vehicle_id for t in pred} or set(meas_by) != set(gt_by):
        raise InvalidInputError("prediction, ground truth and measurement vehicle sets differ")
    sets = []
    for p in pred:
        g, m = gt_by[p.vehicle_id], meas_by[p.vehicle_id]
        for other in (g, m):
            if other.frame_start != p.frame_start or len(other) != len(p):
                raise InvalidInputError(
                    f"frames of {p.vehicle_id} differ: {p.frame_start}+{len(p)} vs "
                    f"{other.frame_start}+{len(other)}")
        if not p.valid_mask().all():
            log.info("mean-substituting missing predictions of %s", p.vehicle_id)
            p = fill_missing(p, T)
        sets.append(EvalSet(p.values(), g.values(), ~m.valid_mask()))
    return EvalSet.concat(sets)
