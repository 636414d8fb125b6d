"""Pose accuracy metrics and binned reports.

Internal values are fractions and radians; percent and degree formatting
only happens when a report is written.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .trajectory import Pose, angular_error

log = logging.getLogger(__name__)

DELTAS = (math.pi / 6, math.pi / 18)
DEPTH_EDGES = (40.0,)
REPORT_COLUMNS = ("method", "bin", "n", "ared_pct", "acc_pi6_pct", "acc_pi18_pct", "mederr_deg")


@dataclass(frozen=True)
class EvalPair:
    pred: Pose
    gt: Pose
    occluded: bool = False

    @property
    def depth(self) -> float:
        return self.gt.distance


@dataclass(frozen=True)
class EvalSet:
    """Columnar form of many :class:`EvalPair`: (N, 4) pred and gt arrays."""

    pred: np.ndarray
    gt: np.ndarray
    occluded: np.ndarray

    def __post_init__(self):
        pred = np.asarray(self.pred, dtype=float).reshape(-1, 4)
        gt = np.asarray(self.gt, dtype=float).reshape(-1, 4)
        occ = np.asarray(self.occluded, dtype=bool).reshape(-1)
        if not (len(pred) == len(gt) == len(occ)):
            raise InvalidInputError("pred, gt and occlusion flags differ in length")
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "gt", gt)
        object.__setattr__(self, "occluded", occ)

    def __len__(self) -> int:
        return len(self.pred)

    @property
    def depth(self) -> np.ndarray:
        return np.linalg.norm(self.gt[:, :3], axis=1)

    def select(self, mask) -> "EvalSet":
        return EvalSet(self.pred[mask], self.gt[mask], self.occluded[mask])

    @classmethod
    def from_pairs(cls, pairs: Iterable[EvalPair]) -> "EvalSet":
        pairs = list(pairs)
        pred = np.array([p.pred.as_array() for p in pairs]).reshape(-1, 4)
        gt = np.array([p.gt.as_array() for p in pairs]).reshape(-1, 4)
        return cls(pred, gt, np.array([p.occluded for p in pairs], dtype=bool))

    @classmethod
    def concat(cls, sets: Sequence["EvalSet"]) -> "EvalSet":
        if not sets:
            return cls(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0, bool))
        return cls(np.concatenate([s.pred for s in sets]), np.concatenate([s.gt for s in sets]),
                   np.concatenate([s.occluded for s in sets]))


def _as_set(pairs) -> EvalSet:
    return pairs if isinstance(pairs, EvalSet) else EvalSet.from_pairs(pairs)


def relative_errors(pairs) -> np.ndarray:
    s = _as_set(pairs)
    norm = np.linalg.norm(s.gt[:, :3], axis=1)
    zero = np.flatnonzero(norm == 0)
    if zero.size:
        raise InvalidInputError(f"ground truth translation has zero norm at pair {zero[0]}")
    return np.linalg.norm(s.pred[:, :3] - s.gt[:, :3], axis=1) / norm


def ared(pairs) -> float:
    """Mean of ||t_pred - t_gt|| / ||t_gt|| over the pairs."""
    s = _as_set(pairs)
    if len(s) == 0:
        raise InvalidInputError("ared of an empty pair set")
    return float(relative_errors(s).mean())


def yaw_errors(pairs) -> np.ndarray:
    s = _as_set(pairs)
    return np.atleast_1d(angular_error(s.pred[:, 3], s.gt[:, 3]))


def acc_delta(pairs, delta: float) -> float:
    """Fraction of pairs whose yaw error is strictly below ``delta``."""
    s = _as_set(pairs)
    if len(s) == 0:
        raise InvalidInputError("acc_delta of an empty pair set")
    return float(np.mean(yaw_errors(s) < delta))


def mederr(pairs) -> float:
    """Median yaw error in degrees."""
    s = _as_set(pairs)
    if len(s) == 0:
        raise InvalidInputError("mederr of an empty pair set")
    return math.degrees(float(np.median(yaw_errors(s))))


@dataclass(frozen=True)
class EvalReport:
    label: str
    ared: float
    acc: dict[float, float]
    mederr: float
    n: int

    def row(self, method: str) -> list[str]:
        return [method, self.label, str(self.n), f"{100 * self.ared:.2f}",
                f"{100 * self.acc[DELTAS[0]]:.2f}", f"{100 * self.acc[DELTAS[1]]:.2f}",
                f"{self.mederr:.2f}"]


def report(pairs, label: str = "all", deltas: Sequence[float] = DELTAS) -> EvalReport:
    s = _as_set(pairs)
    return EvalReport(label, ared(s), {d: acc_delta(s, d) for d in deltas}, mederr(s), len(s))


def depth_label(lo: float, hi: float) -> str:
    hi_s = "inf" if math.isinf(hi) else f"{hi:g}m"
    return f"{lo:g}m-{hi_s}"


def binned_report(pairs, bins="none") -> list[EvalReport]:
    """Reports per bin.

    ``bins`` is ``"none"``, ``"occlusion"`` or an increasing sequence of
    depth edges in meters (e.g. ``(40,)`` gives 0m-40m and 40m-inf). Empty
    bins are left out.
    """
    s = _as_set(pairs)
    if isinstance(bins, str):
        if bins == "none":
            groups = [("all", np.ones(len(s), bool))]
        elif bins == "occlusion":
            groups = [("visible", ~s.occluded), ("occluded", s.occluded)]
        else:
            raise InvalidInputError(f"unknown binning {bins!r}")
    else:
        edges = [0.0, *map(float, bins), math.inf]
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise InvalidInputError(f"depth edges must increase: {bins}")
        depth = s.depth
        groups = [(depth_label(lo, hi), (depth >= lo) & (depth < hi))
                  for lo, hi in zip(edges, edges[1:])]
    out = []
    for label, mask in groups:
        if not mask.any():
            log.info("bin %s is empty; omitted", label)
            continue
        out.append(report(s.select(mask), label))
    return out


def depth_curve(pairs, n_bins: int = 10) -> np.ndarray:
    """ARED mean and variance per depth decile: rows (bin_center, mean, var)."""
    s = _as_set(pairs)
    if len(s) == 0:
        return np.zeros((0, 3))
    depth = s.depth
    rel = relative_errors(s)
    edges = np.quantile(depth, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges, depth, side="right") - 1, 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = rel[idx == b]
        if sel.size:
            rows.append((0.5 * (edges[b] + edges[b + 1]), sel.mean(), sel.var()))
    return np.array(rows).reshape(-1, 3)


def write_reports(rows: Sequence[tuple[str, EvalReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for method, rep in rows:
            w.writerow(rep.row(method))


def write_curve(curves: dict[str, np.ndarray], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "depth_bin_center", "ared_mean", "ared_var"))
        for method, curve in curves.items():
            for c, m, v in curve:
                w.writerow((method, f"{c:.6g}", f"{m:.6g}", f"{v:.6g}"))


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    header = ["method", "bin", "n", "ARED%", "Acc(pi/6)%", "Acc(pi/18)%", "Mederr(deg)"]
    body = [rep.row(method) for method, rep in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines)
