"""Losses, Adam, mini-batch training of both branches and gradient checking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nets
from .errors import InvalidInputError, NumericalError
from .filter import FilterModel, branch_backward, branch_forward, init_model
from .nets import NormStats, Params
from .trajectory import (DEFAULT_CONTEXT_LENGTH, Pose, Trajectory, TrajectorySegment,
                         mean_substitute, poses_to_array, segment_trajectory)

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    iterations: int = 4000
    T: int = DEFAULT_CONTEXT_LENGTH
    seed: int = 0
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidInputError("learning rate must be positive, weight decay non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidInputError("grad_clip must be positive or None")
        if self.batch_size < 1 or self.iterations < 0 or self.T < 2:
            raise InvalidInputError("batch_size >= 1, iterations >= 0 and T >= 2 required")


@dataclass(frozen=True)
class TrainSample:
    input_segment: TrajectorySegment
    target_segment: tuple[Pose, ...]

    def __post_init__(self):
        if len(self.input_segment) != len(self.target_segment):
            raise InvalidInputError("input and target lengths differ")


# ---------------------------------------------------------------- loss

def _as_poses(v) -> np.ndarray:
    if isinstance(v, np.ndarray):
        return np.asarray(v, dtype=float)
    return poses_to_array(v)


def batch_loss(pred: np.ndarray, target: np.ndarray):
    """Per-window loss and its gradient for (B, T, 4) arrays.

    L1 on translation plus ``1 - cos`` on yaw, averaged over time.
    """
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {pred.shape} and target {target.shape} differ")
    T = pred.shape[1]
    diff = pred - target
    per_step = np.abs(diff[..., :3]).sum(axis=-1) + 1.0 - np.cos(diff[..., 3])
    grad = np.empty_like(diff)
    grad[..., :3] = np.sign(diff[..., :3])
    grad[..., 3] = np.sin(diff[..., 3])
    return per_step.mean(axis=1), grad / T


def segment_loss(pred, target) -> float:
    p, t = _as_poses(pred), _as_poses(target)
    if p.shape != t.shape:
        raise InvalidInputError(f"length mismatch: {len(p)} vs {len(t)}")
    return float(batch_loss(p[None], t[None])[0][0])


def loss_and_grads(model: FilterModel, inputs: np.ndarray, targets: np.ndarray):
    """Batch-mean loss of both branches and the gradients of each parameter set.

    Each branch is scored on its own posterior sequence and the two losses
    are averaged; the conditional output block is not in the training path.
    """
    B = len(inputs)
    sf, tape_f = branch_forward(model.forward, model.stats, inputs, record=True)
    sb, tape_b = branch_forward(model.backward, model.stats, inputs[:, ::-1], record=True)
    lf, gf = batch_loss(sf, targets)
    lb, gb = batch_loss(sb, targets[:, ::-1])
    loss = float(np.mean(0.5 * (lf + lb)))
    grads_f = branch_backward(tape_f, gf * (0.5 / B))
    grads_b = branch_backward(tape_b, gb * (0.5 / B))
    return loss, grads_f, grads_b


def model_loss(model: FilterModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    sf = branch_forward(model.forward, model.stats, inputs)
    sb = branch_forward(model.backward, model.stats, inputs[:, ::-1])
    lf, _ = batch_loss(sf, targets)
    lb, _ = batch_loss(sb, targets[:, ::-1])
    return float(np.mean(0.5 * (lf + lb)))


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: Params
    v: Params

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(nets.zero_grads(params), nets.zero_grads(params))


def adam_step(params: Params, grads: Params, state: AdamState, cfg: TrainConfig, t: int):
    """Bias-corrected Adam with L2 weight decay folded into the gradient."""
    if t < 1:
        raise InvalidInputError("Adam step counter starts at 1")
    if set(params) != set(grads):
        raise InvalidInputError("parameter and gradient names differ")
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise InvalidInputError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        g = g + cfg.weight_decay * w
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        new_p[name] = w - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v)


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class WindowSet:
    """Array view of a segment dataset: inputs, targets, observed masks, depths."""

    inputs: np.ndarray
    targets: np.ndarray
    observed: np.ndarray
    source_ids: tuple[str, ...] = ()
    offsets: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        ids = tuple(self.source_ids[i] for i in idx) if self.source_ids else ()
        offs = tuple(self.offsets[i] for i in idx) if self.offsets else ()
        return WindowSet(self.inputs[idx], self.targets[idx], self.observed[idx], ids, offs)


def align_trajectories(gt: Sequence[Trajectory], noisy: Sequence[Trajectory]):
    """Pair trajectories by vehicle id; raises listing every misaligned id."""
    by_id = {t.vehicle_id: t for t in gt}
    bad, pairs = [], []
    for n in noisy:
        g = by_id.get(n.vehicle_id)
        if g is None or g.frame_start != n.frame_start or len(g) != len(n):
            bad.append(n.vehicle_id)
        else:
            pairs.append((g, n))
    bad += sorted(set(by_id) - {n.vehicle_id for n in noisy})
    if bad:
        raise InvalidInputError(f"misaligned trajectories: {', '.join(bad)}")
    return pairs


def build_samples(gt: Sequence[Trajectory], noisy: Sequence[Trajectory],
                  T: int = DEFAULT_CONTEXT_LENGTH) -> list[TrainSample]:
    samples = []
    for g, n in align_trajectories(gt, noisy):
        for gs, ns in zip(segment_trajectory(g, T), segment_trajectory(n, T)):
            if not ns.valid_mask().any():
                continue
            samples.append(TrainSample(mean_substitute(ns), tuple(m.pose for m in gs.items)))
    return samples


def to_windows(samples: Sequence[TrainSample]) -> WindowSet:
    if not samples:
        raise InvalidInputError("empty dataset")
    inputs = np.stack([s.input_segment.values() for s in samples])
    targets = np.stack([poses_to_array(s.target_segment) for s in samples])
    observed = np.stack([s.input_segment.observed_mask() for s in samples])
    ids = tuple(s.input_segment.source_id for s in samples)
    offs = tuple(s.input_segment.frame_offset for s in samples)
    return WindowSet(inputs, targets, observed, ids, offs)


# ---------------------------------------------------------------- training

def global_norm(*grad_sets: Params) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for gs in grad_sets for g in gs.values())))


def clip_gradients(gf: Params, gb: Params, max_norm: float):
    """Rescale both branch gradients together so their joint norm is at most ``max_norm``."""
    norm = global_norm(gf, gb)
    if norm <= max_norm:
        return gf, gb
    s = max_norm / norm
    return {k: v * s for k, v in gf.items()}, {k: v * s for k, v in gb.items()}


def train(dataset: Sequence[TrainSample] | WindowSet, cfg: TrainConfig = TrainConfig(),
          net_cfg: nets.NetConfig = nets.NetConfig(),
          on_iteration: Callable[[int, float], None] | None = None) -> FilterModel:
    """Jointly train the forward and backward branch on sampled mini-batches.

    Batches are drawn uniformly with replacement. The joint gradient of both
    branches is rescaled to global norm ``cfg.grad_clip`` when it exceeds it:
    a batch that drives the learned gain out of its stable range otherwise
    yields gradients many orders of magnitude above normal, which poison
    Adam's second moments for thousands of steps. The returned model carries
    the per-iteration training loss in ``loss_curve``.
    """
    data = dataset if isinstance(dataset, WindowSet) else to_windows(dataset)
    if len(data) == 0:
        raise InvalidInputError("empty dataset")
    if data.inputs.shape[1] != cfg.T:
        raise InvalidInputError(f"samples have length {data.inputs.shape[1]}, config T={cfg.T}")
    model = init_model(cfg.seed, NormStats.from_values(data.inputs), net_cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    state_f = AdamState.zeros_like(model.forward)
    state_b = AdamState.zeros_like(model.backward)
    curve = np.zeros(cfg.iterations)
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        loss, gf, gb = loss_and_grads(model, data.inputs[idx], data.targets[idx])
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in (*gf.values(), *gb.values())):
            raise NumericalError(f"non-finite loss or gradient at iteration {it + 1} (loss={loss})")
        if cfg.grad_clip is not None:
            gf, gb = clip_gradients(gf, gb, cfg.grad_clip)
        model.forward, state_f = adam_step(model.forward, gf, state_f, cfg, it + 1)
        model.backward, state_b = adam_step(model.backward, gb, state_b, cfg, it + 1)
        curve[it] = loss
        if on_iteration is not None:
            on_iteration(it + 1, loss)
    model.loss_curve = curve
    return model


# ---------------------------------------------------------------- gradient check

def probe_model(seed: int, stats: NormStats | None = None, scale: float = 0.01,
                net_cfg: nets.NetConfig = nets.NetConfig()) -> FilterModel:
    """Initialized model with small random output layers.

    At plain initialization the zero output layers leave most gradients
    identically zero, which makes a finite-difference comparison vacuous.
    The gain bias is centred on ``0.5 * I`` so the probe follows its
    measurements instead of drifting towards the yaw wrap point.
    """
    model = init_model(seed, stats, net_cfg)
    rng = np.random.default_rng([seed, 2])
    for params in (model.forward, model.backward):
        for name in params:
            if nets.is_output_layer(name):
                params[name] = rng.uniform(-scale, scale, size=params[name].shape)
        params["gain.b_out"] = params["gain.b_out"] + 0.5 * np.eye(4).reshape(-1)
    return model


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    checked_entries: int = 0
    wrap_margin: float = np.pi

    @property
    def offending(self) -> list[str]:
        return [k for k, v in self.per_tensor.items() if v >= self.tolerance]

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def _wrap_margin(model: FilterModel, inputs: np.ndarray) -> float:
    margin = np.pi
    for p, seqs in ((model.forward, inputs), (model.backward, inputs[:, ::-1])):
        states, tape = branch_forward(p, model.stats, seqs, record=True)
        yaw = [np.abs(states[..., 3])] + [np.abs(step[1][:, 3]) for step in tape.steps]
        margin = min(margin, float(np.pi - max(a.max() for a in yaw)))
    return margin


def grad_check(model: FilterModel, sample: TrainSample | WindowSet, epsilon: float = 1e-5, *,
               max_entries: int | None = 12, seed: int = 0, atol: float = 1e-6,
               tolerance: float = 1e-4, corrupt: Sequence[str] = ()) -> GradCheckReport:
    """Compare backprop gradients with central differences of the full window loss.

    Checks every tensor of both branches. Tensors larger than
    ``max_entries`` are probed at that many random entries plus their
    largest-gradient entry; ``max_entries=None`` probes every entry. The
    relative error denominator is floored at ``atol`` so entries with a
    vanishing gradient are judged on absolute round-off.

    Wrapped yaw quantities are discontinuous at +/-pi, so differences are
    only meaningful when ``report.wrap_margin`` (closest approach of any
    wrapped yaw to +/-pi) is well above ``epsilon``.
    ``corrupt`` flips the sign of the named analytic gradients (fault
    injection for tests).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise InvalidInputError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    if isinstance(sample, TrainSample):
        sample = to_windows([sample])
    x, y = sample.inputs, sample.targets
    _, gf, gb = loss_and_grads(model, x, y)
    analytic = {f"forward/{k}": v for k, v in gf.items()}
    analytic.update({f"backward/{k}": v for k, v in gb.items()})
    unknown = sorted(set(corrupt) - set(analytic))
    if unknown:
        raise InvalidInputError(f"unknown tensors {unknown}; expected e.g. 'forward/gain.w_out'")
    for name in corrupt:
        analytic[name] = -analytic[name]
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tolerance=tolerance, wrap_margin=_wrap_margin(model, x))
    for name, g in analytic.items():
        branch, key = name.split("/", 1)
        w = getattr(model, branch)[key] = np.ascontiguousarray(getattr(model, branch)[key])
        flat_w = w.reshape(-1)
        flat_g = g.reshape(-1)
        if max_entries is None or flat_w.size <= max_entries:
            entries = np.arange(flat_w.size)
        else:
            entries = np.unique(np.append(rng.choice(flat_w.size, max_entries, replace=False),
                                          np.argmax(np.abs(flat_g))))
        worst = 0.0
        for i in entries:
            old = flat_w[i]
            flat_w[i] = old + epsilon
            lp = model_loss(model, x, y)
            flat_w[i] = old - epsilon
            lm = model_loss(model, x, y)
            flat_w[i] = old
            num = (lp - lm) / (2.0 * epsilon)
            diff = abs(num - flat_g[i])
            worst = max(worst, diff / max(abs(num), abs(flat_g[i]), atol))
        report.per_tensor[name] = worst
        report.checked_entries += len(entries)
    report.max_rel_error = max(report.per_tensor.values(), default=0.0)
    return report
