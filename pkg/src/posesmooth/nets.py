"""Learnable pieces of the filter: the future-state predictor and the gain cell.

The future-state predictor (FSP) encodes the previous state with a small
dense block (SFEM) and the whole measurement window with a two-layer
temporal convolution (STFEM). Four per-component heads (SEM) decode the
concatenated features into residual updates of the previous state.

The gain network is a gated recurrent cell whose hidden state is projected
to a 4x4 gain matrix.

Parameters of one filter branch live in a flat ``dict[str, ndarray]``.
Every layer here has an explicit backward function; the recursion in
:mod:`posesmooth.filter` chains them for backpropagation through time.
All batched functions take a leading batch axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .trajectory import wrap_angle

COMPONENTS = ("x", "y", "z", "theta")
GAIN_INPUT = 8
Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class NetConfig:
    state_width: int = 32
    conv_channels: tuple[int, int] = (16, 32)
    kernel: int = 3
    head_width: int = 32
    gain_hidden: int = 64

    @property
    def feature_width(self) -> int:
        return self.state_width + self.conv_channels[1]


@dataclass(frozen=True)
class NormStats:
    """Per-axis mean and scale for x, y, z; yaw is never rescaled."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        scale = np.asarray(self.scale, dtype=float).reshape(3)
        if not np.all(scale > 0):
            raise InvalidInputError("NormStats scales must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(3), np.ones(3))

    @classmethod
    def from_values(cls, values: np.ndarray, floor: float = 1e-3) -> "NormStats":
        v = np.asarray(values, dtype=float).reshape(-1, 4)
        return cls(v[:, :3].mean(axis=0), np.maximum(v[:, :3].std(axis=0), floor))

    @property
    def mean4(self) -> np.ndarray:
        return np.append(self.mean, 0.0)

    @property
    def scale4(self) -> np.ndarray:
        return np.append(self.scale, 1.0)

    def normalize(self, v: np.ndarray) -> np.ndarray:
        return (v - self.mean4) / self.scale4


def param_shapes(cfg: NetConfig) -> dict[str, tuple[tuple[int, ...], int, int]]:
    """name -> (shape, fan_in, fan_out) in canonical order."""
    ws, (c1, c2), k = cfg.state_width, cfg.conv_channels, cfg.kernel
    hw, g = cfg.head_width, cfg.gain_hidden
    shapes = {
        "sfem.w1": ((4, ws), 4, ws),
        "sfem.b1": ((ws,), 0, 0),
        "sfem.w2": ((ws, ws), ws, ws),
        "sfem.b2": ((ws,), 0, 0),
        "stfem.w1": ((k, 4, c1), 4 * k, c1 * k),
        "stfem.b1": ((c1,), 0, 0),
        "stfem.w2": ((k, c1, c2), c1 * k, c2 * k),
        "stfem.b2": ((c2,), 0, 0),
    }
    for c in COMPONENTS:
        shapes[f"sem.{c}.w1"] = ((cfg.feature_width, hw), cfg.feature_width, hw)
        shapes[f"sem.{c}.b1"] = ((hw,), 0, 0)
        shapes[f"sem.{c}.w2"] = ((hw, 1), hw, 1)
        shapes[f"sem.{c}.b2"] = ((1,), 0, 0)
    shapes.update({
        # gates stacked as [reset, update, candidate]
        "gain.w_ih": ((GAIN_INPUT, 3 * g), GAIN_INPUT, g),
        "gain.w_hh": ((g, 3 * g), g, g),
        "gain.b_ih": ((3 * g,), 0, 0),
        "gain.b_hh": ((3 * g,), 0, 0),
        "gain.w_out": ((g, 16), g, 16),
        "gain.b_out": ((16,), 0, 0),
    })
    return shapes


def config_from_params(p: Params) -> NetConfig:
    try:
        k, _, c1 = p["stfem.w1"].shape
        c2 = p["stfem.w2"].shape[2]
        cfg = NetConfig(state_width=p["sfem.w1"].shape[1], conv_channels=(c1, c2), kernel=k,
                        head_width=p["sem.x.w1"].shape[1], gain_hidden=p["gain.w_hh"].shape[0])
    except (KeyError, ValueError, IndexError) as exc:
        raise InvalidInputError(f"parameter set is incomplete: {exc}") from exc
    check_params(p, cfg)
    return cfg


def check_params(p: Params, cfg: NetConfig) -> None:
    expected = param_shapes(cfg)
    if set(p) != set(expected):
        missing, extra = set(expected) - set(p), set(p) - set(expected)
        raise InvalidInputError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
    for name, (shape, _, _) in expected.items():
        if p[name].shape != shape:
            raise InvalidInputError(f"{name}: expected shape {shape}, found {p[name].shape}")
        if not np.all(np.isfinite(p[name])):
            raise InvalidInputError(f"{name}: non-finite weights")


def is_output_layer(name: str) -> bool:
    return name == "gain.w_out" or (name.startswith("sem.") and name.endswith(".w2"))


def init_branch(rng: np.random.Generator, cfg: NetConfig = NetConfig(), *,
                zero_output: bool = False) -> Params:
    """Glorot-uniform weights, zero biases.

    With ``zero_output`` the head output layers and the gain projection are
    zeroed after drawing, so the branch is the identity motion model with
    zero gain. Training starts there: a random gain projection makes the
    recursion diverge within a few steps.
    """
    p = {}
    for name, (shape, fan_in, fan_out) in param_shapes(cfg).items():
        if fan_in == 0:
            p[name] = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (fan_in + fan_out))
            p[name] = rng.uniform(-a, a, size=shape)
        if zero_output and is_output_layer(name):
            p[name] = np.zeros(shape)
    return p


def split_params(p: Params) -> tuple[Params, Params]:
    """(FSP parameters, gain-network parameters)."""
    fsp = {k: v for k, v in p.items() if not k.startswith("gain.")}
    gain = {k: v for k, v in p.items() if k.startswith("gain.")}
    return fsp, gain


def init_params(seed: int, cfg: NetConfig = NetConfig()) -> tuple[Params, Params]:
    """Plain Glorot initialization of one branch, split into (FSP, gain)."""
    return split_params(init_branch(np.random.default_rng(seed), cfg))


# ---------------------------------------------------------------- primitives

def dense_tanh(x, w, b):
    return np.tanh(x @ w + b)


def dense_tanh_backward(x, w, a, da, grads, wname, bname):
    dz = da * (1.0 - a * a)
    grads[wname] += x.T @ dz
    grads[bname] += dz.sum(axis=0)
    return dz @ w.T


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _im2col(u: np.ndarray, k: int) -> np.ndarray:
    """(B, T, C) -> (B, T, k*C) windows, 'same' length with edge replication.

    Replicating the end items keeps a constant-in-time input constant
    through the convolution, so pooling sees identical columns.
    """
    T = u.shape[1]
    pad = k // 2
    up = np.concatenate([np.repeat(u[:, :1], pad, axis=1), u,
                         np.repeat(u[:, -1:], k - 1 - pad, axis=1)], axis=1)
    return np.concatenate([up[:, j:j + T] for j in range(k)], axis=2)


def _col2im(dcols: np.ndarray, k: int, C: int) -> np.ndarray:
    B, T, _ = dcols.shape
    pad = k // 2
    dup = np.zeros((B, T + k - 1, C))
    for j in range(k):
        dup[:, j:j + T] += dcols[:, :, j * C:(j + 1) * C]
    du = dup[:, pad:pad + T].copy()
    du[:, 0] += dup[:, :pad].sum(axis=1)
    du[:, -1] += dup[:, pad + T:].sum(axis=1)
    return du


# ---------------------------------------------------------------- SFEM

def sfem_apply(p: Params, xn: np.ndarray):
    a1 = dense_tanh(xn, p["sfem.w1"], p["sfem.b1"])
    a2 = dense_tanh(a1, p["sfem.w2"], p["sfem.b2"])
    return a2, (xn, a1, a2)


def sfem_backward(p: Params, cache, dN, grads) -> np.ndarray:
    xn, a1, a2 = cache
    da1 = dense_tanh_backward(a1, p["sfem.w2"], a2, dN, grads, "sfem.w2", "sfem.b2")
    return dense_tanh_backward(xn, p["sfem.w1"], a1, da1, grads, "sfem.w1", "sfem.b1")


def sfem_forward(x_prev, p: Params, stats: NormStats) -> np.ndarray:
    """State features of a (4,) or (B, 4) previous state."""
    x = _as_batch(x_prev, (4,), "x_prev")
    out, _ = sfem_apply(p, stats.normalize(x))
    return out[0] if np.ndim(x_prev) == 1 else out


# ---------------------------------------------------------------- STFEM

def stfem_apply(p: Params, un: np.ndarray):
    """un: normalized (B, T, 4) window -> (B, C2) pooled features."""
    k = p["stfem.w1"].shape[0]
    if un.shape[1] < k:
        raise InvalidInputError(f"window length {un.shape[1]} shorter than kernel {k}")
    w1 = p["stfem.w1"].reshape(-1, p["stfem.w1"].shape[2])
    w2 = p["stfem.w2"].reshape(-1, p["stfem.w2"].shape[2])
    cols1 = _im2col(un, k)
    a1 = np.tanh(cols1 @ w1 + p["stfem.b1"])
    cols2 = _im2col(a1, k)
    a2 = np.tanh(cols2 @ w2 + p["stfem.b2"])
    return a2.mean(axis=1), (cols1, a1, cols2, a2)


def stfem_backward(p: Params, cache, dP, grads) -> None:
    cols1, a1, cols2, a2 = cache
    k, c1, c2 = p["stfem.w2"].shape
    T = a2.shape[1]
    dz2 = (dP[:, None, :] / T) * (1.0 - a2 * a2)
    grads["stfem.w2"] += np.einsum("btc,bto->co", cols2, dz2).reshape(k, c1, c2)
    grads["stfem.b2"] += dz2.sum(axis=(0, 1))
    dcols2 = dz2 @ p["stfem.w2"].reshape(-1, c2).T
    da1 = _col2im(dcols2, k, c1)
    dz1 = da1 * (1.0 - a1 * a1)
    w1shape = p["stfem.w1"].shape
    grads["stfem.w1"] += np.einsum("btc,bto->co", cols1, dz1).reshape(w1shape)
    grads["stfem.b1"] += dz1.sum(axis=(0, 1))


def stfem_forward(seg_values, p: Params, stats: NormStats) -> np.ndarray:
    """Window features of a (T, 4) or (B, T, 4) measurement window."""
    v = np.asarray(seg_values, dtype=float)
    single = v.ndim == 2
    if single:
        v = v[None]
    if v.ndim != 3 or v.shape[2] != 4:
        raise InvalidInputError(f"seg_values must be (T, 4) or (B, T, 4), got {np.shape(seg_values)}")
    _check_finite(v, "seg_values")
    out, _ = stfem_apply(p, stats.normalize(v))
    return out[0] if single else out


# ---------------------------------------------------------------- SEM heads

def sem_apply(p: Params, A: np.ndarray):
    hidden, outs = [], []
    for c in COMPONENTS:
        g = dense_tanh(A, p[f"sem.{c}.w1"], p[f"sem.{c}.b1"])
        hidden.append(g)
        outs.append(g @ p[f"sem.{c}.w2"] + p[f"sem.{c}.b2"])
    return np.concatenate(outs, axis=1), (A, hidden)


def sem_backward(p: Params, cache, dd, grads) -> np.ndarray:
    A, hidden = cache
    dA = np.zeros_like(A)
    for i, c in enumerate(COMPONENTS):
        g = hidden[i]
        dout = dd[:, i:i + 1]
        grads[f"sem.{c}.w2"] += g.T @ dout
        grads[f"sem.{c}.b2"] += dout.sum(axis=0)
        dg = dout @ p[f"sem.{c}.w2"].T
        dA += dense_tanh_backward(A, p[f"sem.{c}.w1"], g, dg, grads, f"sem.{c}.w1", f"sem.{c}.b1")
    return dA


def fsp_apply(p: Params, stats: NormStats, x_prev: np.ndarray, P: np.ndarray):
    """Predicted state x_prev + de-normalized head outputs (yaw wrapped)."""
    N, scache = sfem_apply(p, stats.normalize(x_prev))
    A = np.concatenate([N, P], axis=1)
    d, hcache = sem_apply(p, A)
    xhat = x_prev + d * stats.scale4
    xhat[:, 3] = wrap_angle(xhat[:, 3])
    return xhat, (scache, hcache)


def fsp_backward(p: Params, stats: NormStats, cache, dxhat, grads):
    """Returns (d x_prev, d P)."""
    scache, hcache = cache
    dA = sem_backward(p, hcache, dxhat * stats.scale4, grads)
    ws = p["sfem.w2"].shape[1]
    dxn = sfem_backward(p, scache, dA[:, :ws], grads)
    return dxhat + dxn / stats.scale4, dA[:, ws:]


def fsp_forward(x_prev, seg_values, p: Params, stats: NormStats) -> np.ndarray:
    x = _as_batch(x_prev, (4,), "x_prev")
    P = np.atleast_2d(stfem_forward(seg_values, p, stats))
    if P.shape[0] != x.shape[0]:
        raise InvalidInputError("x_prev and seg_values batch sizes differ")
    xhat, _ = fsp_apply(p, stats, x, P)
    return xhat[0] if np.ndim(x_prev) == 1 else xhat


# ---------------------------------------------------------------- gain cell

def gru_apply(p: Params, x: np.ndarray, h: np.ndarray):
    G = h.shape[1]
    gi = x @ p["gain.w_ih"] + p["gain.b_ih"]
    gh = h @ p["gain.w_hh"] + p["gain.b_hh"]
    r = _sigmoid(gi[:, :G] + gh[:, :G])
    z = _sigmoid(gi[:, G:2 * G] + gh[:, G:2 * G])
    hn = gh[:, 2 * G:]
    n = np.tanh(gi[:, 2 * G:] + r * hn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, hn)


def gru_backward(p: Params, cache, dh_new, grads):
    """Returns (d input, d previous hidden)."""
    x, h, r, z, n, hn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dr = dan * hn
    dhn = dan * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    dgi = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dhn], axis=1)
    grads["gain.w_ih"] += x.T @ dgi
    grads["gain.b_ih"] += dgi.sum(axis=0)
    grads["gain.w_hh"] += h.T @ dgh
    grads["gain.b_hh"] += dgh.sum(axis=0)
    return dgi @ p["gain.w_ih"].T, dh + dgh @ p["gain.w_hh"].T


def gain_apply(p: Params, stats: NormStats, innovation, residual_prev, h):
    gin = np.concatenate([innovation / stats.scale4, residual_prev / stats.scale4], axis=1)
    h_new, gcache = gru_apply(p, gin, h)
    K = (h_new @ p["gain.w_out"] + p["gain.b_out"]).reshape(-1, 4, 4)
    return K, h_new, gcache


def gain_backward(p: Params, stats: NormStats, cache, h_new, dK, dh_new, grads):
    """Returns (d innovation, d residual_prev, d previous hidden)."""
    dKf = dK.reshape(-1, 16)
    grads["gain.w_out"] += h_new.T @ dKf
    grads["gain.b_out"] += dKf.sum(axis=0)
    dh = dh_new + dKf @ p["gain.w_out"].T
    dgin, dh_prev = gru_backward(p, cache, dh, grads)
    return dgin[:, :4] / stats.scale4, dgin[:, 4:] / stats.scale4, dh_prev


def gain_step(innovation, residual_prev, h, p: Params, stats: NormStats | None = None):
    """One gain-cell step; returns (K, h'). K is (4, 4) or (B, 4, 4)."""
    stats = stats or NormStats.identity()
    single = np.ndim(innovation) == 1
    d = _as_batch(innovation, (4,), "innovation")
    r = _as_batch(residual_prev, (4,), "residual_prev")
    G = p["gain.w_hh"].shape[0]
    hb = _as_batch(h, (G,), "hidden state")
    if not (d.shape[0] == r.shape[0] == hb.shape[0]):
        raise InvalidInputError("gain_step inputs have different batch sizes")
    K, h_new, _ = gain_apply(p, stats, d, r, hb)
    return (K[0], h_new[0]) if single else (K, h_new)


# ---------------------------------------------------------------- helpers

def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"non-finite values in {what}")


def _as_batch(v, tail: tuple[int, ...], what: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape == tail:
        a = a[None]
    if a.ndim != len(tail) + 1 or a.shape[1:] != tail:
        raise InvalidInputError(f"{what}: expected shape {tail} or (B, *{tail}), got {a.shape}")
    _check_finite(a, what)
    return a


def zero_grads(p: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in p.items()}
