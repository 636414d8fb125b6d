import math

import numpy as np
import pytest

import oracles
from posesmooth import filter as F
from posesmooth import nets, training
from posesmooth.errors import InternalConsistencyError, InvalidInputError
from posesmooth.nets import NetConfig, NormStats

ID = NormStats.identity()


def _branch(seed=0, cfg=NetConfig()):
    return nets.init_branch(np.random.default_rng(seed), cfg)


def _zeros(cfg=NetConfig()):
    return {k: np.zeros(s) for k, (s, _, _) in nets.param_shapes(cfg).items()}


class TestSfem:
    def test_zero_network(self):
        np.testing.assert_array_equal(nets.sfem_forward(np.ones(4), _zeros(), ID), np.zeros(32))

    def test_deterministic(self):
        x = np.array([1.0, 2.0, 30.0, 0.5])
        a = nets.sfem_forward(x, _branch(3), ID)
        b = nets.sfem_forward(x, _branch(3), ID)
        assert a.tobytes() == b.tobytes()

    def test_tanh_range(self, rng):
        out = nets.sfem_forward(rng.normal(0, 5, (50, 4)), _branch(1), ID)
        assert out.shape == (50, 32)
        assert np.all(np.abs(out) < 1)

    def test_normalizes_input(self):
        stats = NormStats([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
        p = _branch(2)
        x = np.array([3.0, 4.0, 5.0, 0.3])
        expected = nets.sfem_forward(np.array([1.0, 1.0, 1.0, 0.3]), p, ID)
        np.testing.assert_allclose(nets.sfem_forward(x, p, stats), expected, atol=1e-15)

    @pytest.mark.parametrize("bad", [np.array([0.0, np.nan, 0, 0]), np.zeros(3), np.zeros((2, 5))])
    def test_rejects(self, bad):
        with pytest.raises(InvalidInputError):
            nets.sfem_forward(bad, _branch(), ID)


class TestStfem:
    def test_zero_network(self):
        np.testing.assert_array_equal(nets.stfem_forward(np.ones((20, 4)), _zeros(), ID),
                                      np.zeros(32))

    def test_constant_input_pools_one_column(self):
        p = _branch(4)
        row = np.array([1.0, 1.6, 25.0, 0.4])
        full = nets.stfem_forward(np.tile(row, (20, 1)), p, ID)
        single = nets.stfem_forward(np.tile(row, (3, 1)), p, ID)
        np.testing.assert_allclose(full, single, atol=1e-15)
        # one timestep by hand: every tap reads the same row
        w1, w2 = p["stfem.w1"].sum(axis=0), p["stfem.w2"].sum(axis=0)
        col = np.tanh(np.tanh(row @ w1 + p["stfem.b1"]) @ w2 + p["stfem.b2"])
        np.testing.assert_allclose(full, col, atol=1e-14)

    def test_order_sensitive(self, rng):
        p = _branch(5)
        u = rng.normal(0, 1, (20, 4))
        v = u.copy()
        v[[7, 12]] = v[[12, 7]]
        assert not np.allclose(nets.stfem_forward(u, p, ID), nets.stfem_forward(v, p, ID))

    def test_matches_loop_convolution(self, rng):
        p = _branch(6)
        u = rng.normal(0, 1, (9, 4))
        a1 = np.tanh(oracles.conv1d_same(u, p["stfem.w1"], p["stfem.b1"]))
        a2 = np.tanh(oracles.conv1d_same(a1, p["stfem.w2"], p["stfem.b2"]))
        np.testing.assert_allclose(nets.stfem_forward(u, p, ID), a2.mean(axis=0), atol=1e-13)

    def test_any_length_gives_same_width(self, rng):
        p = _branch(6)
        for T in (3, 20, 41):
            assert nets.stfem_forward(rng.normal(0, 1, (T, 4)), p, ID).shape == (32,)

    def test_shorter_than_kernel(self):
        with pytest.raises(InvalidInputError):
            nets.stfem_forward(np.zeros((2, 4)), _branch(), ID)

    def test_rejects_non_finite(self):
        u = np.zeros((5, 4))
        u[2, 1] = np.inf
        with pytest.raises(InvalidInputError):
            nets.stfem_forward(u, _branch(), ID)


class TestFsp:
    def _no_heads(self, seed=0):
        p = _branch(seed)
        for c in nets.COMPONENTS:
            p[f"sem.{c}.w2"][:] = 0.0
            p[f"sem.{c}.b2"][:] = 0.0
        return p

    def test_residual_identity(self, rng):
        p = self._no_heads()
        x = np.array([2.0, 1.5, 33.0, -1.0])
        np.testing.assert_array_equal(nets.fsp_forward(x, rng.normal(0, 1, (20, 4)), p, ID), x)

    def test_yaw_wraps(self):
        p = self._no_heads()
        p["sem.theta.b2"][:] = 0.02
        x = np.array([0.0, 0.0, 10.0, math.pi - 0.01])
        out = nets.fsp_forward(x, np.zeros((20, 4)), p, ID)
        assert out[3] == pytest.approx(-math.pi + 0.01, abs=1e-12)

    def test_translation_deltas_denormalized(self):
        p = self._no_heads()
        p["sem.z.b2"][:] = 1.0
        stats = NormStats([0, 0, 30], [1, 1, 7.5])
        out = nets.fsp_forward(np.array([0, 0, 30.0, 0]), np.zeros((20, 4)), p, stats)
        assert out[2] == pytest.approx(37.5)

    def test_jacobian_against_finite_differences(self, rng):
        cfg = NetConfig()
        p = _branch(8, cfg)
        p = {k: v + rng.normal(0, 0.1, v.shape) for k, v in p.items()}
        stats = NormStats([0, 1.5, 30], [5, 1, 15])
        x = np.array([1.0, 1.4, 28.0, 0.3])
        seg = rng.normal(0, 1, (20, 4)) * [3, 0.2, 10, 0.3] + [0, 1.5, 30, 0]
        weight = rng.normal(0, 1, 4)
        P, _ = nets.stfem_apply(p, stats.normalize(seg[None]))
        xhat, cache = nets.fsp_apply(p, stats, x[None], P)
        grads = nets.zero_grads(p)
        nets.fsp_backward(p, stats, cache, weight[None], grads)
        for name in ("sfem.w1", "sem.y.w1", "sem.theta.w2", "sem.x.b2"):
            flat = p[name].reshape(-1)
            i = int(rng.integers(flat.size))

            def f(_, i=i, name=name):
                return float(nets.fsp_forward(x, seg, p, stats) @ weight)

            old = flat[i]
            flat[i] = old + 1e-5
            fp = f(None)
            flat[i] = old - 1e-5
            fm = f(None)
            flat[i] = old
            num = (fp - fm) / 2e-5
            ana = grads[name].reshape(-1)[i]
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana)) or abs(num - ana) < 1e-7


class TestGain:
    def test_zero_projection(self, rng):
        p = nets.init_branch(np.random.default_rng(1), NetConfig(), zero_output=True)
        K, h = nets.gain_step(rng.normal(0, 1, 4), rng.normal(0, 1, 4), np.zeros(64), p)
        np.testing.assert_array_equal(K, np.zeros((4, 4)))
        assert h.shape == (64,)

    def test_bias_only_identity(self, rng):
        p = _branch(1)
        p["gain.w_out"][:] = 0.0
        p["gain.b_out"][:] = np.eye(4).reshape(-1)
        for _ in range(3):
            K, _ = nets.gain_step(rng.normal(0, 3, 4), rng.normal(0, 3, 4), rng.normal(0, 1, 64), p)
            np.testing.assert_array_equal(K, np.eye(4))

    def test_deterministic(self):
        p = training.probe_model(2).forward
        args = (np.array([0.1, -0.2, 1.0, 0.05]), np.zeros(4), np.full(64, 0.1))
        K1, h1 = nets.gain_step(*args, p)
        K2, h2 = nets.gain_step(*args, p)
        assert K1.tobytes() == K2.tobytes() and h1.tobytes() == h2.tobytes()

    def test_matches_reference_cell(self, rng):
        p = training.probe_model(3).forward
        stats = NormStats([0, 0, 0], [2.0, 1.0, 10.0])
        d, r, h = rng.normal(0, 1, 4), rng.normal(0, 1, 4), rng.normal(0, 0.5, 64)
        K, h_new = nets.gain_step(d, r, h, p, stats)
        x = np.concatenate([d / stats.scale4, r / stats.scale4])
        h_ref = oracles.gru_cell(x, h, p["gain.w_ih"], p["gain.w_hh"], p["gain.b_ih"], p["gain.b_hh"])
        np.testing.assert_allclose(h_new, h_ref, atol=1e-14)
        np.testing.assert_allclose(K, (h_ref @ p["gain.w_out"] + p["gain.b_out"]).reshape(4, 4),
                                   atol=1e-14)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            nets.gain_step(np.array([np.nan, 0, 0, 0]), np.zeros(4), np.zeros(64), _branch())

    def test_rejects_wrong_hidden_width(self):
        with pytest.raises(InvalidInputError):
            nets.gain_step(np.zeros(4), np.zeros(4), np.zeros(63), _branch())


class TestInit:
    def test_same_seed_same_bytes(self):
        a, b = nets.init_params(11), nets.init_params(11)
        for pa, pb in zip(a, b):
            assert pa.keys() == pb.keys()
            assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)

    def test_different_seeds_differ(self):
        a, b = nets.init_params(1)[0], nets.init_params(2)[0]
        assert any(not np.array_equal(a[k], b[k]) for k in a if a[k].any())

    def test_glorot_statistics(self):
        fsp, gain = nets.init_params(0)
        shapes = nets.param_shapes(NetConfig())
        checked = 0
        for name, w in {**fsp, **gain}.items():
            shape, fan_in, fan_out = shapes[name]
            if fan_in == 0:
                assert not w.any(), name
                continue
            a = math.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(w).max() <= a
            if w.size >= 1024:
                assert abs(w.std() / (a / math.sqrt(3)) - 1) < 0.2, name
                checked += 1
        assert checked >= 5

    def test_training_start_zeroes_output_layers(self):
        m = F.init_model(0)
        for p in (m.forward, m.backward):
            assert not p["gain.w_out"].any()
            assert all(not p[f"sem.{c}.w2"].any() for c in nets.COMPONENTS)
            assert p["sfem.w1"].any()

    def test_split_keys(self):
        fsp, gain = nets.init_params(0)
        assert all(k.startswith("gain.") for k in gain)
        assert not any(k.startswith("gain.") for k in fsp)
        assert gain["gain.w_ih"].shape == (nets.GAIN_INPUT, 3 * 64)
        assert gain["gain.w_out"].shape == (64, 16)


class TestBackward:
    def test_zero_upstream_gradient(self, small_windows):
        m = training.probe_model(0)
        _, tape = F.branch_forward(m.forward, m.stats, small_windows.inputs[:3], record=True)
        grads = F.backward(tape, np.zeros_like(tape.states))
        assert all(not g.any() for g in grads.values())

    def test_duplicated_segment_doubles_gradient(self, small_windows):
        m = training.probe_model(0)
        x = small_windows.inputs[:1]
        w = np.random.default_rng(0).normal(0, 1, (1, 20, 4))
        _, t1 = F.branch_forward(m.forward, m.stats, x, record=True)
        _, t2 = F.branch_forward(m.forward, m.stats, np.concatenate([x, x]), record=True)
        g1 = F.backward(t1, w)
        g2 = F.backward(t2, np.concatenate([w, w]))
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-9, atol=1e-14)

    def test_shape_mismatch(self, small_windows):
        m = training.probe_model(0)
        _, tape = F.branch_forward(m.forward, m.stats, small_windows.inputs[:2], record=True)
        with pytest.raises(InternalConsistencyError):
            F.backward(tape, np.zeros((3, 20, 4)))

    def test_exhaustive_finite_differences_tiny_network(self, tiny_cfg, small_windows):
        stats = NormStats.from_values(small_windows.inputs)
        m = training.probe_model(1, stats, net_cfg=tiny_cfg)
        rep = training.grad_check(m, small_windows.subset([0, 40]), max_entries=None)
        total = sum(v.size for v in m.forward.values()) * 2
        assert rep.checked_entries == total
        assert rep.wrap_margin > 0.1
        assert rep.ok, rep.per_tensor

    def test_input_gradients_by_finite_differences(self, rng):
        """Hidden and state recursions: gradient w.r.t. a prior state entry."""
        p = training.probe_model(4).forward
        stats = NormStats([0, 1.5, 30], [5, 1, 15])
        x0 = np.array([[1.0, 1.4, 28.0, 0.3]])
        P = rng.normal(0, 0.5, (1, 32))
        w = rng.normal(0, 1, (1, 4))

        def f(xv):
            out, _ = nets.fsp_apply(p, stats, xv, P)
            return float((out * w).sum())

        _, cache = nets.fsp_apply(p, stats, x0, P)
        dx, _ = nets.fsp_backward(p, stats, cache, w, nets.zero_grads(p))
        num = oracles.central_difference(f, x0.copy(), 1e-6)
        np.testing.assert_allclose(dx, num, rtol=1e-6, atol=1e-8)


def test_param_shape_check_rejects_mismatch():
    p = _branch()
    p["sfem.w1"] = np.zeros((4, 31))
    with pytest.raises(InvalidInputError):
        nets.check_params(p, NetConfig())
