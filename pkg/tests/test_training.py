import math

import numpy as np
import pytest

from posesmooth import filter as F
from posesmooth import training
from posesmooth.errors import InvalidInputError
from posesmooth.nets import NormStats
from posesmooth.training import AdamState, TrainConfig, adam_step, segment_loss
from posesmooth.trajectory import MeasuredPose, Pose, Trajectory, TrajectorySegment


class TestSegmentLoss:
    def test_identity(self):
        poses = [Pose(1, 2, 3, 0.4), Pose(-1, 0, 9, -2.0)]
        assert segment_loss(poses, poses) == 0.0

    def test_half_turn(self):
        assert segment_loss([Pose(0, 0, 0, math.pi / 2)], [Pose(0, 0, 0, -math.pi / 2)]) == pytest.approx(2.0)

    def test_unit_translation(self):
        assert segment_loss([Pose(1, 0, 0, 0)], [Pose(0, 0, 0, 0)]) == 1.0

    def test_time_average(self):
        pred = np.array([[1.0, 0, 0, 0], [0, 0, 0, 0]])
        assert segment_loss(pred, np.zeros((2, 4))) == 0.5

    def test_full_turn_invariance(self, rng):
        pred, target = rng.normal(0, 1, (20, 4)), rng.normal(0, 1, (20, 4))
        shifted = pred.copy()
        shifted[:, 3] += 2 * math.pi
        assert segment_loss(shifted, target) == pytest.approx(segment_loss(pred, target), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            segment_loss(np.zeros((3, 4)), np.zeros((2, 4)))

    def test_batch_gradient(self, rng):
        pred, target = rng.normal(0, 1, (2, 5, 4)), rng.normal(0, 1, (2, 5, 4))
        _, grad = training.batch_loss(pred, target)
        eps = 1e-6
        for idx in [(0, 1, 0), (1, 4, 3), (0, 2, 3)]:
            p = pred.copy()
            p[idx] += eps
            up = training.batch_loss(p, target)[0][idx[0]]
            p[idx] -= 2 * eps
            down = training.batch_loss(p, target)[0][idx[0]]
            assert grad[idx] == pytest.approx((up - down) / (2 * eps), abs=1e-8)


class TestAdam:
    CFG = TrainConfig(learning_rate=1e-3, weight_decay=0.0)

    def test_zero_gradient_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), self.CFG, 1)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_is_signed_learning_rate(self):
        p = {"w": np.array([0.5, 0.5, 0.5])}
        g = {"w": np.array([3.0, -0.02, 400.0])}
        new, _ = adam_step(p, g, AdamState.zeros_like(p), self.CFG, 1)
        np.testing.assert_allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-5)

    def test_identical_tensors_identical_updates(self):
        p = {"a": np.array([0.1, 0.2]), "b": np.array([0.1, 0.2])}
        g = {"a": np.array([1.0, -1.0]), "b": np.array([1.0, -1.0])}
        state = AdamState.zeros_like(p)
        for t in (1, 2, 3):
            p, state = adam_step(p, g, state, TrainConfig(), t)
        np.testing.assert_array_equal(p["a"], p["b"])

    def test_weight_decay_is_coupled(self):
        p = {"w": np.array([2.0])}
        cfg = TrainConfig(weight_decay=0.5)
        _, state = adam_step(p, {"w": np.zeros(1)}, AdamState.zeros_like(p), cfg, 1)
        assert state.m["w"][0] == pytest.approx(0.1 * 0.5 * 2.0)

    def test_second_step_by_hand(self):
        p = {"w": np.array([0.0])}
        state = AdamState.zeros_like(p)
        p, state = adam_step(p, {"w": np.array([1.0])}, state, self.CFG, 1)
        p, state = adam_step(p, {"w": np.array([-1.0])}, state, self.CFG, 2)
        m = 0.9 * 0.1 - 0.1
        v = 0.999 * 0.001 + 0.001
        step = (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8) - 1e-3 * step, rel=1e-12)

    def test_shape_mismatch(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(InvalidInputError):
            adam_step(p, {"w": np.zeros(3)}, AdamState.zeros_like(p), self.CFG, 1)

    def test_step_counter(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(InvalidInputError):
            adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), self.CFG, 0)


class TestTrain:
    def test_zero_iterations_is_initialization(self, small_windows):
        m = training.train(small_windows, TrainConfig(iterations=0, seed=5))
        ref = F.init_model(5, NormStats.from_values(small_windows.inputs))
        for a, b in ((m.forward, ref.forward), (m.backward, ref.backward)):
            assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert m.loss_curve.size == 0

    def test_deterministic(self, small_windows):
        cfg = TrainConfig(iterations=3, batch_size=8, seed=2)
        a = training.train(small_windows, cfg)
        b = training.train(small_windows, cfg)
        assert a.loss_curve.tobytes() == b.loss_curve.tobytes()
        assert all(a.forward[k].tobytes() == b.forward[k].tobytes() for k in a.forward)
        assert all(a.backward[k].tobytes() == b.backward[k].tobytes() for k in a.backward)

    def test_seed_matters(self, small_windows):
        a = training.train(small_windows, TrainConfig(iterations=2, batch_size=4, seed=0))
        b = training.train(small_windows, TrainConfig(iterations=2, batch_size=4, seed=1))
        assert a.loss_curve.tobytes() != b.loss_curve.tobytes()

    def test_callback_and_curve(self, small_windows):
        seen = []
        m = training.train(small_windows, TrainConfig(iterations=3, batch_size=4),
                           on_iteration=lambda i, loss: seen.append((i, loss)))
        assert [i for i, _ in seen] == [1, 2, 3]
        np.testing.assert_array_equal(m.loss_curve, [loss for _, loss in seen])

    def test_accepts_sample_list(self, small_scenario):
        gt, noisy = small_scenario
        samples = training.build_samples(gt[:2], noisy[:2])
        m = training.train(samples, TrainConfig(iterations=1, batch_size=2))
        assert m.loss_curve.shape == (1,)

    def test_empty_dataset(self):
        with pytest.raises(InvalidInputError):
            training.train([], TrainConfig(iterations=1))

    def test_wrong_length(self, small_windows):
        with pytest.raises(InvalidInputError):
            training.train(small_windows, TrainConfig(iterations=1, T=10))

    @pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"weight_decay": -1.0},
                                    {"batch_size": 0}, {"iterations": -1}, {"T": 1}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidInputError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.batch_size, cfg.iterations, cfg.T) == \
            (1e-3, 1e-5, 128, 4000, 20)


class TestLossComposition:
    def test_duplicated_batch_same_loss(self, small_windows):
        m = training.probe_model(1)
        x, y = small_windows.inputs[:3], small_windows.targets[:3]
        one = training.model_loss(m, x, y)
        two = training.model_loss(m, np.concatenate([x, x]), np.concatenate([y, y]))
        assert two == pytest.approx(one, rel=1e-14)

    def test_loss_and_grads_agrees_with_model_loss(self, small_windows):
        m = training.probe_model(1)
        x, y = small_windows.inputs[:5], small_windows.targets[:5]
        assert training.loss_and_grads(m, x, y)[0] == pytest.approx(training.model_loss(m, x, y),
                                                                    rel=1e-14)


class TestData:
    def test_misaligned_ids_listed(self, small_scenario):
        gt, noisy = small_scenario
        short = Trajectory(noisy[1].vehicle_id, noisy[1].frame_start, noisy[1].poses[:-1])
        with pytest.raises(InvalidInputError, match=f"{gt[1].vehicle_id}.*{gt[2].vehicle_id}"):
            training.align_trajectories(gt, [noisy[0], short] + list(noisy[3:]))

    def test_windows_are_substituted(self, small_windows):
        assert np.all(np.isfinite(small_windows.inputs))
        assert not small_windows.observed.all()
        assert small_windows.inputs.shape[1:] == (20, 4)

    def test_all_missing_window_dropped(self):
        vals = np.zeros((20, 4)) + [0, 1.5, 20, 0]
        gt = [Trajectory.from_arrays("a", 0, vals)]
        noisy = [Trajectory.from_arrays("a", 0, vals, np.zeros(20, bool))]
        assert training.build_samples(gt, noisy) == []

    def test_sample_length_check(self):
        seg = TrajectorySegment("a", 0, (MeasuredPose(Pose(0, 0, 1, 0)),))
        with pytest.raises(InvalidInputError):
            training.TrainSample(seg, (Pose(0, 0, 1, 0), Pose(0, 0, 1, 0)))


class TestGradCheck:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_probe_models_pass(self, seed, small_windows):
        m = training.probe_model(seed, NormStats.from_values(small_windows.inputs))
        rep = training.grad_check(m, small_windows.subset([seed]), max_entries=4)
        assert rep.ok, rep.per_tensor
        assert rep.wrap_margin > 0.1
        assert len(rep.per_tensor) == 2 * len(m.forward)

    def test_corrupted_sem_gradient_flagged(self, small_windows):
        m = training.probe_model(0, NormStats.from_values(small_windows.inputs))
        rep = training.grad_check(m, small_windows.subset([0]), max_entries=4,
                                  corrupt=["forward/sem.x.w2"])
        assert not rep.ok
        assert rep.offending == ["forward/sem.x.w2"]

    def test_unknown_corruption_target(self, small_windows):
        with pytest.raises(InvalidInputError):
            training.grad_check(training.probe_model(0), small_windows.subset([0]),
                                corrupt=["forward/nope"])

    @pytest.mark.parametrize("eps", [1e-8, 1e-2])
    def test_epsilon_range(self, eps, small_windows):
        with pytest.raises(InvalidInputError):
            training.grad_check(training.probe_model(0), small_windows.subset([0]), eps)

    def test_accepts_train_sample(self, small_scenario):
        gt, noisy = small_scenario
        sample = training.build_samples(gt[:1], noisy[:1])[0]
        rep = training.grad_check(training.probe_model(0), sample, max_entries=1)
        assert rep.checked_entries > 0

    def test_model_untouched(self, small_windows):
        m = training.probe_model(0)
        before = {k: v.copy() for k, v in m.forward.items()}
        training.grad_check(m, small_windows.subset([0]), max_entries=2)
        assert all(np.array_equal(before[k], m.forward[k]) for k in before)


class TestClipping:
    def test_large_gradient_rescaled_jointly(self):
        gf = {"a": np.array([3.0, 0.0])}
        gb = {"a": np.array([0.0, 4.0])}
        cf, cb = training.clip_gradients(gf, gb, 1.0)
        assert training.global_norm(cf, cb) == pytest.approx(1.0)
        np.testing.assert_allclose(cf["a"], [0.6, 0.0])
        np.testing.assert_allclose(cb["a"], [0.0, 0.8])

    def test_small_gradient_untouched(self):
        gf, gb = {"a": np.array([0.3])}, {"a": np.array([0.4])}
        cf, cb = training.clip_gradients(gf, gb, 1.0)
        assert cf is gf and cb is gb

    def test_disabled_clip_allowed(self):
        assert TrainConfig(grad_clip=None).grad_clip is None
        with pytest.raises(InvalidInputError):
            TrainConfig(grad_clip=0.0)
