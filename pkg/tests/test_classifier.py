import math

import numpy as np
import pytest

from flowmotion.classifier import (
    NetConfig,
    TrainConfig,
    forward,
    init_params,
    loss_and_grads,
    loss_bce,
    lr_at_epoch,
    predict,
    sgd_step,
    train,
)
from flowmotion.classifier import checkpoint
from flowmotion.classifier.network import conv2d_forward, param_shapes
from flowmotion.classifier.training import flip_batch, read_history_csv, write_history_csv
from flowmotion.errors import CheckpointError, NumericError, ShapeError
from flowmotion.labeling import MotionLabel

from oracles import KinkCrossed, conv_naive, forward_naive, gradient_check, randomize, smooth_gradient_check

TINY = NetConfig.tiny(width=4, input_size=8)


def separable_set(n, size=8, seed=0):
    """Moving samples carry a constant rightward flow, Still samples near zero."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = 0.05 * rng.standard_normal((n, 2, size, size))
    x[:, 0] += 3.0 * y[:, None, None]
    return x.astype(np.float32), y


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


class TestArchitecture:
    def test_resnet18_parameter_count(self):
        shapes = param_shapes(NetConfig.resnet18())
        convs = sum(math.prod(s) for n, s in shapes.items() if n.endswith("conv.weight") or ".conv" in n)
        # 2-channel 7x7 stem plus the standard residual trunk
        assert shapes["stem.conv.weight"] == (64, 2, 7, 7)
        assert shapes["fc.weight"] == (1, 512)
        assert convs > 11_000_000

    def test_init_deterministic(self):
        a = init_params(TINY, np.random.default_rng(3))
        b = init_params(TINY, np.random.default_rng(3))
        for k in a.weights:
            assert np.array_equal(a.weights[k], b.weights[k])

    def test_zero_fc_gives_half(self):
        params = init_params(TINY, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(3, 2, 8, 8))
        assert np.all(forward(params, x) == 0.5)
        label, prob = predict(params, x[0])
        assert prob == 0.5 and label is MotionLabel.STILL

    def test_bad_shape(self):
        params = init_params(TINY, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            forward(params, np.zeros((1, 3, 8, 8)))
        with pytest.raises(ShapeError):
            forward(params, np.zeros((1, 2, 9, 9)))

    def test_config_round_trip(self):
        assert NetConfig.from_dict(NetConfig.resnet18().to_dict()) == NetConfig.resnet18()


# ---------------------------------------------------------------------------
# Forward oracle
# ---------------------------------------------------------------------------


class TestForwardOracle:
    def test_conv_matches_definition(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        for stride, pad in [(1, 1), (2, 1), (2, 0)]:
            np.testing.assert_allclose(conv2d_forward(x, w, stride, pad)[0], conv_naive(x, w, stride, pad), rtol=1e-12)

    def test_conv_impulse_is_flipped_kernel(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        out = conv2d_forward(x, w, 1, 1)[0][0, 0, 1:4, 1:4]
        assert np.array_equal(out, w[0, 0, ::-1, ::-1])

    def test_tiny_matches_naive(self):
        rng = np.random.default_rng(7)
        params = randomize(init_params(TINY, rng), rng).astype(np.float32)
        x = rng.normal(size=(20, 2, 8, 8)).astype(np.float32)
        np.testing.assert_allclose(forward(params, x), forward_naive(params, x), rtol=1e-5)

    def test_pooled_two_stage_matches_naive(self):
        cfg = NetConfig(
            stem_channels=4, stage_widths=(4, 6), blocks_per_stage=(1, 1), stem_kernel=3, stem_stride=2, input_size=12
        )
        rng = np.random.default_rng(8)
        params = randomize(init_params(cfg, rng), rng)
        x = rng.normal(size=(4, 2, 12, 12))
        np.testing.assert_allclose(forward(params, x), forward_naive(params, x), rtol=1e-9)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


class TestGradients:
    def test_finite_difference_tiny(self):
        errs = smooth_gradient_check(TINY, np.random.default_rng(0), 4, [0, 1, 1, 0])
        assert set(errs) == set(param_shapes(TINY))
        assert max(errs.values()) < 1e-4

    def test_kink_is_detected(self):
        # this draw puts a ReLU input within 1e-5 of zero
        rng = np.random.default_rng(0)
        params = randomize(init_params(TINY, rng, dtype=np.float64), rng)
        x = rng.normal(size=(4, 2, 8, 8))
        with pytest.raises(KinkCrossed):
            gradient_check(params, x, np.array([0, 1, 1, 0]))

    @pytest.mark.slow
    def test_finite_difference_with_pool_and_downsample(self):
        cfg = NetConfig(
            stem_channels=3, stage_widths=(3, 4), blocks_per_stage=(1, 1), stem_kernel=3, stem_stride=2, input_size=8
        )
        errs = smooth_gradient_check(cfg, np.random.default_rng(1), 3, [1, 0, 1])
        assert max(errs.values()) < 1e-4

    def test_bias_gradient_sign(self):
        params = init_params(TINY, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 2, 8, 8))
        _, grads, _, _ = loss_and_grads(params, x, np.ones(4))
        # all targets positive at p = 0.5: dL/db = mean(p - y) = -0.5
        assert grads["fc.bias"][0] == pytest.approx(-0.5)

    def test_symmetric_filters_give_symmetric_gradients(self):
        # mirror-symmetric input through a width-1 net with symmetric kernels
        cfg = NetConfig(
            stem_channels=1, stage_widths=(1,), blocks_per_stage=(1,), stem_kernel=3,
            stem_stride=1, stem_pool=False, input_size=6,
        )
        rng = np.random.default_rng(2)
        params = randomize(init_params(cfg, rng, dtype=np.float64), rng)
        for name, w in params.weights.items():
            if w.ndim == 4:
                params.weights[name] = (w + w[..., ::-1]) / 2
        half = rng.normal(size=(2, 2, 6, 3))
        x = np.concatenate([half, half[..., ::-1]], axis=-1)
        _, grads, _, _ = loss_and_grads(params, x, np.array([1, 0]))
        for name, g in grads.items():
            if g.ndim == 4:
                np.testing.assert_allclose(g, g[..., ::-1], atol=1e-12)

    def test_label_shape_checked(self):
        params = init_params(TINY, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            loss_and_grads(params, np.zeros((2, 2, 8, 8)), np.zeros(3))


class TestLoss:
    def test_half(self):
        assert loss_bce(np.array([0.5]), np.array([1])) == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_correct(self):
        assert loss_bce(np.array([1.0]), np.array([1])) == pytest.approx(1e-7, rel=1e-3)

    def test_confident_wrong_is_clamped(self):
        assert loss_bce(np.array([1.0]), np.array([0])) == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_point_nine(self):
        assert loss_bce(np.array([0.9]), np.array([1])) == pytest.approx(0.1054, abs=1e-4)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class TestOptimizer:
    def test_zero_gradient_no_decay_is_fixed_point(self):
        cfg = TrainConfig(weight_decay=0.0)
        w = {"a": np.array([1.0, -2.0])}
        new, vel = sgd_step(w, {"a": np.zeros(2)}, None, cfg, 0.1)
        assert np.array_equal(new["a"], w["a"]) and not vel["a"].any()

    def test_decay_only(self):
        cfg = TrainConfig(weight_decay=0.01)
        new, _ = sgd_step({"a": np.array([1.0])}, {"a": np.array([0.0])}, None, cfg, 0.01)
        assert new["a"][0] == pytest.approx(0.9999, abs=1e-15)

    def test_two_momentum_steps(self):
        cfg = TrainConfig(weight_decay=0.0, momentum=0.9)
        lr, g = 0.01, np.array([2.0])
        w, v = sgd_step({"a": np.array([0.0])}, {"a": g}, None, cfg, lr)
        w, v = sgd_step(w, {"a": g}, v, cfg, lr)
        assert w["a"][0] == pytest.approx(-lr * 2.0 * 2.9, rel=1e-12)

    def test_inputs_not_mutated(self):
        w = {"a": np.ones(3)}
        sgd_step(w, {"a": np.ones(3)}, None, TrainConfig(), 0.1)
        assert np.array_equal(w["a"], np.ones(3))

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError):
            sgd_step({"a": np.ones(1)}, {"a": np.array([np.nan])}, None, TrainConfig(), 0.1)

    @pytest.mark.parametrize("epoch,lr", [(0, 0.01), (9, 0.01), (10, 0.005), (19, 0.005), (20, 0.0025), (25, 0.0025)])
    def test_schedule(self, epoch, lr):
        assert lr_at_epoch(TrainConfig(), epoch) == lr

    def test_default_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.learning_rate, cfg.weight_decay, cfg.momentum) == (128, 0.01, 0.01, 0.9)
        assert (cfg.step_size, cfg.gamma, cfg.epochs) == (10, 0.5, 30)

    @pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"learning_rate": 0}, {"flip_probability": 2}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TestTraining:
    cfg = TrainConfig(batch_size=16, learning_rate=0.05, step_size=5, epochs=8, seed=0)

    def test_zero_epochs_returns_init(self):
        x, y = separable_set(8)
        res = train((x, y), None, TINY, TrainConfig(epochs=0, seed=4))
        init = init_params(TINY, np.random.default_rng(4))
        for k in init.weights:
            assert np.array_equal(res.params.weights[k], init.weights[k])
        assert res.history == []

    def test_deterministic(self):
        x, y = separable_set(32)
        a = train((x, y), (x, y), TINY, self.cfg)
        b = train((x, y), (x, y), TINY, self.cfg)
        assert checkpoint.dumps(a.params, a.momentum) == checkpoint.dumps(b.params, b.momentum)
        assert a.history == b.history

    def test_learns_separable_task(self):
        x, y = separable_set(64)
        xe, ye = separable_set(32, seed=1)
        res = train((x, y), (xe, ye), TINY, self.cfg)
        assert res.history[-1]["eval_f1"] == 100.0
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]

    def test_flip_consistency(self):
        x, y = separable_set(64)
        res = train((x, y), None, TINY, self.cfg)
        xe, _ = separable_set(200, seed=2)
        p1 = forward(res.params, xe) > 0.5
        p2 = forward(res.params, flip_batch(xe, np.ones(len(xe), bool))) > 0.5
        assert np.mean(p1 == p2) >= 0.99

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            train((np.zeros((0, 2, 8, 8)), np.zeros(0)), None, TINY, self.cfg)

    def test_flip_batch(self):
        x = np.arange(2 * 2 * 1 * 3, dtype=float).reshape(2, 2, 1, 3)
        out = flip_batch(x, np.array([True, False]))
        assert out[0, 0, 0].tolist() == [-2, -1, -0.0]
        assert out[0, 1, 0].tolist() == [5, 4, 3]
        assert np.array_equal(out[1], x[1])

    def test_history_csv_round_trip(self, tmp_path):
        hist = [
            {"epoch": 0, "lr": 0.01, "train_loss": 0.693, "eval_precision": None, "eval_recall": 0.0, "eval_f1": None},
            {"epoch": 1, "lr": 0.01, "train_loss": 0.1, "eval_precision": 100.0, "eval_recall": 50.0, "eval_f1": 200 / 3},
        ]
        write_history_csv(hist, tmp_path / "h.csv")
        assert read_history_csv(tmp_path / "h.csv") == hist
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,eval_precision,eval_recall,eval_f1"


class TestPredict:
    def params_with_bias(self, b):
        params = init_params(TINY, np.random.default_rng(0))
        params.weights["fc.bias"] = np.array([b], dtype=np.float32)
        return params

    def test_strictly_above_half_is_moving(self):
        label, prob = predict(self.params_with_bias(1e-3), np.zeros((2, 8, 8)))
        assert prob > 0.5 and label is MotionLabel.MOVING

    def test_below_half_is_still(self):
        label, _ = predict(self.params_with_bias(-1e-3), np.zeros((2, 8, 8)))
        assert label is MotionLabel.STILL


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        params = randomize(init_params(TINY, rng), rng).astype(np.float32)
        momentum = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in params.weights.items()}
        checkpoint.save(tmp_path / "m.fmck", params, momentum, {"epoch": 3})
        back, mom, header = checkpoint.load(tmp_path / "m.fmck")
        assert back.config == params.config and header["epoch"] == 3
        for group_a, group_b in ((params.weights, back.weights), (params.buffers, back.buffers), (momentum, mom)):
            assert group_a.keys() == group_b.keys()
            for k in group_a:
                assert group_a[k].tobytes() == group_b[k].tobytes()
        assert checkpoint.dumps(back, mom, {"epoch": 3}) == (tmp_path / "m.fmck").read_bytes()

    def test_predictions_survive_round_trip(self):
        rng = np.random.default_rng(1)
        params = randomize(init_params(TINY, rng), rng).astype(np.float32)
        back, _, _ = checkpoint.loads(checkpoint.dumps(params))
        x = rng.normal(size=(5, 2, 8, 8)).astype(np.float32)
        assert np.array_equal(forward(params, x), forward(back, x))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            checkpoint.loads(b"NOPE" + bytes(20))

    def test_truncated(self):
        data = checkpoint.dumps(init_params(TINY, np.random.default_rng(0)))
        with pytest.raises(CheckpointError):
            checkpoint.loads(data[:-3])

    def test_trailing_bytes(self):
        data = checkpoint.dumps(init_params(TINY, np.random.default_rng(0)))
        with pytest.raises(CheckpointError):
            checkpoint.loads(data + b"\x00")
