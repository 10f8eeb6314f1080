import numpy as np
import pytest

from oracles import kink_free_params, naive_conv, numeric_grad, rel_err
from robokeys.net import (
    Adam,
    CheckpointError,
    ModelParams,
    SGDMomentum,
    TrainingDivergedError,
    TrainingTuple,
    backward_and_step,
    concat_backward,
    concat_forward,
    conv_backward,
    conv_forward,
    extract_features,
    init_params,
    load_checkpoint,
    loss_and_grads,
    model_forward,
    mse_per_sample,
    relu_backward,
    relu_forward,
    save_checkpoint,
    stage_forward,
    stage_loss,
    total_loss,
)


class TestLayers:
    def test_conv_matches_naive(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 7, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        np.testing.assert_allclose(conv_forward(x, w, b), naive_conv(x, w, b), atol=1e-12)

    def test_conv_gradients(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 5, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        b = rng.normal(size=2)
        r = rng.normal(size=(2, 6, 5, 2))

        def f():
            return np.sum(conv_forward(x, w, b) * r)

        dx, dw, db = conv_backward(r, x, w)
        assert rel_err(dx, numeric_grad(f, x)) < 1e-4
        assert rel_err(dw, numeric_grad(f, w)) < 1e-4
        assert rel_err(db, numeric_grad(f, b)) < 1e-4

    def test_relu_gradient(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 0.01] = 0.5  # keep away from the kink
        r = rng.normal(size=(3, 4))
        g = numeric_grad(lambda: np.sum(relu_forward(x) * r), x)
        assert rel_err(relu_backward(r, relu_forward(x)), g) < 1e-4

    def test_concat_gradient(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 3, 3, 2)), rng.normal(size=(2, 3, 3, 4))
        r = rng.normal(size=(2, 3, 3, 6))
        da, db = concat_backward(r, 2)
        assert rel_err(da, numeric_grad(lambda: np.sum(concat_forward(a, b) * r), a)) < 1e-4
        assert rel_err(db, numeric_grad(lambda: np.sum(concat_forward(a, b) * r), b)) < 1e-4

    def test_mse_gradient(self):
        rng = np.random.default_rng(4)
        p, t = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
        g = numeric_grad(lambda: mse_per_sample(p, t).sum(), p)
        assert rel_err(2 * (p - t) / p[0].size, g) < 1e-4


class TestModelGradient:
    @pytest.mark.parametrize("stages", [1, 2])
    def test_full_model(self, stages):
        rng = np.random.default_rng(5)
        params = kink_free_params(init_params(joints=2, channels=4, stages=stages, seed=3, dtype=np.float64), rng)
        x = rng.random((2, 3, 8, 8))
        t = rng.random((2, 2, 8, 8))
        _, _, grads = loss_and_grads(params, x, t)
        for name, w in params.weights.items():
            num = numeric_grad(lambda: loss_and_grads(params, x, t)[0], w)
            assert rel_err(grads[name], num) < 1e-4, name


class TestForward:
    def test_zero_input_zero_features(self):
        p = init_params(channels=8)
        for k in p.weights:
            if k.endswith(".b"):
                p.weights[k][:] = 0
        assert not extract_features(np.zeros((3, 16, 16), np.float32), p).any()

    def test_feature_shape(self):
        f = extract_features(np.zeros((3, 64, 64), np.float32), init_params())
        assert f.shape == (32, 64, 64)

    def test_image_size_check(self):
        with pytest.raises(ValueError):
            extract_features(np.zeros((3, 32, 32), np.float32), init_params(channels=4), image_size=(64, 64))
        with pytest.raises(ValueError):
            extract_features(np.zeros((4, 32, 32), np.float32), init_params(channels=4))

    def test_stage_shape_and_zero_weights(self):
        p = init_params(channels=4)
        f = np.random.default_rng(0).random((4, 12, 10)).astype(np.float32)
        assert stage_forward(f, None, p, 0).shape == (6, 12, 10)
        for k in p.weights:
            if k.startswith("stage1"):
                p.weights[k][:] = 0
        assert not stage_forward(f, np.ones((6, 12, 10), np.float32), p, 1).any()

    def test_stage_sensitive_to_previous_beliefs(self):
        p = init_params(channels=4)
        rng = np.random.default_rng(1)
        f = rng.random((4, 8, 8)).astype(np.float32)
        a = stage_forward(f, np.zeros((6, 8, 8), np.float32), p, 1)
        b = stage_forward(f, rng.random((6, 8, 8)).astype(np.float32), p, 1)
        assert not np.allclose(a, b)

    def test_stage_previous_rule(self):
        p = init_params(channels=4)
        f = np.zeros((4, 8, 8), np.float32)
        with pytest.raises(ValueError):
            stage_forward(f, np.zeros((6, 8, 8), np.float32), p, 0)
        with pytest.raises(ValueError):
            stage_forward(f, None, p, 1)

    @pytest.mark.parametrize("stages", [1, 3])
    def test_stage_count(self, stages):
        out = model_forward(np.zeros((3, 8, 8), np.float32), init_params(channels=4, stages=stages))
        assert len(out) == stages
        assert all(o.shape == (6, 8, 8) for o in out)

    def test_full_resolution_any_size(self):
        out = model_forward(np.zeros((2, 3, 7, 13), np.float32), init_params(channels=4))
        assert out[-1].shape == (2, 6, 7, 13)

    def test_deterministic(self):
        x = np.random.default_rng(2).random((3, 16, 16)).astype(np.float32)
        p = init_params(channels=8)
        assert model_forward(x, p)[-1].tobytes() == model_forward(x, p)[-1].tobytes()

    def test_params_validate_shapes(self):
        p = init_params(channels=4)
        w = dict(p.weights)
        w["ext1.w"] = np.zeros((3, 3, 4, 5), np.float32)
        with pytest.raises(ValueError):
            ModelParams(6, 4, 2, w)
        with pytest.raises(ValueError):
            init_params(stages=0)


class TestLoss:
    def test_identity(self):
        b = np.random.default_rng(0).random((6, 8, 8))
        assert stage_loss(b, b) == 0

    def test_constant_offset(self):
        b = np.zeros((6, 8, 8))
        assert stage_loss(b + 0.1, b) == pytest.approx(0.01)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 4, 4)), rng.random((2, 4, 4))
        assert stage_loss(a, b) == stage_loss(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            stage_loss(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))

    def test_total(self):
        assert total_loss([0.2, 0.4]) == pytest.approx(0.3)
        assert total_loss([0.7]) == 0.7
        assert total_loss([0.0, 0.0]) == 0


def toy_batch(n=1, size=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, size, size)).astype(np.float32)
    t = np.zeros((n, 6, size, size), np.float32)
    for i in range(n):
        for j in range(6):
            v, u = rng.integers(2, size - 2, 2)
            t[i, j, v, u] = 1.0
    return x, t


class TestTraining:
    def test_lr_zero_leaves_params(self):
        p = init_params(channels=4)
        before = p.copy()
        backward_and_step(toy_batch(2), p, SGDMomentum(lr=0.0))
        for k in p.weights:
            assert np.array_equal(p.weights[k], before.weights[k])

    def test_overfit_one_sample(self):
        p = init_params(channels=8, seed=1)
        opt = SGDMomentum(lr=1e-2)
        batch = toy_batch(1)
        losses = [backward_and_step(batch, p, opt)[1][0] for _ in range(50)]
        assert losses[-1] < losses[0]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_memorize_four(self):
        from robokeys.harness import ExperimentConfig
        from robokeys.harness.simulator import Simulator

        sim = Simulator(0, 3, ExperimentConfig(image_size=(16, 16)).render_config)
        msgs = [sim.step() for _ in range(4)]
        batch = np.stack([m.image for m in msgs]), np.stack([m.beliefs for m in msgs])
        p = init_params(channels=8, seed=2)
        opt = SGDMomentum(lr=5.0)
        first = backward_and_step(batch, p, opt)[1].mean()
        for _ in range(498):
            backward_and_step(batch, p, opt)
        last = backward_and_step(batch, p, opt)[1].mean()
        assert last <= 0.1 * first

    def test_clip_norm(self):
        batch = tuple(a.astype(np.float64) for a in toy_batch(2))
        grads = loss_and_grads(init_params(channels=4, seed=3, dtype=np.float64), *batch)[2]
        norm = np.sqrt(sum(np.vdot(g, g) for g in grads.values()))
        for clip, scale in [(norm / 4, 0.25), (norm * 4, 1.0)]:
            p = init_params(channels=4, seed=3, dtype=np.float64)
            before = p.copy()
            backward_and_step(batch, p, SGDMomentum(lr=1.0, clip_norm=clip))
            for k in p.weights:
                np.testing.assert_allclose(before.weights[k] - p.weights[k], scale * grads[k], rtol=1e-8, atol=1e-15)

    def test_adam_first_step_is_lr_sign(self):
        # bias correction makes the first step lr * g / (|g| + eps)
        batch = tuple(a.astype(np.float64) for a in toy_batch(2))
        grads = loss_and_grads(init_params(channels=4, seed=3, dtype=np.float64), *batch)[2]
        p = init_params(channels=4, seed=3, dtype=np.float64)
        before = p.copy()
        backward_and_step(batch, p, Adam(lr=1e-3, eps=1e-300))
        for k in p.weights:
            np.testing.assert_allclose(before.weights[k] - p.weights[k], 1e-3 * np.sign(grads[k]), atol=1e-15)

    def test_adam_memorize_four(self):
        from robokeys.harness import ExperimentConfig
        from robokeys.harness.simulator import Simulator

        sim = Simulator(0, 3, ExperimentConfig(image_size=(16, 16)).render_config)
        msgs = [sim.step() for _ in range(4)]
        batch = np.stack([m.image for m in msgs]), np.stack([m.beliefs for m in msgs])
        p = init_params(channels=8, seed=2)
        opt = Adam(lr=1e-3)
        first = backward_and_step(batch, p, opt)[1].mean()
        for _ in range(498):
            backward_and_step(batch, p, opt)
        assert backward_and_step(batch, p, opt)[1].mean() <= 0.1 * first

    def test_reproducible_losses(self):
        def run():
            p = init_params(channels=4, seed=4)
            opt = SGDMomentum(lr=1.0)
            return [backward_and_step(toy_batch(2, seed=s), p, opt)[1].tobytes() for s in range(5)]

        assert run() == run()

    def test_micro_batch_same_gradient(self):
        a, b = init_params(channels=4, seed=5, dtype=np.float64), init_params(channels=4, seed=5, dtype=np.float64)
        batch = toy_batch(4)
        batch = tuple(x.astype(np.float64) for x in batch)
        backward_and_step(batch, a, SGDMomentum(lr=1.0))
        backward_and_step(batch, b, SGDMomentum(lr=1.0), micro_batch=1)
        for k in a.weights:
            np.testing.assert_allclose(a.weights[k], b.weights[k], rtol=1e-10, atol=1e-12)

    def test_training_tuples(self):
        x, t = toy_batch(2)
        batch = [TrainingTuple(x[i], t[i]) for i in range(2)]
        _, losses = backward_and_step(batch, init_params(channels=4), SGDMomentum(lr=0.0))
        assert losses.shape == (2,)
        with pytest.raises(ValueError):
            TrainingTuple(x[0], t[0, :, :8])
        with pytest.raises(ValueError):
            backward_and_step([], init_params(channels=4), SGDMomentum())

    def test_diverged(self):
        x, t = toy_batch(1)
        x[0, 0, 0, 0] = np.nan
        opt = SGDMomentum()
        opt.step_count = 17
        with pytest.raises(TrainingDivergedError) as err:
            backward_and_step((x, t), init_params(channels=4), opt)
        assert err.value.step == 17


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = init_params(channels=4, stages=3, seed=9)
        save_checkpoint(p, tmp_path / "m.rkpc")
        q = load_checkpoint(tmp_path / "m.rkpc")
        assert (q.joints, q.channels, q.stages) == (6, 4, 3)
        for k in p.weights:
            assert p.weights[k].tobytes() == q.weights[k].tobytes()

    def test_magic(self, tmp_path):
        save_checkpoint(init_params(channels=4), tmp_path / "m.rkpc")
        data = bytearray((tmp_path / "m.rkpc").read_bytes())
        assert bytes(data[:4]) == b"RKPC"
        data[0] ^= 0xFF
        (tmp_path / "bad.rkpc").write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.rkpc")

    def test_truncated(self, tmp_path):
        save_checkpoint(init_params(channels=4), tmp_path / "m.rkpc")
        data = (tmp_path / "m.rkpc").read_bytes()
        (tmp_path / "cut.rkpc").write_bytes(data[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "cut.rkpc")
