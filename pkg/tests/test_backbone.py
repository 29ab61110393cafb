import numpy as np
import pytest
from gradcheck import max_relative_error, random_instance

from norin.backbone import (
    LinearBackbone,
    Normalizer,
    TrainConfig,
    TrainingError,
    adamw_step,
    forward,
    init_backbone,
    load_checkpoint,
    loss_and_grads,
    predict,
    save_checkpoint,
    train,
)
from norin.normalizers import ShapeParams
from norin.series import GeneratorParams, MultiSeries, SplitSpec, WindowBatch, make_windows, synth_heavy_tailed


def _two_sines(L=600):
    # a sum of two sinusoids obeys a fixed order-4 linear recurrence, so every
    # horizon is an exact linear function of a lookback of length >= 4
    t = np.arange(L, dtype=float)
    v = np.sin(2 * np.pi * t / 24) + 0.5 * np.sin(2 * np.pi * t / 7 + 1.0)
    return MultiSeries(v[:, None], ("s",))


def _small_series(seed=0, L=400, C=2):
    return synth_heavy_tailed(seed, L, C, GeneratorParams(delta=1.5, season_amplitude=1.0, season_period=12))


SMALL = dict(lookback=16, horizon=4, epochs=3, batch_size=32)


class TestInit:
    def test_deterministic(self):
        a, b = init_backbone(8, 3, 2, seed=5), init_backbone(8, 3, 2, seed=5)
        np.testing.assert_array_equal(a.W, b.W)

    def test_zero_bias_and_bound(self):
        m = init_backbone(16, 4, 1, seed=0)
        assert m.W.shape == (4, 16) and np.all(m.b == 0)
        assert np.max(np.abs(m.W)) <= 1 / np.sqrt(16)

    def test_mlp_shapes(self):
        m = init_backbone(8, 3, 2, seed=0, hidden=5)
        assert m.W1.shape == (5, 8) and m.W2.shape == (3, 5)
        assert np.all(m.b1 == 0) and np.all(m.b2 == 0)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            init_backbone(0, 3, 1, seed=0)


class TestForward:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 2))
        np.testing.assert_array_equal(forward(LinearBackbone(np.eye(5), np.zeros(5)), x), x)

    def test_zero(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 2))
        assert np.all(forward(LinearBackbone(np.zeros((2, 5)), np.zeros(2)), x) == 0)

    def test_hand_example(self):
        out = forward(LinearBackbone(np.array([[1.0, 1.0]]), np.array([0.5])), np.array([[[2.0], [3.0]]]))
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 5.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward(LinearBackbone(np.eye(3), np.zeros(3)), np.zeros((1, 4, 1)))


class TestLoss:
    def test_exact_target_zero_loss(self):
        x = np.random.default_rng(1).normal(size=(4, 3, 2))
        batch = WindowBatch(x, x.copy())
        model = LinearBackbone(np.eye(3), np.zeros(3))
        for norm in (Normalizer("none"), Normalizer("revin"), Normalizer("norin", ShapeParams.uniform(2.0, 0.3, 2))):
            loss, grads = loss_and_grads(model, batch, norm, joint=norm.kind == "norin")
            assert loss == pytest.approx(0.0, abs=1e-24)
            for g in grads.values():
                np.testing.assert_allclose(g, 0.0, atol=1e-10)

    @pytest.mark.parametrize("w", [-1.0, 0.0, 0.7, 1.5])
    def test_scalar_hand_derivative(self, w):
        batch = WindowBatch(np.array([[[2.0]]]), np.array([[[3.0]]]))
        loss, grads = loss_and_grads(LinearBackbone(np.array([[w]]), np.zeros(1)), batch, Normalizer("none"))
        assert loss == pytest.approx((2 * w - 3) ** 2, rel=1e-15)
        assert grads["W"][0, 0] == pytest.approx(2 * (2 * w - 3) * 2, rel=1e-15)

    @pytest.mark.parametrize("kind", ["none", "revin", "norin"])
    @pytest.mark.parametrize("joint", [False, True])
    @pytest.mark.parametrize("hidden", [0, 3])
    def test_finite_differences(self, kind, joint, hidden):
        rng = np.random.default_rng([["none", "revin", "norin"].index(kind), int(joint), hidden])
        for trial in range(20):
            model, batch, norm = random_instance(
                rng, kind, hidden=hidden, shared=trial % 2 == 0, affine=kind == "revin" and joint
            )
            worst, _ = max_relative_error(model, batch, norm, joint)
            assert worst <= 1e-4

    def test_frozen_shape_has_no_shape_grads(self):
        rng = np.random.default_rng(0)
        model, batch, norm = random_instance(rng, "norin")
        _, grads = loss_and_grads(model, batch, norm, joint=False)
        assert "delta" not in grads and "epsilon" not in grads


class TestTemplate:
    @pytest.mark.parametrize(
        "norm",
        [
            Normalizer("none"),
            Normalizer("revin"),
            Normalizer("norin", ShapeParams.uniform(0.9, -0.7, 3)),
            Normalizer("norin", ShapeParams(np.array([1.0, 2.0, 4.0]), np.array([0.5, 0.0, -1.0]), shared=False)),
        ],
        ids=["none", "revin", "norin-shared", "norin-per-channel"],
    )
    def test_identity_backbone_returns_lookback(self, norm):
        x = np.random.default_rng(2).standard_t(3, size=(10, 12, 3)) * 5 + 2
        y_hat = predict(LinearBackbone(np.eye(12), np.zeros(12)), norm, x)
        np.testing.assert_allclose(y_hat, x, rtol=1e-9, atol=1e-9 * np.abs(x).max())


class _Cfg:
    beta1, beta2, adam_eps, lr, weight_decay = 0.9, 0.999, 0.0, 0.1, 0.0


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        new = adamw_step(p, {"w": np.zeros(2)}, {}, _Cfg, 1)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_moves_by_lr(self):
        new = adamw_step({"w": np.array([0.5])}, {"w": np.array([1.0])}, {}, _Cfg, 1)
        assert new["w"][0] == pytest.approx(0.4, abs=1e-15)

    def test_decoupled_decay(self):
        p = {"w": np.array([2.0, -3.0])}
        new = adamw_step(p, {"w": np.zeros(2)}, {}, _Cfg, 1, weight_decay=0.01)
        np.testing.assert_allclose(new["w"], p["w"] - 0.1 * 0.01 * p["w"], rtol=1e-15)

    def test_state_accumulates(self):
        state = {}
        p = {"w": np.array([0.0])}
        p = adamw_step(p, {"w": np.array([1.0])}, state, _Cfg, 1)
        p = adamw_step(p, {"w": np.array([1.0])}, state, _Cfg, 2)
        m, v = state["w"]
        assert m[0] == pytest.approx(0.19) and v[0] == pytest.approx(0.001999)
        assert p["w"][0] == pytest.approx(-0.2, abs=1e-12)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            adamw_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, {}, _Cfg, 0)


class TestTrain:
    def test_zero_epochs(self):
        s = _small_series()
        cfg = TrainConfig(**dict(SMALL, epochs=0))
        r = train(s, SplitSpec(), "none", None, cfg)
        assert r.val_trace == [] and r.epochs_run == 0
        init = init_backbone(16, 4, 2, cfg.seed)
        np.testing.assert_array_equal(r.model.W, init.W)
        assert r.best_val_mse == r.metrics["val"]["mse"]

    def test_noiseless_linear_data_reaches_zero_loss(self):
        s = _two_sines()
        T, H = 8, 2
        # oracle: the closed-form least-squares fit has zero residual on these windows
        b = make_windows(s, SplitSpec(), "train", T, H)
        X = np.concatenate([b.lookbacks[:, :, 0], np.ones((b.n, 1))], axis=1)
        coef, *_ = np.linalg.lstsq(X, b.horizons[:, :, 0], rcond=None)
        assert np.mean((X @ coef - b.horizons[:, :, 0]) ** 2) < 1e-20
        cfg = TrainConfig(
            epochs=200, lr=1e-2, weight_decay=0.0, lookback=T, horizon=H, batch_size=64, early_stop_patience=0
        )
        r = train(s, SplitSpec(), "none", None, cfg)
        assert r.metrics["train"]["mse"] <= 1e-6

    def test_deterministic(self):
        s = _small_series()
        cfg = TrainConfig(**SMALL, joint_shape_training=True)
        shape = ShapeParams.uniform(1.5, 0.0, 2)
        a = train(s, SplitSpec(), "norin", shape, cfg)
        b = train(s, SplitSpec(), "norin", shape, cfg)
        assert a.to_json() == b.to_json()
        np.testing.assert_array_equal(a.model.W, b.model.W)

    def test_trace_lengths(self):
        s = _small_series()
        cfg = TrainConfig(**SMALL, joint_shape_training=True)
        r = train(s, SplitSpec(), "norin", ShapeParams.uniform(2.0, 0.0, 2), cfg)
        assert len(r.val_trace) == r.epochs_run == len(r.shape_trajectory)
        r2 = train(s, SplitSpec(), "norin", ShapeParams.uniform(2.0, 0.0, 2), TrainConfig(**SMALL))
        assert r2.shape_trajectory == []

    def test_best_val_is_trace_minimum(self):
        s = _small_series()
        r = train(s, SplitSpec(), "revin", None, TrainConfig(**dict(SMALL, epochs=8)))
        assert r.best_val_mse == min(r.val_trace)
        assert r.best_epoch == int(np.argmin(r.val_trace)) + 1
        # restored parameters reproduce the best validation score
        assert r.metrics["val"]["mse"] == pytest.approx(r.best_val_mse, rel=1e-12)

    def test_more_epochs_never_hurt_best_val(self):
        s = _small_series()
        base = dict(SMALL, early_stop_patience=0)
        short = train(s, SplitSpec(), "none", None, TrainConfig(**dict(base, epochs=4)))
        long = train(s, SplitSpec(), "none", None, TrainConfig(**dict(base, epochs=8)))
        assert long.best_val_mse <= short.best_val_mse
        assert long.val_trace[:4] == short.val_trace

    def test_frozen_shape_unchanged(self):
        s = _small_series()
        shape = ShapeParams.uniform(2.0, -0.2, 2)
        r = train(s, SplitSpec(), "norin", shape, TrainConfig(**SMALL))
        assert r.final_shape == r.initial_shape == {"delta": [2.0, 2.0], "epsilon": [-0.2, -0.2]}

    def test_zero_shape_lr_keeps_trajectory_constant(self):
        s = _small_series()
        shape = ShapeParams.uniform(1.2, 0.1, 2)
        r = train(s, SplitSpec(), "norin", shape, TrainConfig(**SMALL, joint_shape_training=True, shape_lr=0.0))
        for snap in r.shape_trajectory:
            assert snap["delta"] == [1.2, 1.2] and snap["epsilon"] == [0.1, 0.1]

    def test_joint_mode_moves_shape(self):
        s = _small_series()
        cfg = TrainConfig(**SMALL, joint_shape_training=True)
        r = train(s, SplitSpec(), "norin", ShapeParams.uniform(1.0, 0.0, 2), cfg)
        assert r.final_shape != r.initial_shape

    def test_revin_affine_trains(self):
        s = _small_series()
        r = train(s, SplitSpec(), "revin", None, TrainConfig(**SMALL, revin_affine=True))
        assert np.isfinite(r.metrics["test"]["mse"])

    def test_mlp_backbone_trains(self):
        s = _small_series()
        r = train(s, SplitSpec(), "norin", ShapeParams.uniform(2.0, 0.0, 2), TrainConfig(**SMALL, hidden=8))
        assert np.isfinite(r.metrics["test"]["mse"])
        assert r.best_val_mse <= r.val_trace[0]

    def test_non_finite_loss_reports_epoch(self):
        s = synth_heavy_tailed(0, 400, 1, GeneratorParams(delta=0.5, scale=1e3))
        cfg = TrainConfig(**dict(SMALL, lr=1e3), joint_shape_training=True, shape_lr=10.0)
        with pytest.raises(TrainingError) as info:
            with np.errstate(all="ignore"):
                train(s, SplitSpec(), "norin", ShapeParams.uniform(0.8, 0.0, 1), cfg)
        assert info.value.epoch is not None and info.value.epoch >= 1

    def test_split_too_short(self):
        s = _small_series(L=60)
        with pytest.raises(ValueError):
            train(s, SplitSpec(), "none", None, TrainConfig(**SMALL))

    def test_unknown_normalizer(self):
        with pytest.raises(ValueError):
            train(_small_series(), SplitSpec(), "batchnorm", None, TrainConfig(**SMALL))


class TestCheckpoint:
    @pytest.mark.parametrize("hidden", [0, 4])
    def test_round_trip(self, tmp_path, hidden):
        m = init_backbone(6, 3, 1, seed=9, hidden=hidden)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, m, seed=9, config_hash="abc")
        back, header = load_checkpoint(path)
        assert header["seed"] == 9 and header["config_hash"] == "abc"
        for k, v in m.params().items():
            np.testing.assert_array_equal(back.params()[k], v)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, init_backbone(6, 3, 1, seed=0), seed=0, config_hash="x")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
