import json

import numpy as np
import pytest

from pointsentinel import autodiff as ad
from pointsentinel.autodiff import Tensor
from pointsentinel.nnmodel import BackboneConfig, CheckpointError, load_model
from pointsentinel.synthgen import SceneConfig, generate_dataset
from pointsentinel.trainer import (
    Dataset,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    dataset_loss,
    load_checkpoint,
    load_train_config,
    overfit_check,
    save_checkpoint,
    sgd_step,
    train,
)

TINY = BackboneConfig(base_channels=4, n_blocks=1)


@pytest.fixture(scope="module")
def tiny_data():
    cfg = SceneConfig(image_size=(16, 16), seed=3, tube_width_px=1)
    return Dataset.from_scenes(generate_dataset(cfg, 24, 2))


def tiny_cfg(**kw):
    base = dict(backbone=TINY, batch_size=8, epochs=3, learning_rate=1e-2)
    base.update(kw)
    return TrainConfig(**base)


def same_params(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestOptimizers:
    def test_sgd_example(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.array([0.5])}, {}, lr=0.1)
        assert p["w"][0] == pytest.approx(0.95)

    def test_sgd_zero_grad(self):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(p, {"w": np.zeros(2)}, {}, lr=0.1, momentum=0.9)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_sgd_momentum(self):
        p, state = {"w": np.array([0.0])}, {}
        for _ in range(2):
            sgd_step(p, {"w": np.array([1.0])}, state, lr=1.0, momentum=0.5)
        assert p["w"][0] == pytest.approx(-(1.0 + 1.5))

    @pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
    def test_adam_first_step(self, g):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([g])}, {}, lr=0.01)
        # bias-corrected m/sqrt(v) is sign(g)·|g|/(|g| + eps)
        expected = -0.01 * g / (abs(g) + 1e-8)
        assert p["w"][0] == pytest.approx(expected, rel=1e-9)
        assert abs(p["w"][0]) == pytest.approx(0.01, rel=1e-4)

    def test_adam_counts_steps(self):
        p, state = {"w": np.zeros(3)}, {}
        for _ in range(4):
            adam_step(p, {"w": np.ones(3)}, state, lr=0.1)
        assert state["t"] == 4

    @pytest.mark.parametrize("step", [sgd_step, adam_step])
    def test_shape_mismatch(self, step):
        with pytest.raises(ValueError):
            step({"w": np.zeros(3)}, {"w": np.zeros(2)}, {}, 0.1)

    def test_sgd_monotone_on_toy_regression(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 3))
        y = (x @ np.array([0.3, -0.2, 0.1]) + 0.5).reshape(-1, 1)
        params = {"w": np.zeros((3, 1)), "b": np.zeros(1)}
        losses_seen = []
        for _ in range(200):
            w, b = Tensor(params["w"], requires_grad=True), Tensor(params["b"], requires_grad=True)
            diff = ad.sub(ad.linear(Tensor(x), w, b), Tensor(y))
            loss = ad.mean(ad.square(diff))
            ad.backward(loss)
            losses_seen.append(loss.item())
            sgd_step(params, {"w": w.grad, "b": b.grad}, {}, lr=1e-3)
        assert np.all(np.diff(losses_seen) <= 0)
        assert losses_seen[-1] < losses_seen[0]


class TestTrainConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg(head_variant="pixelwise", optimizer="sgd", momentum=0.9)
        path = tmp_path / "train.json"
        path.write_text(json.dumps({"version": 1, **cfg.to_dict()}))
        assert load_train_config(path) == cfg

    def test_requires_version(self, tmp_path):
        path = tmp_path / "train.json"
        path.write_text(json.dumps({"epochs": 2}))
        with pytest.raises(ValueError, match="version"):
            load_train_config(path)

    @pytest.mark.parametrize("kw", [{"head_variant": "heatmap"}, {"optimizer": "rmsprop"},
                                    {"batch_size": 0}, {"learning_rate": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"warmup": 3})


class TestTrain:
    @pytest.mark.parametrize("variant", ["spatial_softmax", "pixelwise", "regression"])
    def test_deterministic(self, tiny_data, variant):
        a = train(tiny_cfg(head_variant=variant), tiny_data, tiny_data)
        b = train(tiny_cfg(head_variant=variant), tiny_data, tiny_data)
        assert same_params(a.params, b.params)
        assert a.history == b.history

    def test_history(self, tiny_data):
        ck = train(tiny_cfg(), tiny_data, tiny_data)
        assert [h["epoch"] for h in ck.history] == [1, 2, 3]
        assert all(0 <= h["val_precision_auc"] <= 1 for h in ck.history)
        best = max(ck.history, key=lambda h: h["val_precision_auc"])
        assert ck.best_epoch == best["epoch"]

    def test_zero_lr_keeps_params(self, tiny_data):
        from pointsentinel.nnmodel import DetectionModel

        cfg = tiny_cfg(learning_rate=0.0, optimizer="sgd")
        ck = train(cfg, tiny_data)
        init = DetectionModel.create(cfg.model_config(), cfg.seed).parameter_arrays()
        assert same_params(ck.params, init)

    def test_seed_changes_result(self, tiny_data):
        a = train(tiny_cfg(seed=1), tiny_data)
        b = train(tiny_cfg(seed=2), tiny_data)
        assert not same_params(a.params, b.params)

    def test_jitter_runs_and_is_deterministic(self, tiny_data):
        a = train(tiny_cfg(horizontal_jitter_px=2), tiny_data)
        b = train(tiny_cfg(horizontal_jitter_px=2), tiny_data)
        assert same_params(a.params, b.params)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_epoch(self, tiny_data):
        with pytest.raises(TrainingDiverged, match="epoch"):
            train(tiny_cfg(learning_rate=1e30, optimizer="sgd", head_variant="pixelwise"), tiny_data)

    def test_empty(self, tiny_data):
        with pytest.raises(ValueError):
            train(tiny_cfg(), tiny_data.subset([]))

    def test_missing_point(self, tiny_data):
        from dataclasses import replace

        bad = Dataset(tiny_data.images[:2], [replace(tiny_data.records[0], point=None), tiny_data.records[1]])
        with pytest.raises(ValueError):
            train(tiny_cfg(), bad)

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        cfg = tiny_cfg(epochs=4)
        full = train(cfg, tiny_data, tiny_data)
        saved = {}

        def keep(ck):
            if ck.epoch == 2:
                save_checkpoint(ck, tmp_path / "e2.ckpt")
                saved["done"] = True

        train(tiny_cfg(epochs=2), tiny_data, tiny_data, on_epoch=keep)
        resumed = train(cfg, tiny_data, tiny_data, resume=load_checkpoint(tmp_path / "e2.ckpt"))
        assert saved and same_params(full.params, resumed.params)
        assert same_params(full.best_params, resumed.best_params)
        assert full.history == resumed.history


class TestCheckpoint:
    def test_round_trip(self, tiny_data, tmp_path):
        ck = train(tiny_cfg(optimizer="adam"), tiny_data, tiny_data)
        save_checkpoint(ck, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert back.config == ck.config and back.epoch == ck.epoch and back.history == ck.history
        assert same_params(back.params, ck.params)
        assert same_params(back.best_params, ck.best_params)
        assert back.opt_state["t"] == ck.opt_state["t"]
        assert same_params({k: v for k, v in back.opt_state.items() if k != "t"},
                           {k: v for k, v in ck.opt_state.items() if k != "t"})

    def test_identical_runs_identical_bytes(self, tiny_data, tmp_path):
        for name in ("a", "b"):
            save_checkpoint(train(tiny_cfg(), tiny_data, tiny_data), tmp_path / f"{name}.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_load_model_prefers_best(self, tiny_data, tmp_path):
        ck = train(tiny_cfg(epochs=4), tiny_data, tiny_data)
        save_checkpoint(ck, tmp_path / "c.ckpt")
        model = load_model(tmp_path / "c.ckpt")
        assert same_params(model.parameter_arrays(), ck.best_params)

    def test_truncated(self, tiny_data, tmp_path):
        save_checkpoint(train(tiny_cfg(epochs=1), tiny_data), tmp_path / "c.ckpt")
        raw = (tmp_path / "c.ckpt").read_bytes()
        for cut in (0, 10, len(raw) // 2, len(raw) - 1):
            (tmp_path / "t.ckpt").write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "t.ckpt")


class TestOverfit:
    @pytest.mark.parametrize("variant", ["spatial_softmax", "pixelwise", "regression"])
    def test_small_subset(self, variant):
        cfg = SceneConfig(image_size=(16, 16), seed=8, tube_width_px=1)
        data = Dataset.from_scenes(generate_dataset(cfg, 10))
        run = tiny_cfg(head_variant=variant, batch_size=10, backbone=BackboneConfig(base_channels=8, n_blocks=1))
        initial, final, used = overfit_check(run, data, epochs=200)
        assert final < 0.1 * initial
        assert used <= 200

    def test_dataset_loss_matches_batch(self, tiny_data):
        from pointsentinel.nnmodel import DetectionModel

        model = DetectionModel.create(tiny_cfg().model_config(), 0)
        a = dataset_loss(model, tiny_data, batch_size=5)
        b = dataset_loss(model, tiny_data, batch_size=100)
        assert a == pytest.approx(b, rel=1e-5)
