import logging

import numpy as np
import pytest

from gspcount.dataset import Dataset
from gspcount.errors import ConfigError, NumericError, TrainingError
from gspcount.model import ConvBlock, ModelConfig, build_model
from gspcount.synth import SceneSpec, count_in_rect, generate_images
from gspcount.train import TrainConfig, epoch_samples, optimizer_step, train

TINY = ModelConfig(blocks=(ConvBlock(4), ConvBlock(4)), seed=1)

# pilot run at these exact settings: epoch 1 mean loss 3.3956..., epoch 200 mean loss 0.20754...
OVERFIT_FINAL_LOSS = 0.20754194108917617
OVERFIT_RATIO = 0.06112063910231712


def small_images(n=4, size=32, seed=0):
    n_max = 5 if size >= 32 else 1
    return generate_images(SceneSpec(height=size, width=size, n_min=1, n_max=n_max, separation=8), n, seed=seed)


class TestOptimizer:
    def test_adam_first_step(self):
        cfg = TrainConfig(lr=0.1)
        p = np.array([1.0, -1.0])
        g = np.array([2.0, -0.5])
        optimizer_step([p], [g], {}, cfg)
        # bias correction makes m_hat = g and v_hat = g^2 on the first step
        expected = np.array([1.0 - 0.1 * 2.0 / (2.0 + 1e-8), -1.0 + 0.1 * 0.5 / (0.5 + 1e-8)])
        np.testing.assert_allclose(p, expected, rtol=0, atol=1e-15)

    def test_adam_constant_gradient_steps_near_lr(self):
        cfg = TrainConfig(lr=0.01)
        p, state = np.zeros(1), {}
        for t in range(1, 6):
            before = p.copy()
            optimizer_step([p], [np.array([3.0])], state, cfg)
            assert before[0] - p[0] == pytest.approx(0.01 * 3.0 / (3.0 + 1e-8), rel=1e-12)
        assert state["t"] == 5

    def test_sgd_momentum(self):
        cfg = TrainConfig(optimizer="sgd", lr=0.1, momentum=0.5)
        p, state = np.array([0.0]), {}
        optimizer_step([p], [np.array([1.0])], state, cfg)
        assert p[0] == pytest.approx(-0.1)
        optimizer_step([p], [np.array([1.0])], state, cfg)
        # v = 0.5*(-0.1) - 0.1 = -0.15
        assert p[0] == pytest.approx(-0.25)

    def test_zero_gradient_is_noop(self):
        p = np.array([0.7, -0.2])
        optimizer_step([p], [np.zeros(2)], {}, TrainConfig())
        np.testing.assert_array_equal(p, [0.7, -0.2])

    def test_nonfinite_gradient(self):
        with pytest.raises(NumericError):
            optimizer_step([np.zeros(2)], [np.array([np.inf, 0.0])], {}, TrainConfig())

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            optimizer_step([np.zeros(2)], [np.zeros(3)], {}, TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(patch_size=0), dict(lr=0.0), dict(optimizer="rmsprop"),
                                        dict(loss="huber"), dict(epochs=-1), dict(object_centered=2.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_lines_round_trip(self):
        cfg = TrainConfig(patch_size=None, optimizer="sgd", epochs=3, object_centered=0.5, val_split="")
        mapping = dict(line.split("=", 1) for line in cfg.to_lines())
        assert TrainConfig.from_mapping(mapping) == cfg


class TestSamples:
    def test_labels_match_rects(self):
        images = small_images()
        by_id = {im.id: im for im in images}
        cfg = TrainConfig(patch_size=16, patches_per_image=5, object_centered=0.5)
        samples = epoch_samples(images, cfg, np.random.default_rng(0))
        assert len(samples) == 20
        for s in samples:
            assert s.count == count_in_rect(by_id[s.source_id], s.rect)

    def test_full_image_mode(self):
        images = small_images()
        samples = epoch_samples(images, TrainConfig(patch_size=None), np.random.default_rng(0))
        assert [s.count for s in samples] == [im.total_count for im in images]


class TestTrain:
    def test_zero_epochs_unchanged(self):
        model = build_model(TINY)
        before = [p.data.copy() for p in model.parameters()]
        _, log = train(model, small_images(), TrainConfig(epochs=0))
        assert len(log) == 0
        assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))

    def test_deterministic(self):
        cfg = TrainConfig(patch_size=16, epochs=2, batch_size=8, seed=4)
        a, la = train(build_model(TINY), small_images(), cfg)
        b, lb = train(build_model(TINY), small_images(), cfg)
        assert la.losses == lb.losses
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_dataset_splits_and_validation(self):
        images = small_images(6)
        ds = Dataset.from_images(images, ["train"] * 4 + ["val"] * 2)
        _, log = train(build_model(TINY), ds, TrainConfig(patch_size=16, epochs=2, seed=1, debug=True))
        assert [e.epoch for e in log.epochs] == [1, 2]
        assert all(e.val_mae is not None and e.val_mae >= 0 for e in log.epochs)

    def test_gap_validation_uses_tiles(self):
        ds = Dataset.from_images(small_images(6), ["train"] * 4 + ["val"] * 2)
        _, log = train(build_model(TINY.with_head("gap")), ds, TrainConfig(patch_size=16, epochs=1))
        assert log.epochs[0].val_mae is not None

    def test_undersized_images_skipped(self, caplog):
        images = small_images(2, size=32) + small_images(1, size=16, seed=5)
        with caplog.at_level(logging.WARNING):
            train(build_model(TINY), images, TrainConfig(patch_size=24, epochs=1))
        assert "skipping 1 images" in caplog.text

    def test_all_undersized(self):
        with pytest.raises(TrainingError):
            train(build_model(TINY), small_images(2, size=16), TrainConfig(patch_size=24, epochs=1))

    def test_divergence_names_epoch(self):
        model = build_model(TINY)
        with pytest.raises(TrainingError, match=r"epoch 1, batch \d+"):
            train(model, small_images(), TrainConfig(patch_size=16, epochs=1, optimizer="sgd", lr=1e300,
                                                     loss="mse"))

    def test_freeze_convs(self):
        model = build_model(TINY)
        kernels = [k.data.copy() for k in model.kernels]
        weight = model.weight.data.copy()
        train(model, small_images(), TrainConfig(patch_size=16, epochs=1, freeze_convs=True))
        assert all(np.array_equal(a, k.data) for a, k in zip(kernels, model.kernels))
        assert not np.array_equal(weight, model.weight.data)

    def test_log_csv(self, tmp_path):
        _, log = train(build_model(TINY), small_images(), TrainConfig(patch_size=16, epochs=2))
        log.write_csv(tmp_path / "a.csv", include_time=False)
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,val_mae"
        assert len(lines) == 3
        log.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "b.csv").read_text().splitlines()[0].endswith(",seconds")


@pytest.mark.slow
def test_overfit_regression():
    images = generate_images(SceneSpec(height=32, width=32, n_min=1, n_max=6, separation=8), 10, seed=21)
    model = build_model(ModelConfig(seed=0))
    _, log = train(model, images, TrainConfig(patch_size=None, batch_size=10, epochs=200, lr=1e-3, seed=0))
    ratio = log.losses[-1] / log.losses[0]
    assert ratio < 0.10
    assert log.losses[-1] == pytest.approx(OVERFIT_FINAL_LOSS, rel=1e-6)
    assert ratio == pytest.approx(OVERFIT_RATIO, rel=1e-6)
