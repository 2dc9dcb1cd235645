from __future__ import annotations

import numpy as np
import pytest

from dmk import autodiff as ad
from dmk.labels import damage_to_mask_value
from dmk.metrics import label_to_mask
from dmk.models import (
    ClassifierModel,
    DisasterClassifier,
    ExtraBranch,
    ModelError,
    SegmentationNet,
    TowerConfig,
    TrainConfig,
    TrainingError,
    building_dataset,
    classify_building,
    classify_disaster,
    disaster_extra,
    end_to_end_input,
    load_model,
    load_train_config,
    model_classifier,
    model_meta,
    model_segmenter,
    parse_config_text,
    pixel_accuracy,
    run_two_step,
    save_model,
    segment_end_to_end,
    train_classifier,
    train_disaster_classifier,
    train_segmenter,
    write_history,
)
from dmk.raster import CropSpec, rasterize
from dmk.synth import DisasterSpec, generate_scene, generate_scenes

SMALL = TowerConfig(16, 3, ((4, 3, 1), (8, 3, 1)))
SPEC = DisasterSpec("quake", (90, 110, 80), (190, 150, 120), (0.25, 0.25, 0.25, 0.25), (4, 6), (6, 12))


def patches(rng, n=3, side=16):
    return rng.uniform(0, 1, (n, 3, side, side)), rng.uniform(0, 1, (n, 3, side, side))


class TestClassifier:
    def test_shapes(self, rng):
        pre, post = patches(rng)
        for kind, extra in (("none", None), ("disaster", np.eye(4)[[0, 1, 2]]), ("ssim", rng.uniform(size=(3, 1)))):
            m = ClassifierModel(SMALL, ExtraBranch(kind, 4), seed=1)
            assert m.forward(pre, post, extra).shape == (3, 4)

    def test_separate_towers_have_more_params(self):
        shared = ClassifierModel(SMALL, shared_towers=True)
        separate = ClassifierModel(SMALL, shared_towers=False)
        assert len(separate.params) == len(shared.params) + 4

    def test_zero_head_uniform(self, rng):
        m = ClassifierModel(SMALL, seed=2)
        m.fc2_w.data[:] = 0.0
        pre, post = patches(rng, 1)
        logits = classify_building(m, pre[0].transpose(1, 2, 0), post[0].transpose(1, 2, 0))
        np.testing.assert_array_equal(logits, np.zeros(4))
        assert int(np.argmax(logits)) == 0

    def test_order_matters(self, rng):
        m = ClassifierModel(SMALL, seed=3)
        pre, post = patches(rng, 2)
        assert not np.allclose(m.forward(pre, post).data, m.forward(post, pre).data)

    def test_one_hot_changes_logits(self, rng):
        m = ClassifierModel(SMALL, ExtraBranch("disaster", 4), seed=4)
        pre, post = patches(rng, 1)
        a = m.forward(pre, post, np.eye(4)[[0]]).data
        b = m.forward(pre, post, np.eye(4)[[2]]).data
        assert not np.allclose(a, b)

    def test_gradient_reaches_every_parameter(self, rng):
        for kind, extra in (("none", None), ("disaster", np.eye(3)[[0, 2]]), ("ssim", rng.uniform(size=(2, 1)))):
            m = ClassifierModel(SMALL, ExtraBranch(kind, 3), shared_towers=False, seed=5)
            pre, post = patches(rng, 2)
            loss = ad.softmax_cross_entropy(m.forward(pre, post, extra), np.array([1, 3]))
            loss.backward()
            for name, p in m.params.items():
                assert p.grad is not None and np.abs(p.grad).sum() > 0, name

    def test_extra_validation(self, rng):
        pre, post = patches(rng, 2)
        with pytest.raises(ModelError):
            ClassifierModel(SMALL, ExtraBranch("disaster", 4)).forward(pre, post, None)
        with pytest.raises(ModelError):
            ClassifierModel(SMALL).forward(pre, post, np.ones((2, 1)))
        with pytest.raises(ModelError):
            ClassifierModel(SMALL).forward(pre[:, :, :8, :8], post[:, :, :8, :8])
        with pytest.raises(ModelError):
            ExtraBranch("colour")

    def test_tower_too_small(self):
        with pytest.raises(ModelError):
            TowerConfig(2)


def small_dataset(n_scenes=3, seed=0, side=16):
    scenes = generate_scenes([SPEC], n_scenes, seed=seed, side=64)
    return building_dataset([(s.pre, s.post, s.label) for s in scenes], CropSpec(0.1, side), {"quake": 0})


class TestTraining:
    def test_overtrain_small_batch(self):
        data = small_dataset(side=32).subset(np.arange(8))
        m = ClassifierModel(TowerConfig(32), seed=7)
        hist = train_classifier(m, data, TrainConfig(seed=7, batch=8, epochs=500, stop_at_train_acc=1.0))
        assert hist[-1].train_acc == 1.0

    def test_deterministic(self):
        data = small_dataset()
        runs = []
        for _ in range(2):
            m = ClassifierModel(SMALL, seed=9)
            hist = train_classifier(m, data, TrainConfig(seed=9, epochs=2, batch=4))
            runs.append(([(h.train_loss, h.train_acc) for h in hist], m.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_val_recorded(self):
        data = small_dataset()
        hist = train_classifier(ClassifierModel(SMALL), data, TrainConfig(epochs=1), val=data)
        assert 0.0 <= hist[0].val_acc <= 1.0

    def test_nan_aborts_with_diagnostic(self):
        data = small_dataset()
        with pytest.raises(TrainingError, match="learning rate"), np.errstate(all="ignore"):
            train_classifier(ClassifierModel(SMALL), data, TrainConfig(lr=1e200, epochs=2, momentum=0.0))

    def test_bad_labels(self):
        data = small_dataset()
        data.labels[0] = 7
        with pytest.raises(TrainingError):
            train_classifier(ClassifierModel(SMALL), data, TrainConfig(epochs=1))

    def test_with_branch(self):
        data = small_dataset()
        assert data.with_branch(ExtraBranch("ssim")).extra.shape == (len(data), 1)
        assert data.with_branch(ExtraBranch("disaster", 3)).extra.shape == (len(data), 3)
        assert data.with_branch(ExtraBranch()).extra is None


class TestDisaster:
    def test_single_disaster_trivial(self, rng):
        m = DisasterClassifier(1, side=16, blocks=((4, 3, 1),), hidden=8)
        s = generate_scene(SPEC, 64, seed=1)
        assert classify_disaster(m, s.pre, s.post).shape == (1,)
        x = np.stack([m.prepare(s.pre, s.post)] * 3)
        hist = train_disaster_classifier(m, x, np.zeros(3, int), TrainConfig(epochs=1), val=(x, np.zeros(3, int)))
        assert hist[0].val_acc == 1.0

    def test_prepare_shape(self):
        m = DisasterClassifier(3, side=32)
        s = generate_scene(SPEC, 64, seed=1)
        x = m.prepare(s.pre, s.post)
        assert x.shape == (6, 32, 32) and 0.0 <= x.min() and x.max() <= 1.0


class TestSegmentation:
    def test_shapes(self, rng):
        m = SegmentationNet(3, 5)
        assert m.forward(rng.uniform(size=(2, 3, 8, 12))).shape == (2, 5, 8, 12)
        with pytest.raises(ModelError):
            m.forward(rng.uniform(size=(1, 3, 7, 8)))

    def test_zero_weights_background(self, rng):
        m = SegmentationNet(3, 5)
        for p in m.parameters():
            p.data[:] = 0.0
        assert not segment_end_to_end(m, rng.uniform(-1, 1, (16, 16, 3))).any()

    def test_two_class_rejected_for_end_to_end(self):
        with pytest.raises(ModelError):
            segment_end_to_end(SegmentationNet(3, 2), np.zeros((8, 8, 3)))

    def test_memorises_one_scene(self):
        # no-damage buildings are invisible in a difference image, so the
        # memorisation scene uses damaged buildings only
        spec = DisasterSpec("x", (90, 110, 80), (190, 150, 120), (0, 1 / 3, 1 / 3, 1 / 3), (5, 8), (8, 16))
        s = generate_scene(spec, 64, seed=3)
        x = end_to_end_input(s.pre, s.post).transpose(2, 0, 1)[None]
        y = label_to_mask(s.label)[0][None].astype(np.int64)
        m = SegmentationNet(3, 5, seed=1)
        train_segmenter(m, x, y, TrainConfig(seed=1, lr=0.03, batch=1, epochs=500, stop_at_train_acc=0.995))
        assert pixel_accuracy(m, x, y) >= 0.99


class TestTwoStep:
    def scene(self):
        return generate_scene(SPEC, 64, seed=11)

    def test_oracle_reproduces_ground_truth(self):
        s = self.scene()
        gt = label_to_mask(s.label)[0]
        by_bounds = {b.footprint.bounds(): int(b.damage) for b in s.label.buildings}
        out = run_two_step(
            s.pre,
            s.post,
            lambda pre: (gt > 0).astype(np.uint8),
            lambda a, b, poly: by_bounds[poly.bounds()],
        )
        np.testing.assert_array_equal(out, gt)

    def test_no_buildings(self):
        s = self.scene()
        out = run_two_step(s.pre, s.post, lambda pre: np.zeros(pre.shape[:2], np.uint8), lambda *a: 3)
        assert not out.any()

    def test_classifier_sees_patches(self):
        s = self.scene()
        seen = []

        def classify(a, b, poly):
            seen.append((a.shape, b.shape))
            return 0

        gt = label_to_mask(s.label)[0]
        run_two_step(s.pre, s.post, lambda pre: gt > 0, classify, CropSpec(0.1, 24))
        assert seen and all(x == ((24, 24, 3), (24, 24, 3)) for x in seen)

    def test_model_adapters(self):
        s = self.scene()
        seg = SegmentationNet(3, 2, seed=1)
        cls = ClassifierModel(SMALL, ExtraBranch("disaster", 2), seed=1)
        extra = disaster_extra(cls, s.pre, s.post, oracle_index=1)
        np.testing.assert_array_equal(extra, [0.0, 1.0])
        out = run_two_step(s.pre, s.post, model_segmenter(seg), model_classifier(cls, extra), CropSpec(0.1, 16))
        assert out.shape == (64, 64) and out.max() <= 4
        with pytest.raises(ModelError):
            disaster_extra(cls, s.pre, s.post)
        ssim_cls = ClassifierModel(SMALL, ExtraBranch("ssim"), seed=1)
        gt = label_to_mask(s.label)[0]
        out = run_two_step(s.pre, s.post, lambda p: gt > 0, model_classifier(ssim_cls), CropSpec(0.1, 16))
        assert ((out > 0) == (gt > 0)).all()


class TestPersistence:
    @pytest.mark.parametrize(
        "model",
        [
            ClassifierModel(SMALL, ExtraBranch("disaster", 3), shared_towers=False, seed=3),
            DisasterClassifier(4, side=16, blocks=((4, 3, 1),), hidden=8, seed=2),
            SegmentationNet(3, 5, (4, 8), seed=5),
        ],
    )
    def test_round_trip(self, model, tmp_path):
        save_model(model, tmp_path / "m.dmk", {"disasters": ["a", "b"]})
        back = load_model(tmp_path / "m.dmk")
        assert back.config() == model.config()
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(back.params[k].data, v)
        assert model_meta(tmp_path / "m.dmk") == {"disasters": ["a", "b"]}

    def test_mismatch(self):
        with pytest.raises(ModelError):
            SegmentationNet(3, 2).load_state_dict({"x": np.ones(1)})

    def test_config_text(self, tmp_path):
        cfg = parse_config_text('# comment\nlr = 0.01\nepochs=3\nbranch = "ssim"\nshared_towers = false\n')
        assert cfg == {"lr": 0.01, "epochs": 3, "branch": "ssim", "shared_towers": False}
        (tmp_path / "c.cfg").write_text("bogus = 1\n")
        with pytest.raises(ValueError):
            load_train_config(tmp_path / "c.cfg")
        with pytest.raises(ValueError):
            parse_config_text("no equals sign")

    def test_history_csv(self, tmp_path):
        from dmk.models import EpochRecord

        write_history([EpochRecord(1, 0.5, 0.25), EpochRecord(2, 0.25, 0.5, 0.75)], tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_acc"
        assert lines[1].endswith(",") and lines[2].endswith("0.750000")
