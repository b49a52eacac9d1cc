"""Batch sampling, the training step, SGD, and the full loop on a tiny dataset."""

import numpy as np
import pytest

from conftest import make_rng
from os2dkit import features, geometry, trainer
from os2dkit.datagen import ObjectAnnotation, SceneRecord
from os2dkit.diffengine import ParameterStore
from os2dkit.trainer import (
    SGD,
    TrainConfig,
    build_batch,
    init_model_store,
    load_model,
    sample_patch,
    sgd_step,
    train,
    training_step,
)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        TrainConfig(patch_size=100)
    with pytest.raises(ValueError, match="milestones"):
        TrainConfig(milestones=(0.75, 0.5))
    with pytest.raises(ValueError, match="milestones"):
        TrainConfig(milestones=(0.5, 0.5))
    with pytest.raises(ValueError, match="loss_type"):
        TrainConfig(loss_type="focal")
    with pytest.raises(ValueError, match="dtype"):
        TrainConfig(dtype="float16")


def test_config_margin_defaults_follow_loss_type():
    assert TrainConfig(loss_type="cl").resolved_m_pos == 1.0
    assert TrainConfig(loss_type="rll").resolved_m_pos == 0.6
    assert TrainConfig(loss_type="rll", m_pos=0.9).resolved_m_pos == 0.9


def test_lr_schedule_steps_down_at_milestones():
    cfg = TrainConfig(steps=1000, lr=1e-3, milestones=(0.5, 0.75), lr_decay=0.1)
    assert cfg.milestone_steps() == [500, 750]
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(499) == 1e-3
    assert cfg.lr_at(500) == pytest.approx(1e-4)
    assert cfg.lr_at(749) == pytest.approx(1e-4)
    assert cfg.lr_at(750) == pytest.approx(1e-5)
    assert cfg.lr_at(999) == pytest.approx(1e-5)


def test_init_model_store_contents():
    norm = (np.full(3, 0.5), np.full(3, 0.25))
    store = init_model_store(make_rng(800), norm, "v1", np.float64)
    names = dict(store.items())
    assert not names["norm.mean"].trainable and not names["norm.std"].trainable
    assert names["tnet.conv3.w"].data.dtype == np.float64
    assert np.all(names["tnet.conv3.w"].data == 0)  # identity start
    again = init_model_store(make_rng(800), norm, "v1", np.float64)
    for name, t in store.items():
        assert np.array_equal(t.data, dict(again.items())[name].data)


# ---------------------------------------------------------------------------
# patch sampling


def _rec(name, size, boxes, cids, difficult=None, value=0.5):
    objs = [ObjectAnnotation(np.asarray(b, dtype=np.float64), c,
                             bool(difficult[i]) if difficult is not None else False)
            for i, (b, c) in enumerate(zip(boxes, cids))]
    rec = SceneRecord(name, None, size, size, objs)
    img = np.full((3, size, size), value, dtype=np.float32)
    return rec, img


def test_sample_patch_keeps_an_object_center_inside():
    cfg = TrainConfig(patch_size=128, crop_scale_min=1.0, crop_scale_max=1.0)
    rec, img = _rec("a", 200, [[80.0, 80.0, 120.0, 120.0]], [3])
    pad = np.zeros(3)
    for trial in range(10):
        p = sample_patch(rec, img, 200, cfg, make_rng(801, trial), pad)
        assert p.image.shape == (3, 128, 128)
        assert p.class_ids.tolist() == [3]
        x1, y1, x2, y2 = p.boxes[0]
        assert 0 <= x1 < x2 <= 128 and 0 <= y1 < y2 <= 128


def test_sample_patch_marks_truncated_objects_difficult():
    # object spans 190 of 200 px; a 128 px crop can keep at most 128^2 < half
    cfg = TrainConfig(patch_size=128, crop_scale_min=1.0, crop_scale_max=1.0)
    rec, img = _rec("a", 200, [[0.0, 0.0, 190.0, 190.0]], [0])
    p = sample_patch(rec, img, 200, cfg, make_rng(802), np.zeros(3))
    assert p.difficult.tolist() == [True]


def test_sample_patch_drops_objects_fully_outside():
    cfg = TrainConfig(patch_size=128, crop_scale_min=1.0, crop_scale_max=1.0)
    rec, img = _rec("a", 400, [[0.0, 0.0, 40.0, 40.0], [360.0, 360.0, 400.0, 400.0]],
                    [1, 2])
    for trial in range(8):
        p = sample_patch(rec, img, 400, cfg, make_rng(803, trial), np.zeros(3))
        assert len(p.class_ids) == 1  # corners are further apart than one crop


def test_sample_patch_pads_small_scenes_with_fill_value():
    cfg = TrainConfig(patch_size=128, crop_scale_min=0.35, crop_scale_max=0.35)
    rec, img = _rec("a", 200, [[20.0, 20.0, 120.0, 120.0]], [0], value=0.9)
    pad = np.array([0.1, 0.2, 0.3])
    p = sample_patch(rec, img, 200, cfg, make_rng(804), pad)
    # resized scene is 70 px, the rest of the 128 px patch is fill
    assert np.allclose(p.image[:, :, 70:], pad.reshape(3, 1, 1))
    assert np.allclose(p.image[:, 70:, :], pad.reshape(3, 1, 1))
    assert not np.allclose(p.image[:, :70, :70], pad.reshape(3, 1, 1))


def test_sample_patch_scales_boxes_with_the_crop():
    cfg = TrainConfig(patch_size=64, crop_scale_min=0.5, crop_scale_max=0.5)
    rec, img = _rec("a", 128, [[0.0, 0.0, 128.0, 128.0]], [0])
    p = sample_patch(rec, img, 128, cfg, make_rng(805), np.zeros(3))
    assert np.array_equal(p.boxes[0], [0.0, 0.0, 64.0, 64.0])
    assert not p.difficult[0]  # fully inside at exactly half scale


class _ArrayRecord(SceneRecord):
    """SceneRecord that serves its pixels from memory."""

    def attach(self, img):
        self._img = img
        return self

    def load_image(self):
        return self._img


def _fake_records(n, size=64):
    records = []
    rng = make_rng(806, n, size)
    for i in range(n):
        boxes, cids = [], []
        for j in range(int(rng.integers(1, 4))):
            x1, y1 = rng.uniform(2, size - 22, 2)
            w, h = rng.uniform(12, 18, 2)
            boxes.append([x1, y1, min(x1 + w, size - 1.0), min(y1 + h, size - 1.0)])
            cids.append(int(rng.integers(0, 12)))
        objs = [ObjectAnnotation(np.asarray(b), c, False) for b, c in zip(boxes, cids)]
        rec = _ArrayRecord(f"r{i}", None, size, size, objs)
        rec.attach(rng.random((3, size, size), dtype=np.float32))
        records.append(rec)
    return records


def test_build_batch_class_cap_sweep():
    # 1000 batches: class count never exceeds the cap, annotated classes come
    # first, and fill-up draws stay inside the class pool without duplicates
    records = _fake_records(6)
    pool = list(range(12))
    cfg = TrainConfig(patch_size=16, batch_size=3, max_labels=4,
                      crop_scale_min=0.8, crop_scale_max=1.2)
    rng = make_rng(807)
    cache = trainer._ImageCache()
    pad = np.zeros(3)
    for _ in range(1000):
        batch = build_batch(records, pool, 64, cfg, rng, cache, pad)
        assert len(batch.patches) == cfg.batch_size
        assert len(batch.class_ids) <= cfg.max_labels
        assert len(set(batch.class_ids)) == len(batch.class_ids)
        assert set(batch.class_ids) <= set(pool)
        annotated = {int(c) for p in batch.patches for c in p.class_ids}
        if len(annotated) <= cfg.max_labels:
            assert annotated <= set(batch.class_ids)
            assert len(batch.class_ids) == min(cfg.max_labels, len(pool))
        else:
            assert set(batch.class_ids) <= annotated


def test_build_batch_deterministic():
    records = _fake_records(3)
    cfg = TrainConfig(patch_size=16, batch_size=2, max_labels=4)
    runs = []
    for _ in range(2):
        batch = build_batch(records, list(range(12)), 64, cfg, make_rng(808),
                            trainer._ImageCache(), np.zeros(3))
        runs.append(batch)
    a, b = runs
    assert a.class_ids == b.class_ids
    for pa, pb in zip(a.patches, b.patches):
        assert np.array_equal(pa.image, pb.image)
        assert np.array_equal(pa.boxes, pb.boxes)


# ---------------------------------------------------------------------------
# the step


def _real_batch(tiny_dataset, cfg, seed):
    records = tiny_dataset.splits["train"]
    cache = trainer._ImageCache()
    pad = tiny_dataset.normalization[0].astype(np.float64)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 102)))
    return build_batch(records, tiny_dataset.train_class_ids,
                       tiny_dataset.dataset_scale, cfg, rng, cache, pad)


def _class_images(tiny_dataset, dtype=np.float64):
    return {cid: features.resize_class_image(tiny_dataset.class_image(cid).astype(dtype))
            for cid in tiny_dataset.classes}


def test_training_step_loss_and_gradients(tiny_dataset, init_store64):
    cfg = TrainConfig(patch_size=64, batch_size=2, max_labels=3, dtype="float64")
    batch = _real_batch(tiny_dataset, cfg, seed=5)
    class_images = _class_images(tiny_dataset)
    init_store64.zero_grads()
    loss, report = training_step(init_store64, batch, cfg, class_images)
    assert np.isfinite(loss.data)
    assert report.loss.total == pytest.approx(float(loss.data))
    assert report.n_pos_pairs + report.n_neg_pairs == cfg.batch_size * len(batch.class_ids)
    loss.backward()
    g = dict(init_store64.items())["extractor.conv1.w"].grad
    assert g is not None and np.any(g != 0) and np.all(np.isfinite(g))


def test_remap_positive_ious_stay_above_threshold(tiny_dataset, init_store64):
    """Remapped localization positives always decode to IoU >= 0.8 boxes."""
    cfg = TrainConfig(patch_size=64, batch_size=2, max_labels=3, dtype="float64",
                      lr=1e-3, remap=True)
    store = init_model_store(make_rng(810), tiny_dataset.normalization, "v1", np.float64)
    crops = [r.load_image().astype(np.float64)[:, :96, :96]
             for r in tiny_dataset.splits["train"][:4]]
    features.warmup_extractor_stats(store, crops)
    class_images = _class_images(tiny_dataset)
    opt = SGD(store, cfg.momentum, cfg.weight_decay)
    for step in range(3):
        batch = _real_batch(tiny_dataset, cfg, seed=20 + step)
        store.zero_grads()
        loss, report = training_step(store, batch, cfg, class_images)
        if report.remap_pos_ious.size:
            assert report.remap_pos_ious.min() >= 0.8
        loss.backward()
        opt.step(cfg.lr_at(step))


def test_training_step_other_configurations(tiny_dataset, init_store64):
    class_images = _class_images(tiny_dataset)
    for kwargs in ({"remap": False}, {"loss_type": "cl"}):
        cfg = TrainConfig(patch_size=64, batch_size=1, max_labels=2, dtype="float64",
                          **kwargs)
        batch = _real_batch(tiny_dataset, cfg, seed=31)
        init_store64.zero_grads()
        loss, report = training_step(init_store64, batch, cfg, class_images)
        assert np.isfinite(loss.data)
        loss.backward()


def test_training_step_v2_variant(tiny_dataset):
    cfg = TrainConfig(patch_size=64, batch_size=1, max_labels=2, dtype="float64",
                      variant="v2")
    store = init_model_store(make_rng(811), tiny_dataset.normalization, "v2", np.float64)
    crops = [r.load_image().astype(np.float64)[:, :96, :96]
             for r in tiny_dataset.splits["train"][:4]]
    features.warmup_extractor_stats(store, crops)
    batch = _real_batch(tiny_dataset, cfg, seed=32)
    loss, report = training_step(store, batch, cfg, _class_images(tiny_dataset))
    assert np.isfinite(loss.data)
    loss.backward()


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_matches_hand_computation():
    store = ParameterStore()
    w = store.add("w", np.array([1.0]))
    opt = SGD(store, momentum=0.9, weight_decay=0.1)
    w.grad = np.array([0.5])
    opt.step(lr=0.1)
    # v = 0.5 + 0.1 * 1.0 = 0.6; w = 1 - 0.06
    np.testing.assert_allclose(w.data, [0.94], atol=1e-15)
    w.grad = np.array([0.5])
    opt.step(lr=0.1)
    # v = 0.9 * 0.6 + (0.5 + 0.094) = 1.134; w = 0.94 - 0.1134
    np.testing.assert_allclose(w.data, [0.8266], atol=1e-15)


def test_sgd_skips_missing_grads_and_rejects_nonfinite():
    store = ParameterStore()
    w = store.add("w", np.array([2.0]))
    u = store.add("u", np.array([3.0]))
    w.grad = np.array([1.0])
    SGD(store, 0.0, 0.0).step(lr=0.5)
    assert w.data[0] == 1.5 and u.data[0] == 3.0  # u had no grad
    w.grad = np.array([np.inf])
    with pytest.raises(FloatingPointError, match="w"):
        SGD(store, 0.0, 0.0).step(lr=0.5)


def test_sgd_step_uses_schedule():
    cfg = TrainConfig(steps=10, lr=1.0, milestones=(0.5,), lr_decay=0.1,
                      momentum=0.0, weight_decay=0.0)
    store = ParameterStore()
    w = store.add("w", np.array([0.0]))
    w.grad = np.array([1.0])
    state = sgd_step(store, cfg, step_index=0)
    assert w.data[0] == -1.0
    w.grad = np.array([1.0])
    sgd_step(store, cfg, step_index=5, state=state)  # past the milestone
    np.testing.assert_allclose(w.data, [-1.1], atol=1e-15)


def test_sgd_preserves_float32_storage():
    store = ParameterStore()
    w = store.add("w", np.array([1.0], dtype=np.float32))
    w.grad = np.array([0.5], dtype=np.float32)
    SGD(store, 0.9, 1e-4).step(lr=1e-2)
    assert w.data.dtype == np.float32


# ---------------------------------------------------------------------------
# the loop


@pytest.fixture(scope="module")
def short_train(tiny_dataset, tmp_path_factory):
    cfg = TrainConfig(steps=2, batch_size=2, patch_size=64, max_labels=3,
                      dtype="float64", warmup_patches=4, val_every=1,
                      val_images=1, val_level=0.5, seed=9)
    out = tmp_path_factory.mktemp("short_train")
    result = train(tiny_dataset, cfg, out / "a")
    return tiny_dataset, cfg, result


def test_train_writes_artifacts(short_train):
    _, _, result = short_train
    out = result.out_dir
    for name in ("config.txt", "metrics.log", "run.txt",
                 "ckpt_init.bin", "ckpt_best.bin", "ckpt_final.bin"):
        assert (out / name).is_file()
    lines = (out / "metrics.log").read_text().splitlines()
    assert len(lines) == len(result.metrics)
    for line, (step, loss, val) in zip(lines, result.metrics):
        s, l, m = line.split("\t")
        assert int(s) == step and float(l) == loss and float(m) == val
    assert result.metrics[0][0] == 0
    assert result.metrics[-1][0] == 2
    assert 0.0 <= result.final_map <= 1.0


def test_train_best_checkpoint_tracks_metrics(short_train):
    _, _, result = short_train
    assert result.best_map == max(m for _, _, m in result.metrics)
    store, meta = load_model(result.best_path)
    assert meta["step"] == result.best_step
    assert meta["val_map"] == result.best_map


def test_train_checkpoint_round_trip(short_train):
    tiny_dataset, cfg, result = short_train
    store, meta = load_model(result.final_path)
    assert meta["step"] == cfg.steps
    assert meta["dataset_scale"] == tiny_dataset.dataset_scale
    assert meta["config"]["loss_type"] == cfg.loss_type
    assert float(meta["config"]["lr"]) == cfg.lr
    for name, t in store.items():
        assert np.all(np.isfinite(t.data)), name
    assert dict(store.items())["norm.mean"].data.dtype == np.float64


def test_train_same_seed_same_metrics(short_train, tmp_path):
    tiny_dataset, cfg, result = short_train
    rerun = train(tiny_dataset, cfg, tmp_path / "b")
    first = (result.out_dir / "metrics.log").read_bytes()
    second = (rerun.out_dir / "metrics.log").read_bytes()
    assert first == second
    a, _ = load_model(result.final_path)
    b, _ = load_model(rerun.final_path)
    for name, t in a.items():
        assert np.array_equal(t.data, dict(b.items())[name].data), name


def test_train_zero_steps_smoke(tiny_dataset, tmp_path):
    cfg = TrainConfig(steps=0, batch_size=1, patch_size=64, max_labels=2,
                      dtype="float64", warmup_patches=2, val_images=1,
                      val_level=0.5, seed=3)
    result = train(tiny_dataset, cfg, tmp_path / "z")
    assert result.metrics == [(0, 0.0, result.final_map)]
    assert result.best_map == result.final_map


def test_load_model_without_metadata(tmp_path):
    store = ParameterStore()
    store.add("w", np.arange(3.0))
    store.save(tmp_path / "bare.bin")
    loaded, meta = load_model(tmp_path / "bare.bin")
    assert meta == {}
    assert np.array_equal(dict(loaded.items())["w"].data, np.arange(3.0))
