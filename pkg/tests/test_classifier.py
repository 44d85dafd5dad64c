"""Patch loss analytics, ensembling rules, and the training protocol."""

import math

import numpy as np
import pytest

from patchlab.backbones import BackboneSpec, build_backbone
from patchlab.classifier import (EvalResult, PatchGrid, TrainConfig, aggregate,
                                 batch_patch_loss, evaluate, load_model, patch_grids,
                                 patch_loss_value, raw_patch_accuracy, save_model, train)
from patchlab.errors import DataError
from patchlab.images import ImageBuffer, save_png
from patchlab.manifest import Manifest, ManifestRecord


def grid_from_fake_probs(probs):
    probs = np.asarray(probs, dtype=np.float64)
    p = np.stack([1 - probs, probs])
    logits = np.log(np.maximum(p, 1e-30))
    return PatchGrid(logits=logits, probs=p)


def test_patch_loss_perfect_prediction_is_zero():
    g = grid_from_fake_probs([[1.0, 1.0]])
    assert patch_loss_value(g, "fake") == pytest.approx(0.0, abs=1e-9)


def test_patch_loss_uniform_is_ln2():
    g = grid_from_fake_probs([[0.5, 0.5], [0.5, 0.5]])
    assert patch_loss_value(g, "real") == pytest.approx(math.log(2), abs=1e-6)


def test_patch_loss_two_patch_hand_example():
    # true-class probs {0.9, 0.5}: -(ln .9 + ln .5)/2
    g = grid_from_fake_probs([[0.9, 0.5]])
    expect = -(math.log(0.9) + math.log(0.5)) / 2
    assert patch_loss_value(g, "fake") == pytest.approx(expect, abs=1e-6)


def test_aggregate_mean_and_argmax():
    label, score = aggregate(grid_from_fake_probs([[0.9, 0.9], [0.9, 0.9]]))
    assert label == "fake" and score == pytest.approx(0.9)

    label, score = aggregate(grid_from_fake_probs([[0.9, 0.2], [0.4, 0.7]]))
    assert score == pytest.approx(0.55)
    assert label == "fake"


def test_aggregate_single_patch_identity():
    label, score = aggregate(grid_from_fake_probs([[0.37]]))
    assert score == pytest.approx(0.37)
    assert label == "real"


def test_aggregate_exact_tie_goes_real():
    label, _ = aggregate(grid_from_fake_probs([[0.5]]))
    assert label == "real"


def make_flat_dataset(tmp_path, n_per_class=8, size=16, splits=("train", "val", "test")):
    """Real images are dark, fake images are bright: linearly separable."""
    m = Manifest(base_dir=tmp_path)
    rng = np.random.default_rng(0)
    for split in splits:
        for i in range(n_per_class):
            dark = rng.uniform(0.0, 0.12, size=(size, size, 3)).astype(np.float32)
            lite = rng.uniform(0.88, 1.0, size=(size, size, 3)).astype(np.float32)
            rp, fp = f"{split}/r{i}.png", f"{split}/f{i}.png"
            save_png(ImageBuffer(dark), tmp_path / rp)
            save_png(ImageBuffer(lite), tmp_path / fp)
            m.add(ManifestRecord(path=rp, label="real", split=split))
            m.add(ManifestRecord(path=fp, label="fake", split=split))
    return m


SPEC16 = BackboneSpec(family="xception", truncation=1, input_size=16)


def test_raw_patch_accuracy_counts(tmp_path):
    m = make_flat_dataset(tmp_path, n_per_class=2, splits=("test",))
    g = build_backbone(SPEC16, 3)
    acc = raw_patch_accuracy(g, m, m.records, size=16)
    assert 0.0 <= acc <= 1.0
    # force the head to always say fake: accuracy is exactly 0.5 on balanced data
    head = g.parameters()
    head["head.weight"].data[:] = 0
    head["head.bias"].data[:] = np.array([-5.0, 5.0], dtype=np.float32)
    assert raw_patch_accuracy(g, m, m.records, size=16) == pytest.approx(0.5)


def test_train_zero_epochs_keeps_init(tmp_path):
    m = make_flat_dataset(tmp_path, n_per_class=4)
    g = build_backbone(SPEC16, 1)
    before = {k: v.data.copy() for k, v in g.parameters().items()}
    g, hist = train(g, SPEC16, m, m.filter("train"), m.filter("val"),
                    TrainConfig(batch_size=4, max_epochs=0, seed=0))
    assert hist == []
    after = g.parameters()
    assert all(np.array_equal(before[k], after[k].data) for k in before)


def test_train_separates_brightness_and_returns_best(tmp_path):
    m = make_flat_dataset(tmp_path, n_per_class=8)
    g = build_backbone(SPEC16, 2)
    cfg = TrainConfig(batch_size=4, max_epochs=6, seed=1)
    g, hist = train(g, SPEC16, m, m.filter("train"), m.filter("val"), cfg)
    res = evaluate(g, m, m.filter("test"), size=16)
    assert res.ap == pytest.approx(1.0)
    assert res.image_acc == 1.0
    best = max(h["val_patch_acc"] for h in hist)
    assert raw_patch_accuracy(g, m, m.filter("val"), size=16) == pytest.approx(best)


def test_train_histories_bitwise_identical(tmp_path):
    m = make_flat_dataset(tmp_path, n_per_class=4)
    runs = []
    for _ in range(2):
        g = build_backbone(SPEC16, 5)
        _, hist = train(g, SPEC16, m, m.filter("train"), m.filter("val"),
                        TrainConfig(batch_size=4, max_epochs=2, seed=9))
        runs.append(hist)
    assert runs[0] == runs[1]


def test_train_empty_manifest_raises(tmp_path):
    m = make_flat_dataset(tmp_path, n_per_class=2)
    g = build_backbone(SPEC16, 1)
    with pytest.raises(DataError):
        train(g, SPEC16, m, [], m.filter("val"), TrainConfig())


def test_patience_schemes():
    assert TrainConfig().patience(BackboneSpec(family="xception", truncation=1)) == 250
    assert TrainConfig().patience(BackboneSpec(family="xception", truncation=2)) == 100
    assert TrainConfig().patience(BackboneSpec(family="xception", truncation=4)) == 50
    assert TrainConfig(patience_epochs_per_p=10).patience(
        BackboneSpec(family="xception", truncation=2)) == 200
    assert TrainConfig(patience_multiplier=3).patience(
        BackboneSpec(family="xception", truncation=1)) == 15


def test_batch_patch_loss_matches_grid_average():
    # batchnorm-free graph so train and eval forwards coincide
    from patchlab.layers import ComputeGraph, Conv2d, Conv2dSpec
    rng = np.random.default_rng(7)
    g = ComputeGraph(3)
    g.add("c", Conv2d(Conv2dSpec(3, 1, 1, 3, 2, bias=True), rng))
    x = rng.standard_normal((4, 3, 6, 6)).astype(np.float32)
    labels = np.array([0, 1, 1, 0])
    loss = batch_patch_loss(g, x, labels).item()
    per_image = [patch_loss_value(grid, int(t))
                 for grid, t in zip(patch_grids(g, x), labels)]
    assert loss == pytest.approx(np.mean(per_image), rel=1e-5)


def test_checkpoint_roundtrip(tmp_path):
    m = make_flat_dataset(tmp_path, n_per_class=2, splits=("test",))
    g = build_backbone(SPEC16, 4)
    path = save_model(tmp_path / "model.npz", SPEC16, g, {"seed": 4, "note": "t"})
    spec2, g2, meta = load_model(path)
    assert spec2 == SPEC16
    assert meta["seed"] == 4
    a = evaluate(g, m, m.filter("test"), size=16).per_image
    b = evaluate(g2, m, m.filter("test"), size=16).per_image
    assert a == b
