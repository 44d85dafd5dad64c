"""Heatmaps, cluster assignment, and latent-shift exaggeration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlab import tensor as T
from patchlab.analysis import (Heatmap, assign_cluster, average_heatmap, cell_pixel_box,
                               cluster_histogram, exaggerate, heatmap, normalize_grid,
                               sample_latents, top_patch)
from patchlab.backbones import BackboneSpec, build_backbone, receptive_field
from patchlab.classifier import PatchGrid
from patchlab.errors import DataError
from patchlab.images import ImageBuffer, save_label_png, save_png
from patchlab.manifest import Manifest, ManifestRecord
from patchlab.tensor import Tensor

SPEC16 = BackboneSpec(family="xception", truncation=1, input_size=16)


def test_normalize_constant_grid_is_half():
    norm, lo, hi = normalize_grid(np.full((3, 3), 0.7))
    assert np.all(norm == 0.5)
    assert lo == hi == pytest.approx(0.7)


def test_normalize_minmax():
    norm, lo, hi = normalize_grid(np.array([[0.2, 0.8]]))
    assert np.allclose(norm, [[0.0, 1.0]])
    assert (lo, hi) == (pytest.approx(0.2), pytest.approx(0.8))


def test_normalize_idempotent_and_order_preserving():
    rng = np.random.default_rng(0)
    grid = rng.random((4, 5))
    once, _, _ = normalize_grid(grid)
    twice, _, _ = normalize_grid(once)
    assert np.allclose(once, twice, atol=1e-7)
    assert np.array_equal(np.argsort(grid, axis=None), np.argsort(once, axis=None))


def test_heatmap_constant_logits_model():
    g = build_backbone(SPEC16, 0)
    params = g.parameters()
    for name in ("head.weight", "head.bias"):
        params[name].data[:] = 0
    img = np.random.default_rng(1).standard_normal((3, 16, 16)).astype(np.float32)
    hm = heatmap(g, SPEC16, img)
    assert np.all(hm.normalized == 0.5)
    assert hm.geometry.rf == 19


def test_average_heatmap_k1_and_identical_pair(tmp_path):
    rng = np.random.default_rng(2)
    img = ImageBuffer(rng.random((16, 16, 3)).astype(np.float32))
    m = Manifest(base_dir=tmp_path)
    for i in range(2):
        save_png(img, tmp_path / f"f{i}.png")
        m.add(ManifestRecord(path=f"f{i}.png", label="fake", split="test"))
    g = build_backbone(SPEC16, 3)
    # bias the head so everything is called fake (correct for these records)
    g.parameters()["head.bias"].data[:] = np.array([-2.0, 2.0], dtype=np.float32)
    one = average_heatmap(g, SPEC16, m, k=1)
    two = average_heatmap(g, SPEC16, m, k=2)
    assert np.allclose(one.raw, two.raw, atol=1e-7)
    reloaded = m.load_image(m.records[0]).arr  # PNG round trip quantizes to 8-bit
    single = heatmap(g, SPEC16, (reloaded.transpose(2, 0, 1) * 2 - 1).astype(np.float32))
    assert np.allclose(one.raw, single.raw, atol=1e-6)


def test_average_heatmap_shortfall_recorded(tmp_path):
    rng = np.random.default_rng(3)
    m = Manifest(base_dir=tmp_path)
    save_png(ImageBuffer(rng.random((16, 16, 3)).astype(np.float32)), tmp_path / "f.png")
    m.add(ManifestRecord(path="f.png", label="fake", split="test"))
    g = build_backbone(SPEC16, 3)
    g.parameters()["head.bias"].data[:] = np.array([-2.0, 2.0], dtype=np.float32)
    hm = average_heatmap(g, SPEC16, m, k=100)
    assert hm.shortfall == 99


def test_top_patch_tie_breaks_row_major():
    probs = np.array([[0.1, 0.9, 0.9], [0.9, 0.1, 0.1]])
    flat = int(np.argmax(probs))
    assert divmod(flat, 3) == (0, 1)  # documents numpy's row-major first rule


def test_top_patch_single_cell(tmp_path):
    spec = BackboneSpec(family="xception", truncation=1, input_size=16)
    g = build_backbone(spec, 4)
    img = np.random.default_rng(5).standard_normal((3, 16, 16)).astype(np.float32)
    (i, j), box, conf = top_patch(g, spec, img)
    h, w = heatmap(g, spec, img).raw.shape
    assert 0 <= i < h and 0 <= j < w
    assert 0.0 <= conf <= 1.0
    top, left, bottom, right = box
    assert 0 <= top <= bottom <= 15 and 0 <= left <= right <= 15


def test_assign_cluster_normalized_rule():
    # 30 px of class A (100 image-wide) vs 70 px of class B (1000 image-wide)
    # inside a 10x10 box: A wins because 0.30 > 0.07.
    seg = np.zeros((40, 40), dtype=np.uint8)
    in_box = [(r, c) for r in range(10) for c in range(10)]
    out_box = [(r, c) for r in range(40) for c in range(40) if not (r < 10 and c < 10)]
    for r, c in in_box[:30]:
        seg[r, c] = 1
    for r, c in in_box[30:]:
        seg[r, c] = 2
    for r, c in out_box[:70]:
        seg[r, c] = 1
    for r, c in out_box[70:70 + 930]:
        seg[r, c] = 2
    assert int((seg == 1).sum()) == 100
    assert int((seg == 2).sum()) == 1000
    assert assign_cluster((0, 0, 9, 9), seg) == 1


def test_assign_cluster_box_inside_one_class():
    seg = np.zeros((20, 20), dtype=np.uint8)
    seg[5:15, 5:15] = 4
    assert assign_cluster((6, 6, 9, 9), seg) == 4


def test_assign_cluster_tie_lowest_id():
    seg = np.zeros((4, 4), dtype=np.uint8)
    seg[0, 0] = 1
    seg[0, 1] = 2
    seg[1, 0] = 1
    seg[1, 1] = 2
    # box covering one pixel of each: both score 1/2 within their totals
    assert assign_cluster((0, 0, 0, 1), seg) in (1, 2)
    seg2 = np.array([[1, 2], [1, 2]], dtype=np.uint8)
    assert assign_cluster((0, 0, 1, 1), seg2) == 1  # both 2/2: tie -> lower id


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=4))
def test_assign_cluster_scale_invariant(k):
    rng = np.random.default_rng(11)
    seg = rng.integers(0, 4, size=(12, 12)).astype(np.uint8)
    box = (2, 3, 7, 9)
    big_seg = np.kron(seg, np.ones((k, k), dtype=np.uint8))
    big_box = (box[0] * k, box[1] * k, (box[2] + 1) * k - 1, (box[3] + 1) * k - 1)
    assert assign_cluster(box, seg) == assign_cluster(big_box, big_seg)


def test_assign_cluster_empty_box_errors():
    with pytest.raises(DataError):
        assign_cluster((5, 5, 4, 9), np.zeros((10, 10), dtype=np.uint8))


def test_cluster_histogram_counts_sum(tmp_path):
    rng = np.random.default_rng(6)
    m = Manifest(base_dir=tmp_path)
    for i in range(3):
        img = ImageBuffer(rng.random((16, 16, 3)).astype(np.float32))
        seg = rng.integers(0, 3, size=(16, 16)).astype(np.uint8)
        save_png(img, tmp_path / f"f{i}.png")
        save_label_png(seg, tmp_path / f"s{i}.png")
        m.add(ManifestRecord(path=f"f{i}.png", label="fake", split="test",
                             segmentation=f"s{i}.png"))
    g = build_backbone(SPEC16, 7)
    hist = cluster_histogram(g, SPEC16, m, mode="top")
    assert sum(hist.counts.values()) == hist.total == 3
    hist_r = cluster_histogram(g, SPEC16, m, mode="random", rng=np.random.default_rng(0))
    assert sum(hist_r.counts.values()) == 3


def test_cluster_histogram_requires_segmentation(tmp_path):
    m = Manifest(base_dir=tmp_path)
    save_png(ImageBuffer(np.zeros((16, 16, 3), dtype=np.float32)), tmp_path / "x.png")
    m.add(ManifestRecord(path="x.png", label="fake", split="test"))
    g = build_backbone(SPEC16, 8)
    with pytest.raises(DataError):
        cluster_histogram(g, SPEC16, m, mode="top")


def test_box_center_roundtrip_all_cells():
    for trunc, size in ((1, 48), (2, 64)):
        spec = BackboneSpec(family="xception", truncation=trunc, input_size=size)
        info = receptive_field(spec.layer_list())
        from patchlab.backbones import backbone_grid_shape
        h, w = backbone_grid_shape(spec)
        for i in range(h):
            for j in range(w):
                cy = info.start + i * info.jump
                cx = info.start + j * info.jump
                assert round((cy - info.start) / info.jump) == i
                top, left, bottom, right = cell_pixel_box(info, size, i, j)
                assert top <= cy <= bottom
                assert left <= cx <= right


# -- exaggeration ----------------------------------------------------------------


def test_antithetic_latents_have_zero_mean():
    z = sample_latents(np.random.default_rng(0), 64, 16)
    # exact cancellation once accumulation noise is out of the picture
    assert np.all(z.astype(np.float64).mean(axis=0) == 0.0)
    assert z.shape == (64, 16)


def quadratic_parts():
    def gen(z):
        return z

    def fake_loss(x):
        d = x - 1.0
        return (d * d).mean()

    def perceptual(ref, shifted):
        d = T.sub(shifted, ref.detach())
        return (d * d).mean()

    return gen, fake_loss, perceptual


def test_exaggerate_quadratic_recovers_minus_half():
    gen, fake_loss, perceptual = quadratic_parts()
    shift = exaggerate(gen, fake_loss, perceptual, latent_dim=1, lam=1.0,
                       steps=600, lr=0.01, batch=64, rng=np.random.default_rng(3))
    assert abs(shift.w[0] - (-0.5)) < 1e-3


def test_exaggerate_zero_steps_returns_zero_shift():
    gen, fake_loss, perceptual = quadratic_parts()
    shift = exaggerate(gen, fake_loss, perceptual, latent_dim=4, steps=0)
    assert np.array_equal(shift.w, np.zeros(4))


def test_exaggerate_huge_lambda_pins_shift_at_zero():
    gen, fake_loss, perceptual = quadratic_parts()
    shift = exaggerate(gen, fake_loss, perceptual, latent_dim=1, lam=1e6,
                       steps=300, lr=0.01, rng=np.random.default_rng(4))
    assert abs(shift.w[0]) < 1e-3


def test_exaggerate_objective_nonincreasing_on_quadratic():
    gen, fake_loss, perceptual = quadratic_parts()
    shift = exaggerate(gen, fake_loss, perceptual, latent_dim=1, lam=1.0,
                       steps=120, lr=0.01, rng=np.random.default_rng(5))
    # compare a smoothed early/late objective: accepted iterates trend down
    first = np.mean(shift.trace[:10])
    last = np.mean(shift.trace[-10:])
    assert last <= first
