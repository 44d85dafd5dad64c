"""Resampling, codec simulation, augmentation, and the equalize chain."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlab.errors import ConfigError
from patchlab.images import (ImageBuffer, LANCZOS_A, QUANT_TABLE, augment, center_crop,
                             codec_confound, equalize, lanczos_resize, lanczos_weights,
                             load_png, resize, save_png)


def lanczos_kernel_oracle(t: float) -> float:
    """Analytic L(t) = sinc(t) sinc(t/3) for |t| < 3, written from scratch."""
    if abs(t) >= LANCZOS_A:
        return 0.0
    if t == 0.0:
        return 1.0
    pt = math.pi * t
    return (math.sin(pt) / pt) * (math.sin(pt / LANCZOS_A) / (pt / LANCZOS_A))


def test_identity_resize_is_exact():
    rng = np.random.default_rng(0)
    img = ImageBuffer(rng.random((17, 13, 3), dtype=np.float64).astype(np.float32))
    out = lanczos_resize(img, 13, 17)
    assert np.allclose(out.arr, img.arr, atol=1e-6)


def test_constant_image_stays_constant():
    img = ImageBuffer(np.full((10, 10, 1), 0.42, dtype=np.float32))
    for w, h in ((5, 5), (20, 20), (7, 13)):
        out = lanczos_resize(img, w, h)
        assert np.allclose(out.arr, 0.42, atol=1e-6)


def test_impulse_downsample_matches_analytic_taps():
    # 9-tall, 1-wide impulse at the center row, downsampled 3x vertically.
    img = np.zeros((9, 1, 1), dtype=np.float32)
    img[4, 0, 0] = 1.0
    out = lanczos_resize(ImageBuffer(img), 1, 3).arr[:, 0, 0]

    scale = 3.0
    expect = []
    for o in range(3):
        center = (o + 0.5) * scale - 0.5
        lo = math.ceil(center - LANCZOS_A * scale)
        hi = math.floor(center + LANCZOS_A * scale)
        weights = [lanczos_kernel_oracle((i - center) / scale) for i in range(lo, hi + 1)]
        total = sum(weights)
        expect.append(lanczos_kernel_oracle((4 - center) / scale) / total)
    assert np.allclose(out, expect, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=40), st.integers(min_value=1, max_value=40))
def test_weight_rows_sum_to_one(in_size, out_size):
    w = lanczos_weights(in_size, out_size)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_unknown_method_rejected():
    with pytest.raises(ConfigError):
        resize(ImageBuffer(np.zeros((4, 4, 1))), 2, 2, method="bicubic")


# -- codec simulator -----------------------------------------------------------


def _texture_like(rng, size=16):
    base = rng.random((size, size, 3)).astype(np.float32)
    # cheap low-pass: average neighbours a few times, keep well inside [0,1]
    for _ in range(3):
        base = (base + np.roll(base, 1, 0) + np.roll(base, 1, 1)) / 3
    return ImageBuffer(0.25 + 0.5 * base)


def test_codec_strength_zero_is_identity():
    img = _texture_like(np.random.default_rng(1))
    out = codec_confound(img, 0.0)
    assert np.allclose(out.arr, img.arr, atol=1e-6)


def test_codec_constant_image_unchanged():
    img = ImageBuffer(np.full((16, 16, 3), 0.5, dtype=np.float32))
    out = codec_confound(img, 1.0)
    assert np.allclose(out.arr, img.arr, atol=1e-6)


def test_codec_idempotent_at_fixed_strength():
    img = _texture_like(np.random.default_rng(2), size=24)
    once = codec_confound(img, 0.7)
    twice = codec_confound(once, 0.7)
    assert np.allclose(twice.arr, once.arr, atol=1e-6)


def dct2_oracle(block: np.ndarray) -> np.ndarray:
    """Direct O(n^4) orthonormal 2-D DCT-II, loops and cosines only."""
    out = np.zeros((8, 8))
    for u in range(8):
        for v in range(8):
            acc = 0.0
            for i in range(8):
                for j in range(8):
                    acc += block[i, j] * math.cos((2 * i + 1) * u * math.pi / 16) \
                        * math.cos((2 * j + 1) * v * math.pi / 16)
            cu = math.sqrt(1 / 8) if u == 0 else math.sqrt(2 / 8)
            cv = math.sqrt(1 / 8) if v == 0 else math.sqrt(2 / 8)
            out[u, v] = cu * cv * acc
    return out


def idct2_oracle(coef: np.ndarray) -> np.ndarray:
    out = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            acc = 0.0
            for u in range(8):
                for v in range(8):
                    cu = math.sqrt(1 / 8) if u == 0 else math.sqrt(2 / 8)
                    cv = math.sqrt(1 / 8) if v == 0 else math.sqrt(2 / 8)
                    acc += cu * cv * coef[u, v] * math.cos((2 * i + 1) * u * math.pi / 16) \
                        * math.cos((2 * j + 1) * v * math.pi / 16)
            out[i, j] = acc
    return out


def test_codec_matches_per_block_oracle():
    rng = np.random.default_rng(3)
    img = ImageBuffer(0.2 + 0.6 * rng.random((16, 8, 1)).astype(np.float32))
    strength = 1.0
    got = codec_confound(img, strength)

    step = strength * QUANT_TABLE / 128.0
    expect = np.empty_like(img.arr[:, :, 0], dtype=np.float64)
    for by in range(2):
        block = img.arr[by * 8:(by + 1) * 8, :, 0].astype(np.float64) - 0.5
        coef = dct2_oracle(block)
        coef = np.rint(coef / step) * step
        expect[by * 8:(by + 1) * 8, :] = idct2_oracle(coef) + 0.5
    assert np.allclose(got.arr[:, :, 0], np.clip(expect, 0, 1), atol=1e-5)


def test_codec_strength_out_of_range():
    with pytest.raises(ConfigError):
        codec_confound(ImageBuffer(np.zeros((8, 8, 1))), 1.5)


# -- augmentation / equalize -----------------------------------------------------


def test_augment_none_is_identity():
    img = _texture_like(np.random.default_rng(4))
    out = augment(img, "none", np.random.default_rng(0), 16)
    assert out is img


def test_random_crop_outputs_native_size():
    img = _texture_like(np.random.default_rng(5), size=64)
    out = augment(img, "random_crop", np.random.default_rng(1), 48)
    assert (out.height, out.width) == (48, 48)


def test_random_resized_crop_outputs_native_size():
    img = _texture_like(np.random.default_rng(6), size=64)
    out = augment(img, "random_resized_crop", np.random.default_rng(2), 32)
    assert (out.height, out.width) == (32, 32)


def test_fixed_seed_gives_identical_crops():
    img = _texture_like(np.random.default_rng(7), size=64)
    a = augment(img, "random_crop", np.random.default_rng(9), 48)
    b = augment(img, "random_crop", np.random.default_rng(9), 48)
    assert np.array_equal(a.arr, b.arr)


def test_equalize_empty_chain():
    img = _texture_like(np.random.default_rng(8))
    out, audit = equalize(img, [])
    assert np.array_equal(out.arr, img.arr)
    assert audit == []


def test_equalize_crop_then_resize_composes():
    img = _texture_like(np.random.default_rng(9), size=48)
    out, audit = equalize(img, [("center_crop", 32), ("resize", 64, "lanczos")])
    manual = resize(center_crop(img, 32), 64, 64, "lanczos")
    assert np.allclose(out.arr, manual.arr, atol=1e-7)
    assert [a["op"] for a in audit] == ["center_crop", "resize"]
    assert (out.height, out.width) == (64, 64)


def test_equalize_unknown_step():
    with pytest.raises(ConfigError):
        equalize(_texture_like(np.random.default_rng(10)), [("sharpen", 3)])


def test_png_roundtrip_8bit(tmp_path):
    img = _texture_like(np.random.default_rng(11))
    p = tmp_path / "img.png"
    save_png(img, p)
    back = load_png(p)
    assert back.arr.shape == img.arr.shape
    assert np.max(np.abs(back.arr - img.arr)) <= (1.0 / 255.0) / 2 + 1e-6


def test_png_bytes_deterministic(tmp_path):
    img = _texture_like(np.random.default_rng(12))
    p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
    save_png(img, p1)
    save_png(img, p2)
    assert p1.read_bytes() == p2.read_bytes()
