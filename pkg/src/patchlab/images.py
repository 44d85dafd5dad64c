"""Image buffers, resampling, codec-artifact simulation, and augmentation.

Pixels live in [0, 1] as float32 while in memory and are quantized to 8-bit
PNG on disk. Every transform clamps back into [0, 1] before returning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeMismatch

LANCZOS_A = 3

# Standard 8x8 luminance quantization table (quality 50). Scaled by /128 at
# use time: in the [0,1] pixel domain that makes strength 1.0 an aggressive
# codec, which desk-scale corpora need for the artifacts to dominate the
# texture noise.
QUANT_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass
class ImageBuffer:
    """(H, W, C) float image, C in {1, 3}, values clamped to [0, 1]."""

    arr: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeMismatch(f"image must be (H, W, 1|3), got {arr.shape}")
        self.arr = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.arr.shape[0]

    @property
    def width(self) -> int:
        return self.arr.shape[1]

    @property
    def channels(self) -> int:
        return self.arr.shape[2]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.arr.copy())


def save_png(img: ImageBuffer, path) -> None:
    data = np.clip(np.rint(img.arr * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        pil = Image.fromarray(data[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(data, mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def load_png(path) -> ImageBuffer:
    with Image.open(path) as pil:
        pil = pil.convert("RGB" if pil.mode not in ("L", "I;16") else "L")
        data = np.asarray(pil, dtype=np.float32) / 255.0
    return ImageBuffer(data)


def save_label_png(labels: np.ndarray, path) -> None:
    """Save an (H, W) uint8 label/mask image (mask: 0/255, segmentation: ids)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_label_png(path) -> np.ndarray:
    with Image.open(path) as pil:
        return np.asarray(pil.convert("L"), dtype=np.uint8)


# -- resampling --------------------------------------------------------------


def _lanczos_kernel(t: np.ndarray) -> np.ndarray:
    out = np.sinc(t) * np.sinc(t / LANCZOS_A)
    return np.where(np.abs(t) < LANCZOS_A, out, 0.0)


def lanczos_weights(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) resampling matrix; every row sums to 1.

    Downsampling scales the kernel support by the scale factor; source taps
    outside the image are clipped to the edge (their weight accumulates on
    the edge pixel)."""
    return _resample_weights(in_size, out_size, _lanczos_kernel, LANCZOS_A)


def _triangle_kernel(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


def bilinear_weights(in_size: int, out_size: int) -> np.ndarray:
    return _resample_weights(in_size, out_size, _triangle_kernel, 1)


def _resample_weights(in_size: int, out_size: int, kernel, radius: int) -> np.ndarray:
    scale = in_size / out_size
    support = max(1.0, scale)
    w = np.zeros((out_size, in_size), dtype=np.float64)
    for o in range(out_size):
        center = (o + 0.5) * scale - 0.5
        lo = math.ceil(center - radius * support)
        hi = math.floor(center + radius * support)
        taps = np.arange(lo, hi + 1)
        vals = kernel((taps - center) / support)
        cols = np.clip(taps, 0, in_size - 1)
        np.add.at(w[o], cols, vals)
        w[o] /= w[o].sum()
    return w


def resize(img: ImageBuffer, out_w: int, out_h: int, method: str = "lanczos") -> ImageBuffer:
    if out_w < 1 or out_h < 1:
        raise ConfigError("resize target must be >= 1")
    if method == "lanczos":
        wfn = lanczos_weights
    elif method == "bilinear":
        wfn = bilinear_weights
    elif method == "nearest":
        ys = np.minimum((np.arange(out_h) + 0.5) * img.height / out_h, img.height - 1).astype(int)
        xs = np.minimum((np.arange(out_w) + 0.5) * img.width / out_w, img.width - 1).astype(int)
        return ImageBuffer(img.arr[ys][:, xs])
    else:
        raise ConfigError(f"unknown resize method {method!r}")
    wh = wfn(img.height, out_h).astype(np.float32)
    ww = wfn(img.width, out_w).astype(np.float32)
    out = np.einsum("oi,iwc->owc", wh, img.arr, optimize=True)
    out = np.einsum("oj,hjc->hoc", ww, out, optimize=True)
    return ImageBuffer(out)


def lanczos_resize(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    """Separable Lanczos-3 resampling with per-pixel weight normalization."""
    return resize(img, out_w, out_h, method="lanczos")


def center_crop(img: ImageBuffer, size: int) -> ImageBuffer:
    if size > img.height or size > img.width:
        raise ConfigError(f"center_crop {size} exceeds image {img.height}x{img.width}")
    top = (img.height - size) // 2
    left = (img.width - size) // 2
    return ImageBuffer(img.arr[top:top + size, left:left + size])


# -- codec-artifact simulation ------------------------------------------------


def _dct_matrix() -> np.ndarray:
    i = np.arange(8)
    d = np.cos((2 * i[None, :] + 1) * i[:, None] * np.pi / 16)
    d *= np.sqrt(2.0 / 8.0)
    d[0] *= 1.0 / np.sqrt(2.0)
    return d


_DCT = _dct_matrix()


def codec_confound(img: ImageBuffer, strength: float) -> ImageBuffer:
    """Deterministic lossy-codec artifact simulator.

    8x8 block DCT per channel, coefficient quantization with a
    strength-scaled table, inverse DCT, clamp. strength 0 is the identity;
    at fixed strength the operation is a projection (idempotent up to
    clamping at saturated pixels)."""
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"codec strength must be in [0, 1], got {strength}")
    if strength == 0.0:
        return img.copy()
    h, w, c = img.arr.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img.arr.astype(np.float64) - 0.5, ((0, ph), (0, pw), (0, 0)), mode="edge")
    bh, bw = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(bh, 8, bw, 8, c).transpose(0, 2, 4, 1, 3)   # bh, bw, c, 8, 8
    coef = np.einsum("ui,abcij,vj->abcuv", _DCT, blocks, _DCT, optimize=True)
    step = strength * QUANT_TABLE / 128.0
    coef = np.rint(coef / step) * step
    rec = np.einsum("ui,abcuv,vj->abcij", _DCT, coef, _DCT, optimize=True)
    out = rec.transpose(0, 3, 1, 4, 2).reshape(bh * 8, bw * 8, c)[:h, :w] + 0.5
    return ImageBuffer(out.astype(np.float32))


# -- augmentation and equalization --------------------------------------------

AUGMENT_MODES = ("none", "random_crop", "random_resized_crop")

# Pre-crop oversize ratio for random cropping (333/299 of native size).
CROP_RATIO = 333.0 / 299.0


def augment(img: ImageBuffer, mode: str, rng: np.random.Generator,
            native_size: int) -> ImageBuffer:
    if mode == "none":
        return img
    if mode == "random_crop":
        big = int(round(native_size * CROP_RATIO))
        resized = resize(img, big, big, "lanczos")
        top = int(rng.integers(0, big - native_size + 1))
        left = int(rng.integers(0, big - native_size + 1))
        return ImageBuffer(resized.arr[top:top + native_size, left:left + native_size])
    if mode == "random_resized_crop":
        scale = float(rng.uniform(0.8, 1.0))
        crop = max(1, int(round(scale * min(img.height, img.width))))
        top = int(rng.integers(0, img.height - crop + 1))
        left = int(rng.integers(0, img.width - crop + 1))
        cropped = ImageBuffer(img.arr[top:top + crop, left:left + crop])
        return resize(cropped, native_size, native_size, "lanczos")
    raise ConfigError(f"unknown augmentation mode {mode!r}")


def equalize(img: ImageBuffer, transform_chain) -> tuple[ImageBuffer, list[dict]]:
    """Run an image through a declared transform chain, returning the result
    and an audit log with one entry per executed step.

    Steps: ("center_crop", size) | ("resize", size, method) | ("normalize",).
    """
    audit: list[dict] = []
    out = img
    for step in transform_chain:
        name = step[0]
        if name == "center_crop":
            out = center_crop(out, int(step[1]))
            audit.append({"op": "center_crop", "size": int(step[1])})
        elif name == "resize":
            size, method = int(step[1]), (step[2] if len(step) > 2 else "lanczos")
            out = resize(out, size, size, method)
            audit.append({"op": "resize", "size": size, "method": method})
        elif name == "normalize":
            lo, hi = float(out.arr.min()), float(out.arr.max())
            if hi > lo:
                out = ImageBuffer((out.arr - lo) / (hi - lo))
            audit.append({"op": "normalize", "min": lo, "max": hi})
        else:
            raise ConfigError(f"unknown transform {name!r}")
    return out, audit
