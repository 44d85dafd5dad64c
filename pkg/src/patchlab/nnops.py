"""Spatial primitives: convolutions, pooling, batch norm, upsampling.

All ops take and return NCHW tensors. conv2d is implemented as explicit
patch-matrix multiplication (im2col + one GEMM); zero padding is the only
padding mode. The input-gradient scatter walks the k*k kernel offsets with
strided slice adds, so the accumulation order is fixed and deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .tensor import Tensor, _make


def conv_out_size(in_size: int, k: int, s: int, pad: int) -> int:
    out = (in_size + 2 * pad - k) // s + 1
    if out < 1:
        raise ShapeMismatch(f"conv output collapsed: in={in_size} k={k} s={s} pad={pad}")
    return out


def _pad_nchw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _im2col(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    """Return patches as (C*k*k, N*OH*OW), C-major then kernel offsets."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :oh, :ow]            # N, C, OH, OW, k, k
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * oh * ow)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, x_shape, k: int, s: int, pad: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(c, k, k, n, oh, ow)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += dcols[:, ki, kj].transpose(1, 0, 2, 3)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW weights, zero padding."""
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, wdt = x.shape
    oc, ic, k, k2 = w.shape
    if k != k2:
        raise ShapeMismatch(f"conv2d kernel must be square, got {w.shape}")
    if ic != c:
        raise ShapeMismatch(f"conv2d input has {c} channels, weight expects {ic}")
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(wdt, k, stride, pad)

    cols = _im2col(_pad_nchw(x.data, pad), k, stride, oh, ow)
    w2 = w.data.reshape(oc, c * k * k)
    out = (w2 @ cols).reshape(oc, n, oh, ow).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, n * oh * ow)
        grads = [(x, _col2im(w2.T @ g2, x.shape, k, stride, pad, oh, ow)),
                 (w, (g2 @ cols.T).reshape(w.shape))]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel k*k convolution; weight shape (C, k, k)."""
    n, c, h, wdt = x.shape
    wc, k, k2 = w.shape
    if k != k2 or wc != c:
        raise ShapeMismatch(f"depthwise weight {w.shape} does not match {c} channels")
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(wdt, k, stride, pad)

    xp = _pad_nchw(x.data, pad)

    def slices(ki, kj):
        return xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]

    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            out += slices(ki, kj) * w.data[None, :, ki, kj, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dw[:, ki, kj] = np.einsum("nchw,nchw->c", g, slices(ki, kj))
                dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                    g * w.data[None, :, ki, kj, None, None]
        dx = dxp[:, :, pad:-pad, pad:-pad] if pad else dxp
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "depthwise_conv2d")


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """1x1 convolution; weight shape (OC, C)."""
    n, c, h, wdt = x.shape
    oc, ic = w.shape
    if ic != c:
        raise ShapeMismatch(f"pointwise input has {c} channels, weight expects {ic}")
    xr = x.data.reshape(n, c, h * wdt)
    out = np.matmul(w.data, xr).reshape(n, oc, h, wdt)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gr = g.reshape(n, oc, h * wdt)
        g2 = np.ascontiguousarray(gr.transpose(1, 0, 2)).reshape(oc, n * h * wdt)
        x2 = np.ascontiguousarray(xr.transpose(1, 0, 2)).reshape(c, n * h * wdt)
        dw = g2 @ x2.T
        dx = np.matmul(w.data.T, gr).reshape(x.shape)
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "pointwise_conv")


def maxpool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling; padding uses -inf so padded cells never win. Ties route
    the gradient to the first winning offset in row-major kernel order."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    xp = _pad_nchw(x.data, pad, value=-np.inf)

    out = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, oh, ow), dtype=np.int16)
    for idx in range(k * k):
        ki, kj = divmod(idx, k)
        cand = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
        better = cand > out
        np.copyto(out, cand, where=better)
        np.copyto(arg, np.int16(idx), where=better)

    def backward(g):
        dxp = np.zeros_like(xp)
        for idx in range(k * k):
            ki, kj = divmod(idx, k)
            sel = arg == idx
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += g * sel
        dx = dxp[:, :, pad:-pad, pad:-pad] if pad else dxp
        return [(x, dx)]

    return _make(out, (x,), backward, "maxpool2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, train: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Channelwise batch normalization.

    Training mode normalizes with biased per-batch statistics and updates
    the running buffers in place (unbiased variance, torch convention).
    Eval mode normalizes with the running buffers and treats them as
    constants in the backward pass.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm affine params must have shape ({c},)")
    m = n * h * w
    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if m > 1:
            running_var *= (1 - momentum)
            running_var += momentum * var * (m / (m - 1))
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = np.einsum("nchw,nchw->c", g, xhat)
        dbeta = g.sum(axis=(0, 2, 3))
        scale = (gamma.data * invstd)[None, :, None, None]
        if train:
            gsum = dbeta[None, :, None, None]
            gx = (dgamma)[None, :, None, None]
            dx = scale * (g - gsum / m - xhat * gx / m)
        else:
            dx = scale * g
        return [(x, dx.astype(x.dtype, copy=False)), (gamma, dgamma), (beta, dbeta)]

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Strict same-shape addition used for skip connections."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"residual_add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        return [(a, g), (b, g)]

    return _make(out, (a, b), backward, "residual_add")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        return [(x, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))]

    return _make(out, (x,), backward, "upsample2x")


def global_mean(x: Tensor) -> Tensor:
    """Spatial mean, NCHW -> NC."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return [(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=False))]

    return _make(out, (x,), backward, "global_mean")
