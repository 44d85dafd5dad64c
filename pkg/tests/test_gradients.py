"""Finite-difference gradient verification for every spatial primitive.

Randomized instances use tensors with 2-8 sized dims. Inputs for kinked
primitives (relu, maxpool, abs) are kept away from kink neighborhoods:
maxpool inputs get distinct per-element offsets so window maxima are
unambiguous, relu inputs are pushed away from zero.
"""

import numpy as np
import pytest

from patchlab import nnops
from patchlab import tensor as T
from patchlab.gradcheck import grad_check
from patchlab.layers import (BatchNorm2d, BatchNorm2dSpec, ComputeGraph, Conv2d, Conv2dSpec,
                             Dense, GlobalMean, MaxPool2d, MaxPool2dSpec, PointwiseConv,
                             PointwiseConvSpec, ReLU, ResidualAdd, SeparableConv2d,
                             SeparableConv2dSpec, Sigmoid, Upsample2x)
from patchlab.tensor import Tensor

DIMS = (2, 3, 4, 5, 6, 7, 8)


def rand_shape(rng, n):
    return tuple(int(rng.choice(DIMS)) for _ in range(n))


def separated_values(rng, shape):
    """Random values with pairwise gaps >> the finite-difference step."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) / n) * 2 - 1 + rng.uniform(-0.2, 0.2)
    return vals.reshape(shape)


def graph_for(builder, rng, dtype=np.float64):
    g, x = builder(rng, dtype)
    return g, x


def build_conv(rng, dtype):
    cin, cout = int(rng.choice((1, 2, 3))), int(rng.choice((1, 2, 3)))
    k = int(rng.choice((1, 2, 3)))
    s = int(rng.choice((1, 2)))
    pad = int(rng.choice((0, 1)))
    size = int(rng.choice((4, 5, 6)))
    g = ComputeGraph(cin, dtype=dtype)
    g.add("conv", Conv2d(Conv2dSpec(k, s, pad, cin, cout, bias=True), rng, dtype))
    return g, rng.standard_normal((2, cin, size, size))


def build_separable(rng, dtype):
    cin, cout = int(rng.choice((1, 2, 3))), int(rng.choice((1, 2, 3)))
    g = ComputeGraph(cin, dtype=dtype)
    g.add("sep", SeparableConv2d(SeparableConv2dSpec(3, int(rng.choice((1, 2))), 1, cin, cout), rng, dtype))
    return g, rng.standard_normal((2, cin, 5, 5))


def build_pointwise(rng, dtype):
    cin, cout = int(rng.choice((2, 4))), int(rng.choice((2, 3)))
    g = ComputeGraph(cin, dtype=dtype)
    g.add("pw", PointwiseConv(PointwiseConvSpec(cin, cout), rng, dtype))
    return g, rng.standard_normal((2, cin, 3, 3))


def build_maxpool(rng, dtype):
    c = int(rng.choice((1, 2)))
    g = ComputeGraph(c, dtype=dtype)
    g.add("pool", MaxPool2d(MaxPool2dSpec(int(rng.choice((2, 3))), int(rng.choice((1, 2))), 1)))
    return g, separated_values(rng, (2, c, 5, 5))


def build_batchnorm(rng, dtype):
    c = int(rng.choice((2, 3)))
    g = ComputeGraph(c, dtype=dtype)
    bn = BatchNorm2d(BatchNorm2dSpec(c), dtype)
    bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(dtype)
    bn.beta.data = rng.uniform(-0.5, 0.5, c).astype(dtype)
    g.add("bn", bn)
    return g, rng.standard_normal((3, c, 4, 4))


def build_relu_chain(rng, dtype):
    c = 2
    g = ComputeGraph(c, dtype=dtype)
    g.add("pw", PointwiseConv(PointwiseConvSpec(c, c), rng, dtype))
    g.add("relu", ReLU())
    x = rng.standard_normal((2, c, 3, 3))
    return g, np.sign(x) * (np.abs(x) + 0.3)  # keep preactivations off the kink


def build_residual(rng, dtype):
    c = 2
    g = ComputeGraph(c, dtype=dtype)
    g.add("a", PointwiseConv(PointwiseConvSpec(c, c), rng, dtype), ("input",))
    g.add("b", Conv2d(Conv2dSpec(3, 1, 1, c, c, bias=False), rng, dtype), ("input",))
    g.add("add", ResidualAdd(), ("a", "b"))
    return g, rng.standard_normal((2, c, 4, 4))


def build_upsample(rng, dtype):
    c = 2
    g = ComputeGraph(c, dtype=dtype)
    g.add("up", Upsample2x())
    g.add("pw", PointwiseConv(PointwiseConvSpec(c, 2), rng, dtype))
    return g, rng.standard_normal((2, c, 3, 3))


def build_sigmoid_head(rng, dtype):
    c = 2
    g = ComputeGraph(c, dtype=dtype)
    g.add("pw", PointwiseConv(PointwiseConvSpec(c, 1), rng, dtype))
    g.add("sig", Sigmoid())
    g.add("mean", GlobalMean())
    return g, rng.standard_normal((2, c, 3, 3))


BUILDERS = {
    "conv2d": build_conv,
    "separable_conv2d": build_separable,
    "pointwise_conv": build_pointwise,
    "maxpool2d": build_maxpool,
    "batchnorm2d": build_batchnorm,
    "relu": build_relu_chain,
    "residual_add": build_residual,
    "upsample2x": build_upsample,
    "sigmoid": build_sigmoid_head,
}


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_primitive_gradients_f64(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(10):
        g, x = BUILDERS[name](rng, np.float64)
        res = grad_check(g, x, train=True, projection_seed=trial)
        assert res.passed, f"{name} trial {trial}: {res}"


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_primitive_gradients_f32(name):
    rng = np.random.default_rng(hash(name) % 2**32 + 1)
    for trial in range(5):
        g, x = BUILDERS[name](rng, np.float32)
        res = grad_check(g, x, train=True, projection_seed=trial)
        assert res.passed, f"{name} trial {trial}: {res}"


def test_linear_layer_exact_under_f64():
    rng = np.random.default_rng(0)
    g = ComputeGraph(3, dtype=np.float64)
    g.add("pw", PointwiseConv(PointwiseConvSpec(3, 2), rng, np.float64))
    res = grad_check(g, rng.standard_normal((1, 3, 2, 2)))
    assert res.max_rel_error < 1e-6


def test_conv_example_against_finite_difference_f32():
    # the spec's 1x1x4x4 random conv instance at 32-bit / 1e-3
    rng = np.random.default_rng(42)
    g = ComputeGraph(1, dtype=np.float32)
    g.add("conv", Conv2d(Conv2dSpec(3, 1, 1, 1, 1, bias=True), rng, np.float32))
    res = grad_check(g, rng.standard_normal((1, 1, 4, 4)), h=1e-3, tolerance=1e-3)
    assert res.passed, res


def test_conv_output_size_formula():
    rng = np.random.default_rng(1)
    for k in (1, 2, 3, 5):
        for s in (1, 2, 3):
            for pad in (0, 1, 2):
                for size in (7, 8, 11):
                    if size + 2 * pad < k:
                        continue
                    g = ComputeGraph(1)
                    g.add("c", Conv2d(Conv2dSpec(k, s, pad, 1, 1), rng))
                    out = g.forward(np.zeros((1, 1, size, size), dtype=np.float32))
                    expect = (size + 2 * pad - k) // s + 1
                    assert out.shape[2:] == (expect, expect)


def test_dense_gradcheck():
    rng = np.random.default_rng(3)
    g = ComputeGraph(4, dtype=np.float64, input_kind="vector")
    g.add("fc", Dense(4, 3, rng, np.float64))
    res = grad_check(g, rng.standard_normal((2, 4)))
    assert res.passed, res


def test_loss_primitives_gradcheck():
    # softmax -> gather -> clamp -> log -> mean, as used by the patch loss
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((3, 2, 2, 2)), dtype=np.float64, requires_grad=True)
    labels = np.array([0, 1, 0])

    def loss_of(arr):
        t = Tensor(arr, dtype=np.float64)
        probs = T.softmax(t, axis=1)
        return -(T.log(T.clamp_min(T.gather_class(probs, labels), 1e-12)).mean())

    loss = -(T.log(T.clamp_min(T.gather_class(T.softmax(logits, axis=1), labels), 1e-12)).mean())
    loss.backward()
    h = 1e-6
    num = np.zeros_like(logits.data)
    flat, nflat = logits.data.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_of(logits.data).item()
        flat[i] = orig - h
        down = loss_of(logits.data).item()
        flat[i] = orig
        nflat[i] = (up - down) / (2 * h)
    assert np.max(np.abs(num - logits.grad)) < 1e-6
