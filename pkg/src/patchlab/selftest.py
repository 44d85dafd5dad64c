"""Built-in health checks: gradients, receptive-field probes, metric oracles."""

from __future__ import annotations

import numpy as np

from .backbones import BackboneSpec, build_backbone, param_count, receptive_field
from .gradcheck import grad_check
from .images import ImageBuffer, lanczos_resize, lanczos_weights
from .layers import (BatchNorm2d, BatchNorm2dSpec, ComputeGraph, Conv2d, Conv2dSpec,
                     MaxPool2d, MaxPool2dSpec, PointwiseConv, PointwiseConvSpec,
                     ReLU, SeparableConv2d, SeparableConv2dSpec)
from .metrics import average_precision


def _check(name: str, ok: bool, detail: str = "") -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    return ok


def _gradient_checks(trials: int) -> bool:
    rng = np.random.default_rng(0)
    ok = True
    cases = {
        "conv2d": lambda r, d: (_conv_graph(r, d), r.standard_normal((2, 2, 5, 5))),
        "separable_conv2d": lambda r, d: (_sep_graph(r, d), r.standard_normal((2, 2, 5, 5))),
        "pointwise_conv": lambda r, d: (_pw_graph(r, d), r.standard_normal((2, 3, 3, 3))),
        "maxpool2d": lambda r, d: (_pool_graph(d), _separated(r, (2, 2, 5, 5))),
        "batchnorm2d": lambda r, d: (_bn_graph(d), r.standard_normal((3, 2, 4, 4))),
        "relu": lambda r, d: (_relu_graph(r, d), _off_kink(r, (2, 2, 4, 4))),
    }
    for name, make in cases.items():
        worst = 0.0
        passed = True
        for t in range(trials):
            for dtype, tol in ((np.float64, 1e-6), (np.float32, 1e-3)):
                g, x = make(rng, dtype)
                res = grad_check(g, x, tolerance=tol, train=True, projection_seed=t)
                worst = max(worst, res.max_rel_error)
                passed &= res.passed
        ok &= _check(f"gradcheck {name}", passed, f"max rel err {worst:.2e}")
    return ok


def _conv_graph(rng, d):
    g = ComputeGraph(2, dtype=d)
    g.add("c", Conv2d(Conv2dSpec(3, 2, 1, 2, 2, bias=True), rng, d))
    return g


def _sep_graph(rng, d):
    g = ComputeGraph(2, dtype=d)
    g.add("s", SeparableConv2d(SeparableConv2dSpec(3, 1, 1, 2, 3), rng, d))
    return g


def _pw_graph(rng, d):
    g = ComputeGraph(3, dtype=d)
    g.add("p", PointwiseConv(PointwiseConvSpec(3, 2), rng, d))
    return g


def _pool_graph(d):
    g = ComputeGraph(2, dtype=d)
    g.add("m", MaxPool2d(MaxPool2dSpec(3, 2, 1)))
    return g


def _bn_graph(d):
    g = ComputeGraph(2, dtype=d)
    g.add("b", BatchNorm2d(BatchNorm2dSpec(2), d))
    return g


def _relu_graph(rng, d):
    g = ComputeGraph(2, dtype=d)
    g.add("p", PointwiseConv(PointwiseConvSpec(2, 2), rng, d))
    g.add("r", ReLU())
    return g


def _separated(rng, shape):
    n = int(np.prod(shape))
    return ((rng.permutation(n) / n) * 2 - 1).reshape(shape)


def _off_kink(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + 0.3)


def _rf_table() -> bool:
    ok = True
    expected = {1: 19, 2: 43, 3: 91, 4: 187}
    for t, rf in expected.items():
        got = receptive_field(BackboneSpec(family="xception", truncation=t).layer_list()).rf
        ok &= _check(f"rf xception trunc {t}", got == rf, f"rf={got}")
    got = receptive_field(BackboneSpec(family="resnet", truncation=1).layer_list()).rf
    ok &= _check("rf resnet layer 1", got == 43, f"rf={got}")

    spec = BackboneSpec(family="xception", truncation=1, input_size=48)
    g = build_backbone(spec, 0)
    info = receptive_field(spec.layer_list())
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 48, 48)).astype(np.float32)
    base = g.forward(x).data[0, :, 1, 1].copy()
    far = x.copy()
    far[0, :, 45, 45] += 5.0
    near = x.copy()
    cy = int(info.start + info.jump)
    near[0, :, cy, cy] += 5.0
    ok &= _check("empirical rf window", np.array_equal(base, g.forward(far).data[0, :, 1, 1])
                 and not np.array_equal(base, g.forward(near).data[0, :, 1, 1]))

    n1 = param_count(build_backbone(BackboneSpec(family="xception", truncation=1), 0))
    ok &= _check("param count trunc 1 ~0.055M", abs(n1 - 55_000) < 5_500, f"{n1}")
    return ok


def _ap_oracle(n_sets: int) -> bool:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(n_sets):
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 9, size=n) / 8.0
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        got = average_precision(scores, labels)
        want = _brute_force_ap(scores, labels)
        worst = max(worst, abs(got - want))
    return _check("average precision vs threshold-sweep oracle", worst < 1e-12,
                  f"max |diff| {worst:.1e}")


def _brute_force_ap(scores, labels) -> float:
    n_pos = int((labels == 1).sum())
    ap, prev = 0.0, 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        taken = scores >= thr
        tp = int(((labels == 1) & taken).sum())
        ap += (tp / n_pos - prev) * (tp / taken.sum())
        prev = tp / n_pos
    return ap


def _lanczos_checks() -> bool:
    rng = np.random.default_rng(3)
    img = ImageBuffer(rng.random((11, 7, 3)).astype(np.float32))
    same = lanczos_resize(img, 7, 11)
    ok = _check("lanczos identity", np.allclose(same.arr, img.arr, atol=1e-6))
    w = lanczos_weights(37, 13)
    ok &= _check("lanczos weights normalized", np.allclose(w.sum(axis=1), 1.0, atol=1e-9))
    return ok


def run_selftest(fast: bool = False) -> bool:
    trials = 2 if fast else 5
    ok = _gradient_checks(trials)
    ok &= _rf_table()
    ok &= _ap_oracle(50 if fast else 200)
    ok &= _lanczos_checks()
    print("selftest:", "all checks passed" if ok else "FAILURES above")
    return ok
