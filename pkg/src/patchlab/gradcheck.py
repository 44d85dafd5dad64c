"""Finite-difference verification of analytic gradients.

The checker projects a graph's output onto a fixed random direction to get
a scalar loss, computes analytic gradients by backprop, and compares them
against central finite differences for every leaf (parameters and the
input). The finite-difference oracle always runs in float64 - for a
float32 graph a float64 shadow copy is evaluated at the same point - so
oracle noise stays far below the tolerance being enforced.

Relative error per element is |a - n| / max(|a|, |n|), counted as zero when
both magnitudes sit below the noise floor. Kinked primitives (relu, abs,
maxpool) are only meaningful away from their kinks; the randomized
instance generators in the test-suite keep inputs off kink neighborhoods,
the usual finite-difference caveat.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .layers import ComputeGraph
from .tensor import Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_leaf: dict[str, float]
    tolerance: float
    passed: bool

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.1e})"


def _defaults_for(dtype) -> tuple[float, float, float]:
    # (step h, tolerance, noise floor) per floating width under test
    if np.dtype(dtype) == np.float64:
        return 1e-5, 1e-6, 1e-9
    return 1e-3, 1e-3, 1e-4


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.where(denom > floor, denom, 1.0)
    return np.where(denom > floor, err, 0.0)


def clone_graph(graph: ComputeGraph, dtype) -> ComputeGraph:
    """Deep-copy a graph and cast its parameters to ``dtype``."""
    g = copy.deepcopy(graph)
    g._last_output = None
    g._last_activations = None
    g.dtype = np.dtype(dtype)
    for p in g.parameters().values():
        p.data = p.data.astype(dtype)
        p.grad = None
    return g


def grad_check(graph: ComputeGraph, input_arr: np.ndarray, tolerance: float | None = None,
               h: float | None = None, projection_seed: int = 0, train: bool = False) -> GradCheckResult:
    """Compare backprop gradients of a graph against central differences.

    The total leaf count must stay small (< 1e4 scalars); finite differences
    need two forward passes per scalar.
    """
    dtype = graph.dtype
    h0, tol0, floor = _defaults_for(dtype)
    h = h0 if h is None else h
    tolerance = tol0 if tolerance is None else tolerance

    x = Tensor(np.asarray(input_arr, dtype=dtype), requires_grad=True)
    analytic_leaves: dict[str, Tensor] = {"input": x}
    analytic_leaves.update(graph.parameters())
    n_scalars = sum(t.size for t in analytic_leaves.values())
    if n_scalars >= 10_000:
        raise ValueError(f"grad_check limited to <1e4 scalars, got {n_scalars}")

    out = graph.forward(x, train=train)
    proj = np.random.default_rng(projection_seed).standard_normal(out.shape).astype(dtype)

    graph.zero_grad()
    x.zero_grad()
    loss = (out * Tensor(proj)).sum()
    loss.backward()

    # Float64 oracle side.
    shadow = graph if graph.dtype == np.float64 else clone_graph(graph, np.float64)
    x64 = Tensor(x.data.astype(np.float64))
    oracle_leaves: dict[str, Tensor] = {"input": x64}
    oracle_leaves.update(shadow.parameters())
    proj64 = proj.astype(np.float64)

    def oracle_loss() -> float:
        return float((shadow.forward(x64, train=train).data * proj64).sum())

    per_leaf: dict[str, float] = {}
    worst = 0.0
    for name, leaf in analytic_leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        target = oracle_leaves[name]
        numeric = np.zeros(target.shape, dtype=np.float64)
        flat = target.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = oracle_loss()
            flat[i] = orig - h
            down = oracle_loss()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        err = relative_errors(analytic.astype(np.float64), numeric, floor)
        per_leaf[name] = float(err.max()) if err.size else 0.0
        worst = max(worst, per_leaf[name])

    return GradCheckResult(max_rel_error=worst, per_leaf=per_leaf,
                           tolerance=tolerance, passed=worst < tolerance)
