"""Layer descriptors, parameterized layer objects, and the compute graph.

Descriptors (the ``LayerKind`` dataclasses) are pure declarations used by
architecture builders and by the receptive-field calculator. Layer objects
own parameter tensors and execute the matching primitive. A ComputeGraph
is an ordered DAG of named layer applications; residual topology is
expressed by nodes that reference earlier nodes by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from . import nnops
from .errors import NumericError, ShapeMismatch, StateError
from .tensor import DEFAULT_DTYPE, Tensor


# -- declarative layer kinds ---------------------------------------------


@dataclass(frozen=True)
class Conv2dSpec:
    k: int
    s: int
    pad: int
    in_ch: int
    out_ch: int
    bias: bool = False


@dataclass(frozen=True)
class SeparableConv2dSpec:
    k: int
    s: int
    pad: int
    in_ch: int
    out_ch: int


@dataclass(frozen=True)
class MaxPool2dSpec:
    k: int
    s: int
    pad: int


@dataclass(frozen=True)
class BatchNorm2dSpec:
    ch: int


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class ResidualAddSpec:
    pass


@dataclass(frozen=True)
class PointwiseConvSpec:
    in_ch: int
    out_ch: int
    bias: bool = True


LayerKind = Union[Conv2dSpec, SeparableConv2dSpec, MaxPool2dSpec,
                  BatchNorm2dSpec, ReluSpec, ResidualAddSpec, PointwiseConvSpec]


def _validate_kind(kind: LayerKind) -> None:
    k = getattr(kind, "k", 1)
    s = getattr(kind, "s", 1)
    pad = getattr(kind, "pad", 0)
    if k < 1 or s < 1 or pad < 0:
        raise ShapeMismatch(f"invalid layer geometry: {kind}")
    for attr in ("in_ch", "out_ch", "ch"):
        if getattr(kind, attr, 1) < 1:
            raise ShapeMismatch(f"invalid channel count: {kind}")


# -- parameterized layers --------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: owns named parameter tensors and applies one primitive."""

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def __call__(self, *xs: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, spec: Conv2dSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        _validate_kind(spec)
        self.spec = spec
        fan_in = spec.in_ch * spec.k * spec.k
        self.weight = Tensor(kaiming_uniform(rng, (spec.out_ch, spec.in_ch, spec.k, spec.k), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_ch, dtype=dtype), requires_grad=True) if spec.bias else None

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def __call__(self, x, train=False):
        return nnops.conv2d(x, self.weight, self.bias, self.spec.s, self.spec.pad)


class SeparableConv2d(Layer):
    """Depthwise k*k followed by pointwise 1x1, no nonlinearity between."""

    def __init__(self, spec: SeparableConv2dSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        _validate_kind(spec)
        self.spec = spec
        self.depthwise = Tensor(kaiming_uniform(rng, (spec.in_ch, spec.k, spec.k), spec.k * spec.k, dtype),
                                requires_grad=True)
        self.pointwise = Tensor(kaiming_uniform(rng, (spec.out_ch, spec.in_ch), spec.in_ch, dtype),
                                requires_grad=True)

    def params(self):
        return [("depthwise", self.depthwise), ("pointwise", self.pointwise)]

    def __call__(self, x, train=False):
        mid = nnops.depthwise_conv2d(x, self.depthwise, None, self.spec.s, self.spec.pad)
        return nnops.pointwise_conv(mid, self.pointwise, None)


class MaxPool2d(Layer):
    def __init__(self, spec: MaxPool2dSpec):
        _validate_kind(spec)
        self.spec = spec

    def __call__(self, x, train=False):
        return nnops.maxpool2d(x, self.spec.k, self.spec.s, self.spec.pad)


class BatchNorm2d(Layer):
    def __init__(self, spec: BatchNorm2dSpec, dtype=DEFAULT_DTYPE, momentum=0.1, eps=1e-5):
        _validate_kind(spec)
        self.spec = spec
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(spec.ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(spec.ch, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(spec.ch, dtype=np.float64)
        self.running_var = np.ones(spec.ch, dtype=np.float64)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x, train=False):
        return nnops.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                                 self.running_var, train, self.momentum, self.eps)


class ReLU(Layer):
    def __call__(self, x, train=False):
        from .tensor import relu
        return relu(x)


class ResidualAdd(Layer):
    def __call__(self, a, b, train=False):
        return nnops.residual_add(a, b)


class PointwiseConv(Layer):
    def __init__(self, spec: PointwiseConvSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        _validate_kind(spec)
        self.spec = spec
        self.weight = Tensor(kaiming_uniform(rng, (spec.out_ch, spec.in_ch), spec.in_ch, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_ch, dtype=dtype), requires_grad=True) if spec.bias else None

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def __call__(self, x, train=False):
        return nnops.pointwise_conv(x, self.weight, self.bias)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        from .tensor import Tensor as T
        self.weight = T(kaiming_uniform(rng, (in_dim, out_dim), in_dim, dtype), requires_grad=True)
        self.bias = T(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x, train=False):
        from .tensor import matmul
        return matmul(x, self.weight) + self.bias


class Upsample2x(Layer):
    def __call__(self, x, train=False):
        return nnops.upsample2x(x)


class Sigmoid(Layer):
    def __call__(self, x, train=False):
        from .tensor import sigmoid
        return sigmoid(x)


class Reshape(Layer):
    def __init__(self, shape: tuple):
        self.shape = shape  # per-sample shape, batch dim preserved

    def __call__(self, x, train=False):
        from .tensor import reshape
        return reshape(x, (x.shape[0],) + self.shape)


class GlobalMean(Layer):
    def __call__(self, x, train=False):
        return nnops.global_mean(x)


# -- compute graph ---------------------------------------------------------


@dataclass
class GraphNode:
    name: str
    layer: Layer
    inputs: tuple[str, ...]


class ComputeGraph:
    """Ordered DAG of named layer applications.

    Nodes appear in topological order by construction; every node's inputs
    refer to the synthetic node "input" or to earlier node names. backward
    replays the autodiff tape recorded during the last forward, which visits
    primitives in exact reverse construction order.
    """

    def __init__(self, in_channels: int, dtype=DEFAULT_DTYPE, input_kind: str = "nchw"):
        self.in_channels = in_channels
        self.dtype = np.dtype(dtype)
        self.input_kind = input_kind  # "nchw" images or "vector" latents
        self.nodes: list[GraphNode] = []
        self._names: set[str] = {"input"}
        self._last_output: Tensor | None = None
        self._last_activations: dict[str, Tensor] | None = None

    def add(self, name: str, layer: Layer, inputs: tuple[str, ...] = None) -> str:
        if name in self._names:
            raise StateError(f"duplicate node name {name!r}")
        if inputs is None:
            inputs = (self.nodes[-1].name if self.nodes else "input",)
        for ref in inputs:
            if ref not in self._names:
                raise StateError(f"node {name!r} references unknown input {ref!r}")
        self.nodes.append(GraphNode(name, layer, tuple(inputs)))
        self._names.add(name)
        return name

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for node in self.nodes:
            for pname, p in node.layer.params():
                out[f"{node.name}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            for bname, b in node.layer.buffers():
                out[f"{node.name}.{bname}"] = b
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, x, train: bool = False, keep_activations: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if self.input_kind == "nchw":
            if x.ndim != 4 or x.shape[1] != self.in_channels:
                raise ShapeMismatch(
                    f"graph expects (N, {self.in_channels}, H, W) input, got {x.shape}")
        elif x.ndim != 2 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"graph expects (N, {self.in_channels}) input, got {x.shape}")
        values: dict[str, Tensor] = {"input": x}
        for node in self.nodes:
            args = [values[ref] for ref in node.inputs]
            try:
                values[node.name] = node.layer(*args, train=train)
            except (ShapeMismatch, NumericError) as e:
                raise type(e)(f"node {node.name!r}: {e}") from e
        out = values[self.nodes[-1].name] if self.nodes else x
        self._last_output = out
        self._last_activations = values if keep_activations else None
        return out

    def backward(self, output_grad) -> dict[str, np.ndarray]:
        """Seed the last forward's output with ``output_grad`` and return
        the accumulated parameter gradients."""
        if self._last_output is None:
            raise StateError("backward called before forward")
        self._last_output.backward(np.asarray(output_grad, dtype=self.dtype))
        return {name: p.grad for name, p in self.parameters().items() if p.grad is not None}

    def activation(self, name: str) -> Tensor:
        if self._last_activations is None:
            raise StateError("forward was not run with keep_activations=True")
        return self._last_activations[name]

    # -- checkpoint support ------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": v.data for k, v in self.parameters().items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers().items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            src = arrays[f"param:{k}"]
            if src.shape != p.data.shape:
                raise ShapeMismatch(f"checkpoint param {k}: {src.shape} != {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)
        for k, b in self.buffers().items():
            src = arrays[f"buffer:{k}"]
            b[...] = src

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.load_state_arrays(snap)
