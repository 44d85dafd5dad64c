"""Truncated convolutional backbones and receptive-field arithmetic.

Two families are provided. The "xception" family is the standard entry
flow (two 3x3 stem convs, then residual blocks of separable convs with a
strided maxpool and 1x1 strided shortcut) followed by middle-flow blocks
of three separable convs; truncation picks how many blocks to keep. The
"resnet" family is the standard 7x7 stem plus maxpool and the first
residual layer (two basic blocks). Every truncation ends in a 2-channel
1x1 head so the output is a per-patch real/fake logit grid.

"extended_block2" keeps the truncation-2 receptive field but appends two
extra blocks whose separable convs use 1x1 kernels, growing the parameter
count without widening what each output cell can see.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .layers import (BatchNorm2d, BatchNorm2dSpec, ComputeGraph, Conv2d, Conv2dSpec,
                     LayerKind, MaxPool2d, MaxPool2dSpec, PointwiseConv, PointwiseConvSpec,
                     ReLU, ReluSpec, ResidualAdd, ResidualAddSpec, SeparableConv2d,
                     SeparableConv2dSpec)
from .tensor import DEFAULT_DTYPE

FAMILIES = ("xception", "resnet", "extended_block2")

XCEPTION_WIDTHS = {1: 128, 2: 256, 3: 728, 4: 728, 5: 728}


@dataclass(frozen=True)
class ReceptiveFieldInfo:
    """Receptive field side length, output stride, and first-cell center,
    all in input-pixel units."""

    rf: int
    jump: int
    start: float

    def compose(self, inner: "ReceptiveFieldInfo") -> "ReceptiveFieldInfo":
        """Receptive field of ``self`` followed by ``inner``."""
        return ReceptiveFieldInfo(
            rf=self.rf + (inner.rf - 1) * self.jump,
            jump=self.jump * inner.jump,
            start=self.start + inner.start * self.jump,
        )


def receptive_field(layers: Sequence[LayerKind]) -> ReceptiveFieldInfo:
    """Fold the rf recurrence over a flat layer list.

    rf_out = rf_in + (k - 1) * jump_in and jump_out = jump_in * s, starting
    from rf = 1, jump = 1. Pointwise and elementwise kinds contribute
    k = 1, s = 1. Padding shifts the first-cell center but not rf.
    """
    rf, jump, start = 1, 1, 0.0
    for kind in layers:
        k = getattr(kind, "k", 1)
        s = getattr(kind, "s", 1)
        pad = getattr(kind, "pad", 0)
        rf = rf + (k - 1) * jump
        start = start + ((k - 1) / 2 - pad) * jump
        jump = jump * s
    return ReceptiveFieldInfo(rf=rf, jump=jump, start=start)


@dataclass(frozen=True)
class BackboneSpec:
    """Declarative description of a truncated patch classifier."""

    family: str = "xception"
    truncation: int = 2
    in_channels: int = 3
    input_size: int = 64  # native training/eval resolution

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}")
        valid = {"xception": range(1, 6), "resnet": (1,), "extended_block2": (2,)}[self.family]
        if self.truncation not in valid:
            raise ConfigError(
                f"truncation {self.truncation} invalid for family {self.family!r}")
        if self.in_channels < 1 or self.input_size < 2:
            raise ConfigError("in_channels and input_size must be positive")

    @property
    def head_width(self) -> int:
        if self.family == "resnet":
            return 64
        return XCEPTION_WIDTHS[2 if self.family == "extended_block2" else self.truncation]

    def layer_list(self) -> list[LayerKind]:
        """Flat main-path layer kinds (shortcut branches never dominate the
        receptive field here, so the main path determines rf)."""
        return _main_path(self)

    def patience_multiplier(self) -> int:
        """Early-stopping multiplier p: 50 for the shallowest cut, 20 for the
        next, 10 for anything deeper (resnet included)."""
        if self.family == "xception" and self.truncation == 1:
            return 50
        if self.family in ("xception", "extended_block2") and self.truncation == 2:
            return 20
        return 10

    def to_dict(self) -> dict:
        return {"family": self.family, "truncation": self.truncation,
                "in_channels": self.in_channels, "input_size": self.input_size}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(family=d["family"], truncation=int(d["truncation"]),
                   in_channels=int(d["in_channels"]), input_size=int(d["input_size"]))


# -- structural description -------------------------------------------------


@dataclass(frozen=True)
class _Block:
    """Residual block: main branch layer kinds plus optional shortcut kinds
    (None means identity skip)."""

    main: tuple
    shortcut: tuple | None
    post_relu: bool = False  # resnet applies relu after the add


def _xception_stem(in_ch: int) -> list:
    return [Conv2dSpec(3, 2, 0, in_ch, 32), BatchNorm2dSpec(32), ReluSpec(),
            Conv2dSpec(3, 1, 0, 32, 64), BatchNorm2dSpec(64), ReluSpec()]


def _xception_entry_block(in_ch: int, out_ch: int, leading_relu: bool) -> _Block:
    main = []
    if leading_relu:
        main.append(ReluSpec())
    main += [SeparableConv2dSpec(3, 1, 1, in_ch, out_ch), BatchNorm2dSpec(out_ch), ReluSpec(),
             SeparableConv2dSpec(3, 1, 1, out_ch, out_ch), BatchNorm2dSpec(out_ch),
             MaxPool2dSpec(3, 2, 1)]
    shortcut = (Conv2dSpec(1, 2, 0, in_ch, out_ch), BatchNorm2dSpec(out_ch))
    return _Block(main=tuple(main), shortcut=shortcut)


def _xception_middle_block(ch: int, k: int = 3) -> _Block:
    pad = (k - 1) // 2
    main = []
    for _ in range(3):
        main += [ReluSpec(), SeparableConv2dSpec(k, 1, pad, ch, ch), BatchNorm2dSpec(ch)]
    return _Block(main=tuple(main), shortcut=None)


def _resnet_stem(in_ch: int) -> list:
    return [Conv2dSpec(7, 2, 3, in_ch, 64), BatchNorm2dSpec(64), ReluSpec(),
            MaxPool2dSpec(3, 2, 1)]


def _resnet_basic_block(ch: int) -> _Block:
    main = (Conv2dSpec(3, 1, 1, ch, ch), BatchNorm2dSpec(ch), ReluSpec(),
            Conv2dSpec(3, 1, 1, ch, ch), BatchNorm2dSpec(ch))
    return _Block(main=main, shortcut=None, post_relu=True)


def _structure(spec: BackboneSpec) -> tuple[list, list[_Block], PointwiseConvSpec]:
    if spec.family == "resnet":
        stem = _resnet_stem(spec.in_channels)
        blocks = [_resnet_basic_block(64), _resnet_basic_block(64)]
        return stem, blocks, PointwiseConvSpec(64, 2)

    stem = _xception_stem(spec.in_channels)
    blocks: list[_Block] = []
    entry = [(64, 128, False), (128, 256, True), (256, 728, True)]
    depth = 2 if spec.family == "extended_block2" else spec.truncation
    for i in range(min(depth, 3)):
        blocks.append(_xception_entry_block(*entry[i]))
    for _ in range(max(0, depth - 3)):
        blocks.append(_xception_middle_block(728))
    if spec.family == "extended_block2":
        blocks += [_xception_middle_block(256, k=1), _xception_middle_block(256, k=1)]
    return stem, blocks, PointwiseConvSpec(spec.head_width, 2)


def _main_path(spec: BackboneSpec) -> list[LayerKind]:
    stem, blocks, head = _structure(spec)
    flat: list[LayerKind] = list(stem)
    for block in blocks:
        flat.extend(block.main)
        flat.append(ResidualAddSpec())
        if block.post_relu:
            flat.append(ReluSpec())
    flat.append(head)
    return flat


# -- graph construction ------------------------------------------------------


def _materialize(kind, rng, dtype):
    if isinstance(kind, Conv2dSpec):
        return Conv2d(kind, rng, dtype)
    if isinstance(kind, SeparableConv2dSpec):
        return SeparableConv2d(kind, rng, dtype)
    if isinstance(kind, MaxPool2dSpec):
        return MaxPool2d(kind)
    if isinstance(kind, BatchNorm2dSpec):
        return BatchNorm2d(kind, dtype)
    if isinstance(kind, ReluSpec):
        return ReLU()
    if isinstance(kind, PointwiseConvSpec):
        return PointwiseConv(kind, rng, dtype)
    raise ConfigError(f"cannot materialize {kind!r}")


def build_backbone(spec: BackboneSpec, rng_seed: int = 0, dtype=DEFAULT_DTYPE) -> ComputeGraph:
    """Materialize the truncated classifier graph with seeded init.

    Identical seeds produce bitwise-identical initial parameters; layer
    construction order is fixed by the structure, never by dict iteration.
    """
    rng = np.random.default_rng(rng_seed)
    graph = ComputeGraph(spec.in_channels, dtype=dtype)
    stem, blocks, head = _structure(spec)

    for i, kind in enumerate(stem):
        graph.add(f"stem{i}", _materialize(kind, rng, dtype))

    for bi, block in enumerate(blocks, start=1):
        entry_ref = graph.nodes[-1].name
        ref = entry_ref
        for li, kind in enumerate(block.main):
            ref = graph.add(f"block{bi}.main{li}", _materialize(kind, rng, dtype), (ref,))
        if block.shortcut is None:
            skip_ref = entry_ref
        else:
            skip_ref = entry_ref
            for li, kind in enumerate(block.shortcut):
                skip_ref = graph.add(f"block{bi}.skip{li}", _materialize(kind, rng, dtype), (skip_ref,))
        ref = graph.add(f"block{bi}.add", ResidualAdd(), (ref, skip_ref))
        if block.post_relu:
            graph.add(f"block{bi}.out_relu", ReLU(), (ref,))

    graph.add("head", _materialize(head, rng, dtype))
    graph.native_size = spec.input_size
    return graph


def param_count(graph: ComputeGraph) -> int:
    """Total learnable scalars, including head and normalization affine terms."""
    return graph.param_count()


def backbone_grid_shape(spec: BackboneSpec, input_size: int | None = None) -> tuple[int, int]:
    """Spatial size of the output patch grid for a square input."""
    from .nnops import conv_out_size

    size = spec.input_size if input_size is None else input_size
    h = size
    for kind in spec.layer_list():
        k = getattr(kind, "k", 1)
        s = getattr(kind, "s", 1)
        pad = getattr(kind, "pad", 0)
        h = conv_out_size(h, k, s, pad)
    return h, h
