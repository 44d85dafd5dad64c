"""patchlab: patch-wise fake-image forensics on a small autodiff core."""

__version__ = "0.1.0"

from .backbones import BackboneSpec, ReceptiveFieldInfo, build_backbone, param_count, receptive_field
from .layers import ComputeGraph
from .tensor import Tensor

__all__ = [
    "BackboneSpec",
    "ComputeGraph",
    "ReceptiveFieldInfo",
    "Tensor",
    "build_backbone",
    "param_count",
    "receptive_field",
    "__version__",
]
