"""Cross-task encoder mixing for scribble-supervised segmentation.

Two task-specific U-Nets are trained together; at every step one encoder
convolution is replaced by a convex combination of both tasks' weights and
the resulting virtual model is tied to the individual one through
supervised and consistency losses.
"""

from .diffcore import Tensor, conv2d, finite_difference_check
from .mixer import BetaParams, MixPlan, build_virtual_encoder, mix_conv
from .nets import LayerAddress, SegModel, UNetConfig, build_model, forward

__all__ = [
    "BetaParams",
    "LayerAddress",
    "MixPlan",
    "SegModel",
    "Tensor",
    "UNetConfig",
    "build_model",
    "build_virtual_encoder",
    "conv2d",
    "finite_difference_check",
    "forward",
    "mix_conv",
]
__version__ = "0.1.0"
