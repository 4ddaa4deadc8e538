"""Virtual encoders built by convex interpolation of one conv layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nets import ConvParams, LayerAddress, SegModel, enumerate_encoder_layers


@dataclass(frozen=True)
class BetaParams:
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Beta parameters must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class MixPlan:
    task_i: str
    task_j: str
    layer: LayerAddress
    lam: float
    extra_layers: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def layers(self) -> tuple:
        return (self.layer,) + tuple(self.extra_layers)


def sample_lambda(beta: BetaParams, rng: np.random.Generator) -> float:
    return float(np.clip(rng.beta(beta.a, beta.b), 0.0, 1.0))


def sample_plan(
    model_i: SegModel,
    model_j: SegModel,
    beta: BetaParams,
    rng: np.random.Generator,
    num_layers: int = 1,
) -> MixPlan:
    """Draw lambda and ``num_layers`` distinct encoder layers uniformly."""
    addrs = enumerate_encoder_layers(model_i)
    lam = sample_lambda(beta, rng)
    picks = rng.choice(len(addrs), size=num_layers, replace=False)
    chosen = [addrs[int(k)] for k in picks]
    return MixPlan(model_i.task_id, model_j.task_id, chosen[0], lam, tuple(chosen[1:]))


def mix_conv(p_i: ConvParams, p_j: ConvParams, lam: float) -> ConvParams:
    """lam * p_i + (1 - lam) * p_j for kernel and bias; differentiable in both."""
    if p_i.kernel.shape != p_j.kernel.shape or p_i.bias.shape != p_j.bias.shape:
        raise ValueError(
            f"cannot mix conv params of different shapes: kernel {p_i.kernel.shape} vs {p_j.kernel.shape}, "
            f"bias {p_i.bias.shape} vs {p_j.bias.shape}"
        )
    lam = float(lam)
    if lam == 1.0:
        return p_i
    if lam == 0.0:
        return p_j
    kernel = dc.add(dc.scalar_scale(p_i.kernel, lam), dc.scalar_scale(p_j.kernel, 1.0 - lam))
    bias = dc.add(dc.scalar_scale(p_i.bias, lam), dc.scalar_scale(p_j.bias, 1.0 - lam))
    return ConvParams(kernel, bias)


def build_virtual_encoder(model_i: SegModel, model_j: SegModel, plan: MixPlan) -> List[List[ConvParams]]:
    """Encoder layer list of model_i with the planned layer(s) mixed toward model_j.

    The returned structure only references parameter tensors; neither model
    is modified. Pass it as ``encoder=`` to :func:`modelmix.nets.forward`.
    """
    if model_i.cfg.encoder_signature() != model_j.cfg.encoder_signature():
        raise ValueError(f"encoders do not share an architecture: {model_i.cfg} vs {model_j.cfg}")
    valid = set(enumerate_encoder_layers(model_i))
    view = [list(stage) for stage in model_i.encoder]
    for addr in plan.layers:
        if addr not in valid:
            raise IndexError(f"plan layer {addr} is not an encoder layer of this config")
        s, k = addr.stage, addr.conv_index_within_stage
        view[s][k] = mix_conv(model_i.encoder[s][k], model_j.encoder[s][k], plan.lam)
    return view


def verify_feature_linearity(
    p_i: ConvParams,
    p_j: ConvParams,
    lam: float,
    x: Tensor,
    with_nonlinearity: bool = False,
    pad: int = 1,
) -> float:
    """Max-abs gap between conv(x, mixed params) and the mix of conv outputs.

    With ``with_nonlinearity`` a relu is applied to each side first; this is a
    negative control, the identity does not survive the nonlinearity.
    """
    mixed = mix_conv(p_i, p_j, lam)
    lhs = dc.conv2d(x, mixed.kernel, mixed.bias, pad=pad).data
    a = dc.conv2d(x, p_i.kernel, p_i.bias, pad=pad).data
    b = dc.conv2d(x, p_j.kernel, p_j.bias, pad=pad).data
    if with_nonlinearity:
        lhs = np.maximum(lhs, 0)
        a, b = np.maximum(a, 0), np.maximum(b, 0)
    rhs = lam * a + (1.0 - lam) * b
    return float(np.max(np.abs(lhs - rhs)))
