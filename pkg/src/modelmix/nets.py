"""Mini U-Net with an addressable encoder and a task-specific decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 3
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def check_input(self, h: int, w: int) -> None:
        m = 2 ** (self.depth - 1)
        if h % m or w % m:
            raise ValueError(
                f"input {h}x{w} is not divisible by 2^(depth-1) = {m}; "
                f"a depth-{self.depth} U-Net pools {self.depth - 1} times"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_signature(self) -> tuple:
        """Fields that fix every encoder layer shape."""
        return (self.depth, self.base_channels, self.in_channels)


@dataclass(frozen=True)
class LayerAddress:
    stage: int
    conv_index_within_stage: int


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor

    @property
    def shape(self) -> tuple:
        return self.kernel.shape


CONVS_PER_STAGE = 2


def _init_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> ConvParams:
    # He-style uniform: Var = 2 / fan_in
    fan_in = in_c * k * k
    bound = np.sqrt(6.0 / fan_in)
    kernel = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(np.float32)
    bias = np.zeros(out_c, dtype=np.float32)
    return ConvParams(Tensor(kernel, requires_grad=True), Tensor(bias, requires_grad=True))


class SegModel:
    """U-Net whose encoder convs are addressable by (stage, conv index).

    Each encoder stage is ``dropout -> conv3x3 -> relu -> conv3x3 -> relu``,
    followed by a 2x2 max pool except at the deepest stage. Decoder stages
    upsample, concatenate the matching skip and apply two conv3x3+relu. A 1x1
    conv and a channel softmax produce the probability map.
    """

    def __init__(self, cfg: UNetConfig, task_id: str, encoder, decoder, head: ConvParams):
        self.cfg = cfg
        self.task_id = task_id
        self.encoder: List[List[ConvParams]] = encoder
        self.decoder: List[List[ConvParams]] = decoder
        self.head = head

    def named_parameters(self) -> Iterator[tuple]:
        for s, stage in enumerate(self.encoder):
            for i, p in enumerate(stage):
                yield f"encoder.{s}.{i}.kernel", p.kernel
                yield f"encoder.{s}.{i}.bias", p.bias
        for s, stage in enumerate(self.decoder):
            for i, p in enumerate(stage):
                yield f"decoder.{s}.{i}.kernel", p.kernel
                yield f"decoder.{s}.{i}.bias", p.bias
        yield "head.kernel", self.head.kernel
        yield "head.bias", self.head.bias

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def encoder_parameters(self) -> List[Tensor]:
        return [t for name, t in self.named_parameters() if name.startswith("encoder.")]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def state_dict(self) -> dict:
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def build_model(cfg: UNetConfig, task_id: str, rng: np.random.Generator) -> SegModel:
    encoder = []
    in_c = cfg.in_channels
    for s in range(cfg.depth):
        c = cfg.stage_channels(s)
        encoder.append([_init_conv(rng, c, in_c, 3), _init_conv(rng, c, c, 3)])
        in_c = c
    decoder = []
    for s in reversed(range(cfg.depth - 1)):
        c = cfg.stage_channels(s)
        cat = cfg.stage_channels(s + 1) + c
        decoder.append([_init_conv(rng, c, cat, 3), _init_conv(rng, c, c, 3)])
    head = _init_conv(rng, cfg.num_classes, cfg.base_channels, 1)
    return SegModel(cfg, task_id, encoder, decoder, head)


def parameter_count(cfg: UNetConfig) -> int:
    """Closed-form number of scalars in a model built from ``cfg``."""
    c = cfg.stage_channels
    total = 0
    prev = cfg.in_channels
    for s in range(cfg.depth):
        total += 9 * prev * c(s) + c(s) + 9 * c(s) * c(s) + c(s)
        prev = c(s)
    for s in range(cfg.depth - 1):
        total += 9 * (c(s + 1) + c(s)) * c(s) + c(s) + 9 * c(s) * c(s) + c(s)
    total += cfg.base_channels * cfg.num_classes + cfg.num_classes
    return total


def enumerate_encoder_layers(model_or_cfg) -> List[LayerAddress]:
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, SegModel) else model_or_cfg
    return [LayerAddress(s, i) for s in range(cfg.depth) for i in range(CONVS_PER_STAGE)]


def _check_address(cfg: UNetConfig, addr: LayerAddress) -> None:
    if not (0 <= addr.stage < cfg.depth and 0 <= addr.conv_index_within_stage < CONVS_PER_STAGE):
        raise IndexError(
            f"invalid encoder address {addr}: stage must be in [0, {cfg.depth - 1}], "
            f"conv_index_within_stage in [0, {CONVS_PER_STAGE - 1}]"
        )


def get_conv(model: SegModel, addr: LayerAddress) -> ConvParams:
    _check_address(model.cfg, addr)
    return model.encoder[addr.stage][addr.conv_index_within_stage]


def set_conv(model: SegModel, addr: LayerAddress, p: ConvParams) -> None:
    _check_address(model.cfg, addr)
    cur = model.encoder[addr.stage][addr.conv_index_within_stage]
    if p.kernel.shape != cur.kernel.shape or p.bias.shape != cur.bias.shape:
        raise ValueError(
            f"set_conv at {addr}: expected kernel {cur.kernel.shape} / bias {cur.bias.shape}, "
            f"got {p.kernel.shape} / {p.bias.shape}"
        )
    cur.kernel.data = np.array(p.kernel.data, dtype=cur.kernel.dtype, copy=True)
    cur.bias.data = np.array(p.bias.data, dtype=cur.bias.dtype, copy=True)


def encode(
    model: SegModel,
    x: Tensor,
    training: bool,
    rng: Optional[np.random.Generator],
    encoder: Optional[Sequence[Sequence[ConvParams]]] = None,
) -> List[Tensor]:
    """Run the encoder; returns the feature map of every stage (deepest last)."""
    cfg = model.cfg
    dc._check4(x, "forward")
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    cfg.check_input(x.shape[2], x.shape[3])
    layers = model.encoder if encoder is None else encoder
    feats = []
    h = x
    for s in range(cfg.depth):
        if s > 0:
            h = dc.max_pool_2x2(h)
        h = dc.dropout_apply(h, cfg.dropout_rate, rng, training)
        for p in layers[s]:
            h = dc.relu(dc.conv2d(h, p.kernel, p.bias, stride=1, pad=1))
        feats.append(h)
    return feats


def decode(model: SegModel, feats: Sequence[Tensor]) -> Tensor:
    h = feats[-1]
    for k, stage in enumerate(model.decoder):
        skip = feats[len(feats) - 2 - k]
        h = dc.channel_concat(dc.nearest_upsample_2x2(h), skip)
        for p in stage:
            h = dc.relu(dc.conv2d(h, p.kernel, p.bias, stride=1, pad=1))
    logits = dc.conv2d(h, model.head.kernel, model.head.bias)
    return dc.channel_softmax(logits)


def forward(
    model: SegModel,
    x: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    encoder: Optional[Sequence[Sequence[ConvParams]]] = None,
) -> Tensor:
    """Probability map (n, num_classes, h, w).

    ``encoder`` substitutes the model's own encoder layers (used for virtual
    encoders); the decoder is always the model's own.
    """
    if training and model.cfg.dropout_rate > 0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    return decode(model, encode(model, x, training, rng, encoder))
