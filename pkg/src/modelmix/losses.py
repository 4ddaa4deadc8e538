"""Training objectives on probability maps.

All losses take post-softmax maps of shape (n, num_classes, h, w) and return
scalar tensors. Scribble terms average over annotated pixels only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_FLOOR = 1e-7


@dataclass
class ScribbleMap:
    """Per-pixel class ids; ``num_classes`` marks an unlabeled pixel."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ValueError(f"scribble values must lie in [0, {self.num_classes}]")

    @property
    def unlabeled(self) -> int:
        return self.num_classes

    @property
    def annotated(self) -> np.ndarray:
        return self.labels != self.num_classes

    @classmethod
    def stack(cls, maps: Sequence["ScribbleMap"]) -> "ScribbleMap":
        return cls(np.stack([m.labels for m in maps]), maps[0].num_classes)


@dataclass
class LossBreakdown:
    """Loss parts of one step. ``pce`` is the plain scribble term of the
    variants without vicinal supervision; it is 0.0 whenever ``vicinal_sup``
    carries the supervision."""

    inv: float = 0.0
    vicinal_sup: float = 0.0
    vicinal_reg: float = 0.0
    pce: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"pce": self.pce, "inv": self.inv, "vicinal_sup": self.vicinal_sup,
                "vicinal_reg": self.vicinal_reg, "total": self.total}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, part: str, value: float):
        super().__init__(f"loss part '{part}' is not finite ({value})")
        self.part = part
        self.value = value


def _scribble_setup(probs: Tensor, scribble: ScribbleMap, op: str):
    labels = scribble.labels
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise dc.ShapeError(f"{op}: scribble shape {labels.shape} does not match probs {probs.shape}")
    if c != scribble.num_classes:
        raise dc.ShapeError(f"{op}: probs have {c} channels but scribble has {scribble.num_classes} classes")
    mask = labels != scribble.num_classes
    count = int(mask.sum())
    safe = np.where(mask, labels, 0)
    # probability of the annotated class at every pixel, shape (n, h, w)
    fc = np.take_along_axis(probs.data, safe[:, None], axis=1)[:, 0]
    return mask, count, safe, fc


def _scatter_to_class(probs: Tensor, safe: np.ndarray, per_pixel: np.ndarray) -> np.ndarray:
    g = np.zeros(probs.shape, dtype=probs.dtype)
    np.put_along_axis(g, safe[:, None], per_pixel[:, None].astype(probs.dtype), axis=1)
    return g


def annotated_count(scribble: ScribbleMap) -> int:
    return int(scribble.annotated.sum())


def partial_ce(probs: Tensor, scribble: ScribbleMap) -> Tensor:
    """Mean of -log p_true over annotated pixels; 0 when nothing is annotated."""
    mask, count, safe, fc = _scribble_setup(probs, scribble, "partial_ce")
    if count == 0:
        return Tensor(np.zeros((), dtype=probs.dtype))
    clamped = np.maximum(fc, PROB_FLOOR)
    value = -np.sum(np.log(clamped) * mask) / count

    def backward(g):
        d = np.where(mask & (fc > PROB_FLOOR), -1.0 / clamped, 0.0) / count
        return (_scatter_to_class(probs, safe, g * d),)

    return dc.custom_op(np.asarray(value, dtype=probs.dtype), (probs,), backward)


def sup_loss(probs: Tensor, scribble: ScribbleMap) -> Tensor:
    """Cross-entropy plus per-pixel Dice term on annotated pixels.

    With a one-hot label only the annotated channel c contributes:
    -[log f_c + 2 f_c / (1 + f_c)], averaged over annotated pixels.
    """
    mask, count, safe, fc = _scribble_setup(probs, scribble, "sup_loss")
    if count == 0:
        return Tensor(np.zeros((), dtype=probs.dtype))
    clamped = np.maximum(fc, PROB_FLOOR)
    per_pixel = np.log(clamped) + 2.0 * fc / (1.0 + fc)
    value = -np.sum(per_pixel * mask) / count

    def backward(g):
        dlog = np.where(fc > PROB_FLOOR, 1.0 / clamped, 0.0)
        ddice = 2.0 / (1.0 + fc) ** 2
        d = np.where(mask, -(dlog + ddice), 0.0) / count
        return (_scatter_to_class(probs, safe, g * d),)

    return dc.custom_op(np.asarray(value, dtype=probs.dtype), (probs,), backward)


def cosine_loss(a: Tensor, b: Tensor, stop_grad_b: bool = False) -> Tensor:
    """Batch mean of the negative cosine similarity of flattened samples."""
    if a.shape != b.shape:
        raise dc.ShapeError(f"cosine_loss: shapes differ, {a.shape} vs {b.shape}")
    n = a.shape[0]
    fa = a.data.reshape(n, -1).astype(np.float64)
    fb = b.data.reshape(n, -1).astype(np.float64)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_loss: zero-norm sample")
    dot = np.sum(fa * fb, axis=1)
    cos = dot / (na * nb)
    value = -np.mean(cos)
    parents = (a,) if stop_grad_b else (a, b)

    def backward(g):
        scale = -float(g) / n
        ga = scale * (fb / (na * nb)[:, None] - (cos / na ** 2)[:, None] * fa)
        out = [ga.reshape(a.shape).astype(a.dtype)]
        if not stop_grad_b:
            gb = scale * (fa / (na * nb)[:, None] - (cos / nb ** 2)[:, None] * fb)
            out.append(gb.reshape(b.shape).astype(b.dtype))
        return tuple(out)

    return dc.custom_op(np.asarray(value, dtype=a.dtype), parents, backward)


def mix_outputs(out_1: Tensor, out_2: Tensor, alpha: float) -> Tensor:
    """alpha * out_1 + (1 - alpha) * out_2."""
    return dc.add(dc.scalar_scale(out_1, alpha), dc.scalar_scale(out_2, 1.0 - alpha))


def mix_invariant_loss(
    model,
    x1c: Tensor,
    x2c: Tensor,
    x_mixed: Tensor,
    alpha: float,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    stop_grad_target: bool = False,
) -> Tensor:
    """Cosine loss between f(mixed image) and the same mix of f(x1c), f(x2c)."""
    from .nets import forward

    f_mixed = forward(model, x_mixed, training, rng)
    f1 = forward(model, x1c, training, rng)
    f2 = forward(model, x2c, training, rng)
    return cosine_loss(f_mixed, mix_outputs(f1, f2, alpha), stop_grad_b=stop_grad_target)


def vicinal_reg_loss(pairs: Sequence[tuple], stop_grad_target: bool = False) -> Tensor:
    """Sum over directed pairs of cosine_loss(virtual_out, individual_out)."""
    terms = [cosine_loss(v, ind, stop_grad_b=stop_grad_target) for v, ind in pairs]
    return _sum(terms)


def vicinal_sup_loss(triples: Sequence[tuple]) -> Tensor:
    """Sum over directions of sup_loss(virtual) + sup_loss(individual)."""
    terms = []
    for virtual_out, individual_out, scribble in triples:
        terms.append(sup_loss(virtual_out, scribble))
        terms.append(sup_loss(individual_out, scribble))
    return _sum(terms)


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return total


def total_loss(
    parts: dict,
    weights: Optional[dict] = None,
) -> tuple:
    """Sum the enabled loss parts and record the breakdown.

    ``parts`` maps part names (pce, inv, vicinal_sup, vicinal_reg) to scalar
    tensors or None for disabled parts. Weights default to 1 for every part.
    Returns ``(total_tensor, LossBreakdown)``.
    """
    weights = weights or {}
    values = {}
    total = None
    for name in ("pce", "inv", "vicinal_sup", "vicinal_reg"):
        t = parts.get(name)
        if t is None:
            values[name] = 0.0
            continue
        if not isinstance(t, Tensor):
            t = Tensor(np.asarray(t, dtype=np.float64))
        v = float(t.data)
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)
        w = float(weights.get(name, 1.0))
        term = t if w == 1.0 else dc.scalar_scale(t, w)
        values[name] = w * v
        total = term if total is None else dc.add(total, term)
    if total is None:
        total = Tensor(np.zeros((), dtype=np.float32))
    breakdown = LossBreakdown(
        inv=values["inv"], vicinal_sup=values["vicinal_sup"], vicinal_reg=values["vicinal_reg"],
        pce=values["pce"], total=sum(values.values()),
    )
    return total, breakdown
