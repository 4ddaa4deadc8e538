"""Small reverse-mode autodiff over numpy arrays.

Only the operations a 2-D U-Net needs are provided. Every op records a
closure that maps the output gradient to input gradients; ``Tensor.backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation's shape contract is violated."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``.grad``.

        ``grad`` seeds the output gradient; it defaults to ones, which for a
        scalar output is the usual dL/dL = 1.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += g
            # interior gradients are not needed after propagation
            if node._parents:
                node.grad = None


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op whose VJP is ``backward``.

    ``backward(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (n, c, h, w) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (n, c, h, w) with ``kernel`` (oc, c, kh, kw)."""
    _check4(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (out_c, in_c, kh, kw), got {kernel.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ShapeError(f"conv2d: kernel in_c={ic} does not match input channels c={c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got kh={kh}, kw={kw}")
    if bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out_c={oc}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    dtype = np.result_type(x.data, kernel.data)
    if stride == 1 and c >= _SHIFT_MIN_CHANNELS:
        out, backward = _conv_shift(x, kernel, bias, pad, dtype)
    else:
        out, backward = _conv_im2col(x, kernel, bias, stride, pad, dtype)
    return custom_op(out, (x, kernel, bias), backward)


# Convolutions with >= this many input channels use the shifted-GEMM path.
_SHIFT_MIN_CHANNELS = 4


def _padded_nhwc(x: np.ndarray, pad: int, dtype) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return xp


def _conv_shift(x: Tensor, kernel: Tensor, bias: Tensor, pad: int, dtype):
    """Stride-1 convolution as one GEMM per kernel tap.

    In a channels-last padded buffer flattened to (pixels, c), the input of
    tap (a, b) for every output pixel is the same buffer shifted by
    a * row_length + b rows, so each tap is a contiguous matrix product.
    Positions whose window wraps across a row or image edge are computed and
    then discarded.
    """
    n, c, h, w = x.shape
    oc, _, kh, kw = kernel.shape
    xp = _padded_nhwc(x.data, pad, dtype)
    _, hp, wp, _ = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    flat = xp.reshape(-1, c)
    total = flat.shape[0]
    span = total - ((kh - 1) * wp + (kw - 1))
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0), dtype=dtype)  # (kh, kw, c, oc)
    acc = np.zeros((total, oc), dtype=dtype)
    for a in range(kh):
        for b in range(kw):
            off = a * wp + b
            acc[:span] += flat[off:off + span] @ taps[a, b]
    valid = acc.reshape(n, hp, wp, oc)[:, :oh, :ow, :] + bias.data.astype(dtype)
    out = np.ascontiguousarray(valid).transpose(0, 3, 1, 2)

    def backward(g):
        g_full = np.zeros((n, hp, wp, oc), dtype=dtype)
        g_full[:, :oh, :ow, :] = g.transpose(0, 2, 3, 1)
        g_flat = g_full.reshape(-1, oc)[:span]
        gx = gk = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if kernel.requires_grad:
            gk_t = np.empty_like(taps)
            for a in range(kh):
                for b in range(kw):
                    off = a * wp + b
                    gk_t[a, b] = flat[off:off + span].T @ g_flat
            gk = gk_t.transpose(3, 2, 0, 1)
        if x.requires_grad:
            dx = np.zeros((total, c), dtype=dtype)
            for a in range(kh):
                for b in range(kw):
                    off = a * wp + b
                    dx[off:off + span] += g_flat @ taps[a, b].T
            gx = dx.reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return out, backward


def _conv_im2col(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, pad: int, dtype):
    n, c, h, w = x.shape
    oc, _, kh, kw = kernel.shape
    xp = _padded_nhwc(x.data, pad, dtype)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a, b, :] = xp[:, a:a + stride * oh:stride, b:b + stride * ow:stride, :]
    cols = cols.reshape(n * oh * ow, kh * kw * c)
    kmat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0), dtype=dtype).reshape(kh * kw * c, oc)
    out = (cols @ kmat + bias.data.astype(dtype)).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, oc)
        gx = gk = gb = None
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kh, kw, c, oc).transpose(3, 2, 0, 1)
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, oh, ow, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=dtype)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, a:a + stride * oh:stride, b:b + stride * ow:stride, :] += dcols[:, :, :, a, b, :]
            gx = dxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return out, backward


# --------------------------------------------------------------------------
# pointwise / structural ops


def channel_softmax(x: Tensor) -> Tensor:
    _check4(x, "channel_softmax")
    if x.shape[1] < 2:
        raise ShapeError(f"channel_softmax: need at least 2 channels, got {x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return custom_op(s, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,))


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2; trailing odd rows/columns are dropped."""
    _check4(x, "max_pool_2x2")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh == 0 or ow == 0:
        raise ShapeError(f"max_pool_2x2: spatial dims {h}x{w} too small")
    blocks = (
        x.data[:, :, : 2 * oh, : 2 * ow]
        .reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    idx = blocks.argmax(axis=-1)  # first occurrence in row-major order wins ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * oh, : 2 * ow] = (
            gb.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        )
        return (gx,)

    return custom_op(out, (x,), backward)


def nearest_upsample_2x2(x: Tensor) -> Tensor:
    _check4(x, "nearest_upsample_2x2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return custom_op(out, (x,), backward)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "channel_concat")
    _check4(b, "channel_concat")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"channel_concat: n, h, w must match, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return custom_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def scalar_scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return custom_op(x.data * x.data.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),))


def batch_take(x: Tensor, index: Sequence[int]) -> Tensor:
    """Reorder (or gather) samples along the batch axis."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data[index]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return custom_op(out, (x,), backward)


def dropout_apply(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout. The mask is drawn from ``rng`` only in training mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.data.dtype) * scale
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    op_name: str = "",
    seed: int = 0,
    wrt: Optional[Sequence[int]] = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    The output is reduced to a scalar through a fixed random projection
    ``L = sum(R * fn(*inputs))`` (scalar outputs use R = 1). For every entry
    of every checked input the derivative of L is estimated with a central
    difference and compared with the backpropagated gradient. The error of
    an input is normalised by the largest gradient magnitude of that input.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    name = op_name or getattr(fn, "__name__", "op")
    fail = GradCheckReport(name, math.inf, math.inf, False)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if not np.all(np.isfinite(out.data)):
        return fail
    proj = np.ones(out.shape) if out.data.ndim == 0 else np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(proj)

    def objective() -> float:
        val = fn(*[Tensor(a) for a in arrays]).data
        return float(np.sum(proj * val))

    worst_rel = worst_abs = 0.0
    for k in wrt:
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arrays[k])
        numeric = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = objective()
            flat[i] = orig - eps
            minus = objective()
            flat[i] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                return fail
            nflat[i] = (plus - minus) / (2 * eps)
        abs_err = float(np.max(np.abs(analytic - numeric))) if numeric.size else 0.0
        scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
        worst_abs = max(worst_abs, abs_err)
        worst_rel = max(worst_rel, abs_err / scale)
    return GradCheckReport(name, worst_rel, worst_abs, worst_rel < tol)
