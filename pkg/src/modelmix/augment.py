"""Image-level perturbations: cutout, mixup, geometric transforms, scaling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class CutoutSpec:
    side_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.side_fraction < 1.0:
            raise ValueError(f"side_fraction must lie in (0, 1), got {self.side_fraction}")

    def side(self, h: int, w: int) -> int:
        return int(round(self.side_fraction * min(h, w)))


def cutout(x: np.ndarray, spec: CutoutSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Zero one random in-bounds square of ``x`` (..., h, w).

    Returns the cut image and the binary keep-mask (0 inside the square).
    """
    h, w = x.shape[-2:]
    side = spec.side(h, w)
    if side > h or side > w:
        raise ValueError(f"cutout side {side} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    mask = np.ones((h, w), dtype=x.dtype)
    mask[top:top + side, left:left + side] = 0
    return x * mask, mask


def mixup_images(x1_c: np.ndarray, x2_c: np.ndarray, alpha: float) -> np.ndarray:
    if x1_c.shape != x2_c.shape:
        raise ValueError(f"mixup_images: shapes differ, {x1_c.shape} vs {x2_c.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return x1_c.copy()
    if alpha == 0.0:
        return x2_c.copy()
    return alpha * x1_c + (1.0 - alpha) * x2_c


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def _resize_nearest(a: np.ndarray, h: int, w: int) -> np.ndarray:
    # pixel-centre sampling, matching _resize_bilinear
    rows = ((2 * np.arange(h) + 1) * a.shape[0]) // (2 * h)
    cols = ((2 * np.arange(w) + 1) * a.shape[1]) // (2 * w)
    return a[rows[:, None], cols[None, :]]


@dataclass(frozen=True)
class GeomDraw:
    quarter_turns: int = 0
    flip: bool = False
    crop: Optional[Tuple[int, int, int, int]] = None  # top, left, height, width

    @property
    def is_identity(self) -> bool:
        return self.quarter_turns == 0 and not self.flip and self.crop is None


def draw_geom(rng: np.random.Generator, h: int, w: int, min_crop_area: float = 0.75) -> GeomDraw:
    turns = int(rng.integers(0, 4))
    if h != w:
        turns = 2 * (turns % 2)  # quarter turns would change the shape
    flip = bool(rng.integers(0, 2))
    scale = float(np.sqrt(rng.uniform(min_crop_area, 1.0)))
    ch, cw = max(1, int(round(scale * h))), max(1, int(round(scale * w)))
    if ch == h and cw == w:
        return GeomDraw(turns, flip, None)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return GeomDraw(turns, flip, (top, left, ch, cw))


def apply_geom(a: np.ndarray, draw: GeomDraw, nearest: bool = True) -> np.ndarray:
    """Apply a geometric draw to a 2-D array; output keeps the input size."""
    h, w = a.shape
    out = np.rot90(a, draw.quarter_turns)
    if draw.flip:
        out = out[:, ::-1]
    if draw.crop is not None:
        top, left, ch, cw = draw.crop
        out = out[top:top + ch, left:left + cw]
        if nearest:
            out = _resize_nearest(out, h, w)
        else:
            out = _resize_bilinear(out, h, w)
    return np.ascontiguousarray(out)


def _resize_bilinear(a: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5) * a.shape[0] / h - 0.5
    xs = (np.arange(w) + 0.5) * a.shape[1] / w - 0.5
    ys = np.clip(ys, 0, a.shape[0] - 1)
    xs = np.clip(xs, 0, a.shape[1] - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, a.shape[0] - 1)
    x1 = np.minimum(x0 + 1, a.shape[1] - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(a.dtype)


def geom_augment(image: np.ndarray, full_label: np.ndarray, scribble: np.ndarray,
                 rng: np.random.Generator, draw: Optional[GeomDraw] = None):
    """Rotate by a right angle, optionally flip, crop and resize back.

    The same draw is applied to all three arrays. Labels and scribbles use
    nearest-neighbour resampling so no new class ids appear; the image is
    resampled bilinearly.
    """
    if not image.shape == full_label.shape == scribble.shape:
        raise ValueError(f"geom_augment: shapes differ {image.shape}, {full_label.shape}, {scribble.shape}")
    if draw is None:
        draw = draw_geom(rng, *image.shape)
    return (
        apply_geom(image, draw, nearest=False),
        apply_geom(full_label, draw),
        apply_geom(scribble, draw),
    )
