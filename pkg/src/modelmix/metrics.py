"""Dice and Hausdorff evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Union

import numpy as np
from scipy import ndimage

from .diffcore import Tensor


def _check_pair(pred: np.ndarray, gt: np.ndarray, op: str) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"{op}: mask shapes differ, {pred.shape} vs {gt.shape}")


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    _check_pair(p, g, "dice_score")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    # distance from every pixel to the nearest foreground pixel of dst
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].max())


def hausdorff(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Symmetric Hausdorff distance in pixels.

    Two empty masks give 0. If only one is empty the image diagonal is
    returned as a finite stand-in for infinity.
    """
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    _check_pair(p, g, "hausdorff")
    has_p, has_g = p.any(), g.any()
    if not has_p and not has_g:
        return 0.0
    if not (has_p and has_g):
        return float(math.hypot(*p.shape))
    return max(_directed(p, g), _directed(g, p))


@dataclass
class ClassStats:
    dice_mean: float
    dice_std: float
    hd_mean: float
    hd_std: float


@dataclass
class MetricReport:
    num_classes: int
    per_class: Dict[int, ClassStats]
    mean_dice: float
    mean_hd: float
    per_item: List[dict] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "mean_dice": self.mean_dice,
            "mean_hd": self.mean_hd,
            "per_class": {str(c): vars(s) for c, s in self.per_class.items()},
            "counts": self.counts,
        }

    def write(self, csv_path, json_path=None) -> None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "class", "dice", "hd"])
            for row in self.per_item:
                w.writerow([row["item_id"], row["class"], repr(row["dice"]), repr(row["hd"])])
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        json_path.write_text(json.dumps(self.summary(), indent=2))


Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(model) -> Predictor:
    """Wrap a SegModel as images (n, h, w) -> probabilities (n, k, h, w).

    Images get the same per-image min-max scaling the trainer applies.
    """
    from .augment import normalize_intensity
    from .nets import forward

    def predict(images: np.ndarray) -> np.ndarray:
        x = Tensor(np.stack([normalize_intensity(im) for im in images])[:, None].astype(np.float32))
        return forward(model, x, training=False).data

    predict.num_classes = model.cfg.num_classes
    return predict


def evaluate(model_or_predictor, dataset, split: str = "test", batch_size: int = 16) -> MetricReport:
    """Argmax segmentation metrics per item and per foreground class.

    Ties in the argmax resolve to the lowest class id. Class aggregates are
    mean and (population) std over items; the report means average the
    foreground classes only.
    """
    from .nets import SegModel

    if isinstance(model_or_predictor, SegModel):
        if model_or_predictor.cfg.num_classes != dataset.num_classes:
            raise ValueError(
                f"model predicts {model_or_predictor.cfg.num_classes} classes, "
                f"dataset {dataset.name} has {dataset.num_classes}"
            )
        predict = model_predictor(model_or_predictor)
    else:
        predict = model_or_predictor
    items = dataset.split(split)
    k = dataset.num_classes
    rows = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        probs = np.asarray(predict(np.stack([it.image for it in chunk])))
        if probs.shape[1] != k:
            raise ValueError(f"predictor returned {probs.shape[1]} classes, dataset has {k}")
        pred = probs.argmax(axis=1)
        for it, pm in zip(chunk, pred):
            for c in range(1, k):
                rows.append({"item_id": it.id, "class": c,
                             "dice": dice_score(pm == c, it.label == c),
                             "hd": hausdorff(pm == c, it.label == c)})
    per_class = {}
    for c in range(1, k):
        d = np.array([r["dice"] for r in rows if r["class"] == c])
        h = np.array([r["hd"] for r in rows if r["class"] == c])
        per_class[c] = ClassStats(float(d.mean()), float(d.std()), float(h.mean()), float(h.std())) if d.size else \
            ClassStats(math.nan, math.nan, math.nan, math.nan)
    mean_dice = float(np.mean([s.dice_mean for s in per_class.values()]))
    mean_hd = float(np.mean([s.hd_mean for s in per_class.values()]))
    return MetricReport(k, per_class, mean_dice, mean_hd, rows, {"items": len(items), "classes": k - 1})
