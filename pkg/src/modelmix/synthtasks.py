"""Correlated synthetic segmentation tasks.

Each scene is a bright disk surrounded by a darker ring on a textured
background; small bright lesions sit inside the ring. The *structure* task
labels {background, disk, ring}; the *pathology* task labels
{background, lesion}. Lesions are as bright as the disk and the brighter
background patches, so finding them requires knowing where the ring is.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .losses import ScribbleMap

log = logging.getLogger(__name__)

UNLABELED_BYTE = 255
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ScribblePolicy:
    coverage_fraction: float = 0.1
    walk_thickness: int = 1
    min_pixels_per_class: int = 5

    def __post_init__(self):
        if not 0.0 < self.coverage_fraction <= 0.3:
            raise ValueError(f"coverage_fraction must lie in (0, 0.3], got {self.coverage_fraction}")
        if self.walk_thickness != 1:
            raise ValueError("only 1-pixel scribbles are supported")
        if self.min_pixels_per_class < 5:
            raise ValueError("min_pixels_per_class must be >= 5")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    n_labeled: int = 5
    n_unlabeled: int = 40
    n_val: int = 10
    n_test: int = 20
    noise: float = 0.1
    scribble: ScribblePolicy = field(default_factory=ScribblePolicy)

    def __post_init__(self):
        if self.size < 32 or self.size % 4:
            raise ValueError(f"size must be a multiple of 4 and >= 32, got {self.size}")
        if self.n_labeled < 1:
            raise ValueError("need at least one labeled training image")
        if min(self.n_unlabeled, self.n_val, self.n_test) < 0:
            raise ValueError("item counts must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class Item:
    id: str
    image: np.ndarray  # float32 (h, w) in [0, 1], multiples of 1/255
    label: np.ndarray  # int64 (h, w) class ids
    scribble: np.ndarray  # int64 (h, w); num_classes = unlabeled
    split: str
    labeled: bool


@dataclass
class TaskDataset:
    name: str
    num_classes: int
    items: List[Item]

    @property
    def image_size(self) -> Tuple[int, int]:
        return tuple(self.items[0].image.shape) if self.items else (0, 0)

    @property
    def labeled_ids(self) -> List[str]:
        return [it.id for it in self.items if it.split == "train" and it.labeled]

    def split(self, name: str) -> List[Item]:
        return [it for it in self.items if it.split == name]

    def scribble_map(self, item: Item) -> ScribbleMap:
        return ScribbleMap(item.scribble, self.num_classes)

    def without_labels(self) -> "TaskDataset":
        """Copy in which every training item is unlabeled."""
        items = []
        for it in self.items:
            if it.split == "train" and it.labeled:
                blank = np.full_like(it.scribble, self.num_classes)
                it = Item(it.id, it.image, it.label, blank, it.split, False)
            items.append(it)
        return TaskDataset(self.name, self.num_classes, items)


# --------------------------------------------------------------------------
# scene rendering


@dataclass
class Scene:
    disk: np.ndarray
    ring: np.ndarray
    lesion: np.ndarray
    image: np.ndarray


def render_scene(rng: np.random.Generator, size: int, noise: float) -> Scene:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    r_in = rng.uniform(0.13, 0.18) * size
    thick = rng.uniform(0.08, 0.11) * size
    stretch = rng.uniform(0.85, 1.15)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    dist = np.sqrt((u * stretch) ** 2 + (v / stretch) ** 2)
    disk = dist < r_in
    ring = (dist >= r_in) & (dist < r_in + thick)

    lesion = np.zeros_like(ring)
    for _ in range(int(rng.integers(1, 4))):
        ang = rng.uniform(0, 2 * np.pi)
        rm = r_in + thick / 2
        ly = cy + rm * np.cos(ang) / stretch * np.cos(theta) - rm * np.sin(ang) * stretch * np.sin(theta)
        lx = cx + rm * np.cos(ang) / stretch * np.sin(theta) + rm * np.sin(ang) * stretch * np.cos(theta)
        lr = rng.uniform(0.9, 1.4) * thick
        lesion |= ((yy - ly) ** 2 + (xx - lx) ** 2 < lr ** 2) & ring

    # background: smooth texture with bright patches in the lesion range
    tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    bg_level = rng.uniform(0.25, 0.4)
    img = bg_level + 0.18 * tex
    img[ring] = rng.uniform(0.12, 0.22)
    img[disk] = rng.uniform(0.65, 0.8)
    img[lesion] = rng.uniform(0.65, 0.8)
    img = ndimage.gaussian_filter(img, sigma=0.6)
    img = img + noise * rng.standard_normal((size, size))
    return Scene(disk, ring, lesion, img)


def quantize(image: np.ndarray) -> np.ndarray:
    lo, hi = image.min(), image.max()
    scaled = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    return (np.round(scaled * 255) / 255).astype(np.float32)


def structure_label(scene: Scene) -> np.ndarray:
    lab = np.zeros(scene.disk.shape, dtype=np.int64)
    lab[scene.disk] = 1
    lab[scene.ring] = 2
    return lab


def pathology_label(scene: Scene) -> np.ndarray:
    return scene.lesion.astype(np.int64)


# --------------------------------------------------------------------------
# scribbles

_NEIGHBOURS = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)])


def _walk(region: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    """Self-avoiding walk with heading persistence, restarted when stuck."""
    h, w = region.shape
    visited = np.zeros_like(region)
    depth = ndimage.distance_transform_edt(region)
    count = 0
    while count < target:
        free = region & ~visited
        if not free.any():
            break
        # start deep inside the remaining region
        d = np.where(free, depth, 0)
        cand = np.argwhere(d >= max(1.0, 0.5 * d.max()))
        y, x = cand[int(rng.integers(len(cand)))]
        heading = rng.uniform(0, 2 * np.pi)
        while True:
            visited[y, x] = True
            count += 1
            if count >= target:
                break
            heading += rng.normal(0, 0.35)
            best, best_score = None, -np.inf
            for dy, dx in _NEIGHBOURS:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and region[ny, nx] and not visited[ny, nx]:
                    score = (dy * np.sin(heading) + dx * np.cos(heading)) / np.hypot(dy, dx)
                    if score > best_score:
                        best, best_score = (ny, nx), score
            if best is None:
                break
            y, x = best
    return visited


def scribblize(full_label: np.ndarray, num_classes: int, policy: ScribblePolicy,
               rng: np.random.Generator) -> Tuple[ScribbleMap, List[int]]:
    """Draw one thin in-region scribble per class.

    Returns the scribble map and the list of classes skipped because their
    region is too small to hold ``min_pixels_per_class`` within the 30%
    coverage bound.
    """
    out = np.full(full_label.shape, num_classes, dtype=np.int64)
    skipped = []
    for c in range(num_classes):
        region = full_label == c
        size = int(region.sum())
        target = min(max(policy.min_pixels_per_class, int(round(policy.coverage_fraction * size))),
                     int(0.3 * size))
        if target < policy.min_pixels_per_class:
            skipped.append(c)
            continue
        out[_walk(region, target, rng)] = c
    if skipped:
        log.warning("scribblize: classes %s too small, skipped", skipped)
    return ScribbleMap(out, num_classes), skipped


# --------------------------------------------------------------------------
# task pair


def _make_task(name: str, num_classes: int, labeler, cfg: SynthConfig, rng: np.random.Generator) -> TaskDataset:
    plan = (
        [("train", True)] * cfg.n_labeled
        + [("train", False)] * cfg.n_unlabeled
        + [("val", False)] * cfg.n_val
        + [("test", False)] * cfg.n_test
    )
    items = []
    for k, (split, labeled) in enumerate(plan):
        scene_rng, scribble_rng = rng.spawn(2)
        for _ in range(100):
            scene = render_scene(scene_rng, cfg.size, cfg.noise)
            label = labeler(scene)
            if not labeled:
                scribble = np.full(label.shape, num_classes, dtype=np.int64)
                break
            smap, skipped = scribblize(label, num_classes, cfg.scribble, scribble_rng)
            if not skipped:
                scribble = smap.labels
                break
        else:  # pragma: no cover - scenes essentially always hold every class
            raise RuntimeError(f"{name}: could not draw a scene containing every class")
        items.append(Item(f"{name}_{k:03d}", quantize(scene.image), label, scribble, split, labeled))
    return TaskDataset(name, num_classes, items)


def generate_task_pair(seed: int, cfg: Optional[SynthConfig] = None) -> Tuple[TaskDataset, TaskDataset]:
    """Deterministic (structure, pathology) datasets for ``seed``.

    The two tasks draw independent scenes from the same scene family.
    """
    cfg = cfg or SynthConfig()
    s_rng, p_rng = np.random.default_rng(seed).spawn(2)
    structure = _make_task("structure", 3, structure_label, cfg, s_rng)
    pathology = _make_task("pathology", 2, pathology_label, cfg, p_rng)
    return structure, pathology


# --------------------------------------------------------------------------
# IO


class DatasetError(ValueError):
    pass


def write_pgm(path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: expected 8-bit PGM, maxval {maxval}")
    body = raw[pos:]
    if len(body) != w * h:
        raise DatasetError(f"{path}: truncated or oversized pixel data ({len(body)} bytes, expected {w * h})")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _class_bytes(a: np.ndarray, num_classes: int) -> np.ndarray:
    out = a.astype(np.int64).copy()
    out[out == num_classes] = UNLABELED_BYTE
    return out.astype(np.uint8)


def write_dataset(ds: TaskDataset, directory) -> Path:
    root = Path(directory)
    for sub in ("images", "labels", "scribbles"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if ds.num_classes >= UNLABELED_BYTE:
        raise DatasetError("too many classes for 8-bit label files")
    entries = []
    for it in ds.items:
        rel = {k: f"{k}/{it.id}.pgm" for k in ("images", "labels", "scribbles")}
        write_pgm(root / rel["images"], np.round(it.image * 255))
        write_pgm(root / rel["labels"], _class_bytes(it.label, ds.num_classes))
        write_pgm(root / rel["scribbles"], _class_bytes(it.scribble, ds.num_classes))
        entries.append({"id": it.id, "image": rel["images"], "label": rel["labels"],
                        "scribble": rel["scribbles"], "split": it.split, "labeled": it.labeled})
    manifest = {"name": ds.name, "num_classes": ds.num_classes,
                "image_size": list(ds.image_size), "items": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def read_dataset(directory) -> TaskDataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
        name = manifest["name"]
        k = int(manifest["num_classes"])
        h, w = (int(v) for v in manifest["image_size"])
        entries = manifest["items"]
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest {mpath}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"corrupt manifest {mpath}: {exc}") from exc

    items, max_label = [], -1
    for e in entries:
        try:
            image = read_pgm(root / e["image"])
            label = read_pgm(root / e["label"]).astype(np.int64)
            scribble = read_pgm(root / e["scribble"]).astype(np.int64)
            split, labeled = e["split"], bool(e["labeled"])
        except KeyError as exc:
            raise DatasetError(f"corrupt manifest {mpath}: item lacks {exc}") from exc
        for what, a in (("image", image), ("label", label), ("scribble", scribble)):
            if a.shape != (h, w):
                raise DatasetError(f"{e[what]}: shape {a.shape} differs from manifest image_size {(h, w)}")
        if split not in SPLITS:
            raise DatasetError(f"item {e['id']}: unknown split {split!r}")
        if np.any(label == UNLABELED_BYTE):
            raise DatasetError(f"{e['label']}: dense label contains the unlabeled value")
        scribble[scribble == UNLABELED_BYTE] = k
        if scribble.max() > k:
            raise DatasetError(f"{e['scribble']}: class id {scribble.max()} >= num_classes {k}")
        max_label = max(max_label, int(label.max()))
        items.append(Item(e["id"], (image / 255.0).astype(np.float32), label, scribble, split, labeled))
    if items and max_label + 1 != k:
        raise DatasetError(f"{mpath}: num_classes={k} but labels hold classes 0..{max_label}")
    return TaskDataset(name, k, items)


def datasets_equal(a: TaskDataset, b: TaskDataset) -> bool:
    if (a.name, a.num_classes, len(a.items)) != (b.name, b.num_classes, len(b.items)):
        return False
    for x, y in zip(a.items, b.items):
        if (x.id, x.split, x.labeled) != (y.id, y.split, y.labeled):
            return False
        if not (np.array_equal(x.image, y.image) and np.array_equal(x.label, y.label)
                and np.array_equal(x.scribble, y.scribble)):
            return False
    return True


def config_dict(cfg: SynthConfig) -> Dict:
    return asdict(cfg)
