"""ModelMix training over a pair of tasks, plus the component ablation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .augment import CutoutSpec, cutout, geom_augment, mixup_images, normalize_intensity
from .checkpoint import save_model
from .diffcore import Tensor
from .losses import (
    LossBreakdown,
    NonFiniteLoss,
    ScribbleMap,
    cosine_loss,
    mix_outputs,
    partial_ce,
    total_loss,
    vicinal_reg_loss,
    vicinal_sup_loss,
)
from .metrics import evaluate
from .mixer import BetaParams, MixPlan, build_virtual_encoder, sample_lambda, sample_plan
from .nets import LayerAddress, SegModel, UNetConfig, build_model, forward
from .synthtasks import Item, TaskDataset, read_dataset

log = logging.getLogger(__name__)

# loss parts switched on by each component-ablation variant
VARIANT_PARTS = {
    1: frozenset({"pce"}),
    2: frozenset({"pce", "inv"}),
    3: frozenset({"inv", "vicinal_sup"}),
    4: frozenset({"inv", "vicinal_sup", "vicinal_reg"}),
    5: frozenset({"pce", "inv"}),
}
SHARED_ENCODER_VARIANTS = frozenset({5})


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    task_pairs: List[Tuple[str, str]] = field(default_factory=list)
    unet: UNetConfig = field(default_factory=UNetConfig)
    beta_lambda: BetaParams = field(default_factory=BetaParams)
    beta_alpha: BetaParams = field(default_factory=BetaParams)
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    variant: int = 4
    stop_gradient_targets: bool = False
    cutout: CutoutSpec = field(default_factory=CutoutSpec)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    geom_augment: bool = True
    mix_layers: int = 1
    loss_weights: Dict[str, float] = field(default_factory=dict)
    eval_every: int = 1
    labeled_fraction: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANT_PARTS:
            raise ValueError(f"variant must be one of {sorted(VARIANT_PARTS)}, got {self.variant}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("lr, batch_size, epochs and eval_every must be positive")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must lie in [0, 1], got {self.labeled_fraction}")
        if self.mix_layers < 1:
            raise ValueError("mix_layers must be >= 1")
        if len(self.task_pairs) > 1:
            raise ValueError("only a single task pair is supported")
        self.task_pairs = [tuple(p) for p in self.task_pairs]

    @property
    def parts(self) -> frozenset:
        return VARIANT_PARTS[self.variant]

    @property
    def shared_encoder(self) -> bool:
        return self.variant in SHARED_ENCODER_VARIANTS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_pairs"] = [list(p) for p in self.task_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        nested = {"unet": UNetConfig, "beta_lambda": BetaParams, "beta_alpha": BetaParams,
                  "cutout": CutoutSpec, "optimizer": AdamConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = nested[k](**v) if k in nested and isinstance(v, dict) else v
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, cfg: AdamConfig = AdamConfig()):
        uniq, seen = [], set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                uniq.append(p)
        self.params = uniq
        self.lr = lr
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in uniq]
        self.v = [np.zeros_like(p.data) for p in uniq]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: np.ndarray  # (n, 1, h, w) after geometric aug, normalisation and cutout
    scribble: ScribbleMap
    mixed: np.ndarray  # (n, 1, h, w) intra-task mixup of ``images``
    perm: np.ndarray
    alpha: float
    ids: List[str]


def prepare_batch(items: Sequence[Item], num_classes: int, cfg: TrainConfig,
                  rng: np.random.Generator) -> Batch:
    imgs, scribs = [], []
    for it in items:
        img, scr = it.image, it.scribble
        if cfg.geom_augment:
            img, _, scr = geom_augment(img, it.label, scr, rng)
        img = normalize_intensity(img).astype(np.float32)
        img, _ = cutout(img, cfg.cutout, rng)
        imgs.append(img)
        scribs.append(scr)
    images = np.stack(imgs)[:, None]
    perm = rng.permutation(len(items))
    alpha = sample_lambda(cfg.beta_alpha, rng)
    mixed = mixup_images(images, images[perm], alpha).astype(np.float32)
    return Batch(images, ScribbleMap(np.stack(scribs), num_classes), mixed, perm, alpha,
                 [it.id for it in items])


class _Stream:
    """Endless reshuffled pass over training items."""

    def __init__(self, items: Sequence[Item], rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self.order: List[int] = []

    def take(self, k: int) -> List[Item]:
        out = []
        while len(out) < k:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self.order.pop(0)])
        return out


class _TwoStream:
    """Batches with a fixed share of scribble-labeled items.

    With 5 labeled among 45 training images, uniform sampling would leave
    most batches without any annotated pixel.
    """

    def __init__(self, items: Sequence[Item], labeled_fraction: float, rng: np.random.Generator):
        lab = [it for it in items if it.labeled]
        unl = [it for it in items if not it.labeled]
        r_l, r_u = rng.spawn(2)
        self.lab = _Stream(lab, r_l) if lab else None
        self.unl = _Stream(unl, r_u) if unl else None
        self.frac = labeled_fraction

    def take(self, k: int) -> List[Item]:
        if self.lab is None:
            return self.unl.take(k)
        if self.unl is None:
            return self.lab.take(k)
        n_lab = min(k, max(1, int(round(self.frac * k)))) if self.frac > 0 else 0
        return self.lab.take(n_lab) + self.unl.take(k - n_lab)


# --------------------------------------------------------------------------
# one step


@dataclass
class StepInfo:
    breakdown: LossBreakdown
    plans: List[MixPlan]


def _fresh(rng: np.random.Generator) -> np.random.Generator:
    return copy.deepcopy(rng)


def train_step(
    model_i: SegModel,
    model_j: SegModel,
    batch_i: Batch,
    batch_j: Batch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: Optional[Adam] = None,
    force_lambda: Optional[float] = None,
) -> StepInfo:
    """Compute the variant's objective on one batch per task and update.

    The individual and virtual forwards of a task reuse the same dropout
    masks, so the vicinal terms measure only the effect of parameter mixing.
    """
    parts = cfg.parts
    models = (model_i, model_j)
    batches = (batch_i, batch_j)
    pce_terms, inv_terms, vsup, vreg, plans = [], [], [], [], []
    for t, (model, other, batch) in enumerate(zip(models, models[::-1], batches)):
        x = Tensor(batch.images)
        drop_rng = rng.spawn(1)[0]
        out = forward(model, x, True, _fresh(drop_rng))
        if "pce" in parts:
            pce_terms.append(partial_ce(out, batch.scribble))
        if "inv" in parts:
            f_mixed = forward(model, Tensor(batch.mixed), True, rng)
            target = mix_outputs(out, dc.batch_take(out, batch.perm), batch.alpha)
            inv_terms.append(cosine_loss(f_mixed, target, stop_grad_b=cfg.stop_gradient_targets))
        if "vicinal_sup" in parts or "vicinal_reg" in parts:
            plan = sample_plan(model, other, cfg.beta_lambda, rng, cfg.mix_layers)
            if force_lambda is not None:
                plan = replace(plan, lam=float(force_lambda))
            plans.append(plan)
            view = build_virtual_encoder(model, other, plan)
            vout = forward(model, x, True, _fresh(drop_rng), encoder=view)
            if "vicinal_sup" in parts:
                vsup.append((vout, out, batch.scribble))
            if "vicinal_reg" in parts:
                vreg.append((vout, out))

    def _sum(ts):
        s = ts[0]
        for t_ in ts[1:]:
            s = dc.add(s, t_)
        return s

    loss_parts = {
        "pce": _sum(pce_terms) if pce_terms else None,
        "inv": _sum(inv_terms) if inv_terms else None,
        "vicinal_sup": vicinal_sup_loss(vsup) if vsup else None,
        "vicinal_reg": vicinal_reg_loss(vreg, stop_grad_target=cfg.stop_gradient_targets) if vreg else None,
    }
    try:
        total, breakdown = total_loss(loss_parts, cfg.loss_weights)
    except NonFiniteLoss as exc:
        dump = {
            "part": exc.part,
            "parts": {k: (None if v is None else float(v.data)) for k, v in loss_parts.items()},
            "plans": [{"lambda": p.lam, "layers": [asdict(a) for a in p.layers]} for p in plans],
        }
        raise TrainingDiverged(f"non-finite loss: {exc}; dump={json.dumps(dump)}", dump) from exc

    if optimizer is not None:
        optimizer.zero_grad()
        if total.requires_grad:
            total.backward()
        optimizer.step()
    return StepInfo(breakdown, plans)


# --------------------------------------------------------------------------
# full training


@dataclass
class TrainHistory:
    steps: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.json").write_text(json.dumps({"steps": self.steps, "epochs": self.epochs}, indent=1))
        with open(out / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["step", "epoch", "pce", "inv", "vicinal_sup", "vicinal_reg", "total"]
            w.writerow(cols)
            for row in self.steps:
                w.writerow([row[c] if c in ("step", "epoch") else repr(row[c]) for c in cols])
        # timing is kept apart so history.json stays reproducible byte for byte
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock}))


@dataclass
class TrainResult:
    checkpoints: Dict[str, Path]
    history: TrainHistory
    models: Dict[str, SegModel]
    best_val: Dict[str, float]


def build_pair(cfg: TrainConfig, ds_i: TaskDataset, ds_j: TaskDataset,
               rng: np.random.Generator) -> Tuple[SegModel, SegModel]:
    ucfg_i = replace(cfg.unet, num_classes=ds_i.num_classes)
    ucfg_j = replace(cfg.unet, num_classes=ds_j.num_classes)
    model_i = build_model(ucfg_i, ds_i.name, rng)
    model_j = build_model(ucfg_j, ds_j.name, rng)
    if cfg.shared_encoder:
        model_j.encoder = model_i.encoder
    return model_i, model_j


def load_pair(cfg: TrainConfig) -> Tuple[TaskDataset, TaskDataset]:
    if not cfg.task_pairs:
        raise ValueError("TrainConfig.task_pairs is empty")
    dir_i, dir_j = cfg.task_pairs[0]
    return read_dataset(dir_i), read_dataset(dir_j)


def train(cfg: TrainConfig, out_dir, datasets: Optional[Tuple[TaskDataset, TaskDataset]] = None) -> TrainResult:
    """Train both task models; keep the best-validation checkpoint per task."""
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds_i, ds_j = datasets if datasets is not None else load_pair(cfg)
    for ds in (ds_i, ds_j):
        if not ds.split("train"):
            raise ValueError(f"dataset {ds.name} has no training items")
        if not ds.labeled_ids:
            log.warning("dataset %s has no scribble-labeled items; supervised terms will be 0", ds.name)

    root = np.random.default_rng(cfg.seed)
    init_rng, data_rng, aug_rng, step_rng = root.spawn(4)
    model_i, model_j = build_pair(cfg, ds_i, ds_j, init_rng)
    params = model_i.parameters() + model_j.parameters()
    opt = Adam(params, cfg.lr, cfg.optimizer)

    train_i, train_j = ds_i.split("train"), ds_j.split("train")
    s_i, s_j = data_rng.spawn(2)
    stream_i = _TwoStream(train_i, cfg.labeled_fraction, s_i)
    stream_j = _TwoStream(train_j, cfg.labeled_fraction, s_j)
    steps_per_epoch = math.ceil(max(len(train_i), len(train_j)) / cfg.batch_size)

    history = TrainHistory()
    best = {ds_i.name: -math.inf, ds_j.name: -math.inf}
    ckpts = {ds_i.name: out / f"best_{ds_i.name}.mmck", ds_j.name: out / f"best_{ds_j.name}.mmck"}
    best_state = {}
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            b_i = prepare_batch(stream_i.take(cfg.batch_size), ds_i.num_classes, cfg, aug_rng)
            b_j = prepare_batch(stream_j.take(cfg.batch_size), ds_j.num_classes, cfg, aug_rng)
            try:
                info = train_step(model_i, model_j, b_i, b_j, cfg, step_rng, opt)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"step {step}: {exc}", {**exc.dump, "step": step}) from exc
            history.steps.append({"step": step, "epoch": epoch, **info.breakdown.as_dict()})
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            record = {"epoch": epoch}
            for model, ds in ((model_i, ds_i), (model_j, ds_j)):
                val = ds.split("val") or ds.split("train")
                report = evaluate(model, TaskDataset(ds.name, ds.num_classes, val), split=val[0].split)
                record[ds.name] = report.summary()
                if report.mean_dice > best[ds.name]:
                    best[ds.name] = report.mean_dice
                    best_state[ds.name] = {k: v.copy() for k, v in model.state_dict().items()}
                    save_model(ckpts[ds.name], model, {"epoch": epoch, "val_mean_dice": report.mean_dice,
                                                       "variant": cfg.variant, "seed": cfg.seed})
            history.epochs.append(record)
            log.info("epoch %d: %s", epoch, {k: v["mean_dice"] for k, v in record.items() if k != "epoch"})
    history.wall_clock = time.perf_counter() - start
    history.write(out)
    cfg.save(out / "config.json")

    best_models = {}
    for model, ds in ((model_i, ds_i), (model_j, ds_j)):
        m = build_model(model.cfg, ds.name, np.random.default_rng(0))
        m.load_state_dict(best_state[ds.name])
        best_models[ds.name] = m
    return TrainResult(ckpts, history, best_models, best)


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    variant: int
    # task -> class -> (mean, std) of per-item test Dice pooled over seeds
    per_class: Dict[str, Dict[int, Tuple[float, float]]]
    task_avg: Dict[str, float]
    seed_scores: List[float]

    @property
    def score(self) -> float:
        return float(np.mean(self.seed_scores))


@dataclass
class AblationTable:
    rows: List[AblationRow]
    task_names: List[str]
    class_counts: Dict[str, int]

    def row(self, variant: int) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def header(self) -> List[str]:
        cols = ["variant"]
        for t in self.task_names:
            cols += [f"{t}_class{c}" for c in range(1, self.class_counts[t])] + [f"{t}_avg"]
        return cols + ["score"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for r in self.rows:
                cells = [f"#{r.variant}"]
                for t in self.task_names:
                    cells += [f"{r.per_class[t][c][0]:.3f}±{r.per_class[t][c][1]:.3f}"
                              for c in range(1, self.class_counts[t])]
                    cells.append(f"{r.task_avg[t]:.3f}")
                cells.append(f"{r.score:.4f}")
                w.writerow(cells)

    def format(self) -> str:
        lines = [" | ".join(self.header())]
        for r in self.rows:
            cells = [f"#{r.variant}"]
            for t in self.task_names:
                cells += [f"{r.per_class[t][c][0]:.3f}±{r.per_class[t][c][1]:.3f}"
                          for c in range(1, self.class_counts[t])]
                cells.append(f"{r.task_avg[t]:.3f}")
            cells.append(f"{r.score:.4f}")
            lines.append(" | ".join(cells))
        return "\n".join(lines)


def run_single(cfg: TrainConfig, out_dir, datasets) -> dict:
    """Train one (variant, seed) and evaluate the best checkpoints on test."""
    result = train(cfg, out_dir, datasets)
    scores, reports = [], {}
    for ds in datasets:
        rep = evaluate(result.models[ds.name], ds, "test")
        rep.write(Path(out_dir) / f"test_{ds.name}.csv")
        reports[ds.name] = rep
        scores.append(rep.mean_dice)
    return {"variant": cfg.variant, "seed": cfg.seed, "score": float(np.mean(scores)),
            "reports": reports}


def run_ablation(base_cfg: TrainConfig, variants: Sequence[int], seeds: Sequence[int], out_dir,
                 datasets: Optional[Tuple[TaskDataset, TaskDataset]] = None) -> AblationTable:
    """Train every (variant, seed) and tabulate test Dice per class.

    A run's score is the mean of the two tasks' foreground-mean Dice; the
    row score averages it over seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = datasets if datasets is not None else load_pair(base_cfg)
    names = [ds.name for ds in datasets]
    rows = []
    for v in sorted(set(variants)):
        runs = []
        for s in seeds:
            cfg = replace(base_cfg, variant=v, seed=s)
            res = run_single(cfg, out / f"variant{v}_seed{s}", datasets)
            log.info("variant %d seed %d: score %.4f", v, s, res["score"])
            runs.append(res)
        per_class, task_avg = {}, {}
        for ds in datasets:
            per_class[ds.name] = {}
            for c in range(1, ds.num_classes):
                d = [row["dice"] for r in runs for row in r["reports"][ds.name].per_item if row["class"] == c]
                per_class[ds.name][c] = (float(np.mean(d)), float(np.std(d)))
            task_avg[ds.name] = float(np.mean([r["reports"][ds.name].mean_dice for r in runs]))
        rows.append(AblationRow(v, per_class, task_avg, [r["score"] for r in runs]))
    table = AblationTable(rows, names, {ds.name: ds.num_classes for ds in datasets})
    table.write_csv(out / "ablation.csv")
    (out / "ablation.json").write_text(json.dumps(
        {"rows": [{"variant": r.variant, "score": r.score, "seed_scores": r.seed_scores,
                   "task_avg": r.task_avg} for r in rows]}, indent=2))
    return table
