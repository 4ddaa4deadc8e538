"""Command-line entry point: ``modelmix <command> ...``.

Exit codes: 0 success, 1 validation error (bad flags, missing or invalid
input files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_model
from .metrics import evaluate, model_predictor
from .synthtasks import DatasetError, SynthConfig, generate_task_pair, read_dataset, write_dataset, write_pgm

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("modelmix")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {p}")
    return p


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modelmix", description="Cross-task encoder mixing for scribble-supervised segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic structure/pathology task pair")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--labeled", type=int, default=5)
    g.add_argument("--unlabeled", type=int, default=40)
    g.add_argument("--val", type=int, default=10)
    g.add_argument("--test", type=int, default=20)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.1)

    t = sub.add_parser("train", help="train both task models of one config")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="run the component ablation")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", type=_int_list, default=[1, 2, 3, 4, 5])
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    a.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", default="all", choices=["linearity", "gradients", "losses", "metrics", "all"])
    v.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("render", help="write input / prediction / ground truth PGM triptychs")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--ids", nargs="+", required=True)
    r.add_argument("--out", required=True)
    return p


# --------------------------------------------------------------------------
# commands


def _gen_data(args) -> List[Path]:
    try:
        cfg = SynthConfig(size=args.size, n_labeled=args.labeled, n_unlabeled=args.unlabeled,
                          n_val=args.val, n_test=args.test, noise=args.noise)
    except ValueError as exc:
        raise UsageError(str(exc))
    out = Path(args.out)
    written = []
    for ds in generate_task_pair(args.seed, cfg):
        written.append(write_dataset(ds, out / ds.name))
    (out / "synth_config.json").write_text(json.dumps({"seed": args.seed, **_synth_dict(cfg)}, indent=2))
    return written


def _synth_dict(cfg: SynthConfig) -> dict:
    from .synthtasks import config_dict

    return config_dict(cfg)


def _load_config(path: str):
    from .trainer import TrainConfig

    cfg_path = _existing(path)
    try:
        cfg = TrainConfig.load(cfg_path)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid config {cfg_path}: {exc}")
    # dataset paths in the config are relative to the config file
    pairs = [tuple(str((cfg_path.parent / d).resolve()) if not Path(d).is_absolute() else d for d in pair)
             for pair in cfg.task_pairs]
    if not pairs:
        raise UsageError(f"{cfg_path}: task_pairs is empty")
    for d in pairs[0]:
        _existing(d)
    return replace(cfg, task_pairs=pairs)


def _train(args) -> List[Path]:
    from .trainer import train

    cfg = _load_config(args.config)
    over = {k: getattr(args, k) for k in ("variant", "seed", "epochs") if getattr(args, k) is not None}
    try:
        cfg = replace(cfg, **over)
    except ValueError as exc:
        raise UsageError(str(exc))
    out = Path(args.out or f"runs/variant{cfg.variant}_seed{cfg.seed}")
    result = train(cfg, out)
    for name, score in result.best_val.items():
        print(f"{name}: best val mean Dice {score:.4f}")
    return list(result.checkpoints.values()) + [out / "history.json"]


def _load_inputs(checkpoint: str, dataset: str):
    try:
        model = load_model(_existing(checkpoint))
        ds = read_dataset(_existing(dataset))
    except (CheckpointError, DatasetError) as exc:
        raise UsageError(str(exc))
    if model.cfg.num_classes != ds.num_classes:
        raise UsageError(f"checkpoint predicts {model.cfg.num_classes} classes, dataset {ds.name} has {ds.num_classes}")
    return model, ds


def _eval(args) -> List[Path]:
    model, ds = _load_inputs(args.checkpoint, args.dataset)
    report = evaluate(model, ds, args.split)
    out = Path(args.out)
    report.write(out)
    print(f"{ds.name}/{args.split}: mean Dice {report.mean_dice:.4f}, mean HD {report.mean_hd:.2f} px")
    return [out, out.with_suffix(".json")]


def _ablate(args) -> List[Path]:
    from .trainer import run_ablation

    cfg = _load_config(args.config)
    if not args.variants or not args.seeds:
        raise UsageError("--variants and --seeds must be non-empty")
    bad = [v for v in args.variants if v not in range(1, 6)]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from 1..5")
    out = Path(args.out)
    table = run_ablation(cfg, args.variants, args.seeds, out)
    print(table.format())
    return [out / "ablation.csv", out / "ablation.json"]


def _verify(args) -> int:
    from . import verify

    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        fn = verify.SUITES[name]
        res = fn(seed=args.seed)
        print(f"suite {name}: {'PASS' if res.passed else 'FAIL'}")
        for c in res.checks:
            print("  " + c.line())
        ok &= res.passed
    return EXIT_OK if ok else EXIT_INVALID


def _gray(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.round(labels * (255.0 / max(1, num_classes - 1))).astype(np.uint8)


def _render(args) -> List[Path]:
    model, ds = _load_inputs(args.checkpoint, args.dataset)
    by_id = {it.id: it for it in ds.items}
    missing = [i for i in args.ids if i not in by_id]
    if missing:
        raise UsageError(f"unknown item ids {missing} in {ds.name}")
    predict = model_predictor(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for item_id in args.ids:
        it = by_id[item_id]
        pred = predict(it.image[None])[0].argmax(axis=0)
        sep = np.full((it.image.shape[0], 2), 255, dtype=np.uint8)
        panel = np.concatenate([np.round(it.image * 255).astype(np.uint8), sep,
                                _gray(pred, ds.num_classes), sep, _gray(it.label, ds.num_classes)], axis=1)
        path = out / f"{item_id}.pgm"
        write_pgm(path, panel)
        written.append(path)
    return written


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return _verify(args)
        handler = {"gen-data": _gen_data, "train": _train, "eval": _eval,
                   "ablate": _ablate, "render": _render}[args.command]
        for path in handler(args):
            log.info("wrote %s", path)
        return EXIT_OK
    except UsageError as exc:
        print(f"{parser.format_usage()}modelmix: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        print(f"modelmix: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
