"""Command-line entry point: ``hstmrf <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ABLATION_STATES, ConfigError, RunConfig, config_from_dict, dump_config, load_config
from .data import (ManifestEntry, ManifestError, PNMError, SegSample, gen_blank, gen_synthetic,
                   load_dataset, read_image, read_mask, resize_image, write_manifest, write_overlay,
                   write_pnm)
from .gradsuite import SCOPES, run_scope
from .metrics import EvalResult
from .model import HSTMRF
from .nn import StateDictError
from .tensor import NonFiniteError, ShapeError
from .train import Trainer, TrainingAborted, evaluate_model

log = logging.getLogger("hstmrf")

METRIC_COLUMNS = (("mDice", "mDice"), ("mIoU", "mIoU"), ("Rec", "recall"), ("Pre", "precision"))
EXPECTED_ERRORS = (ConfigError, ManifestError, PNMError, CheckpointError, StateDictError, ShapeError,
                   NonFiniteError, TrainingAborted, OSError, ValueError)


class CLIError(RuntimeError):
    pass


# --------------------------------------------------------------- output
def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[h for h in headers]] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r]
                                      for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def emit(record: dict, stream=None) -> None:
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout)


def metrics_table(result: EvalResult, label: str = "") -> str:
    d = result.as_dict()
    return format_table(["split"] + [c for c, _ in METRIC_COLUMNS],
                        [[label] + [d[k] for _, k in METRIC_COLUMNS]])


# -------------------------------------------------------------- helpers
def _resolve(path: Optional[str], base: Path) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else base / p


def _load_run(config: str, out: Optional[str]) -> tuple[RunConfig, Path, Path]:
    """Config plus its manifest and output dir; relative paths resolve against the config file."""
    cfg = load_config(config)
    base = Path(config).resolve().parent
    manifest = _resolve(cfg.data.manifest, base)
    if manifest is None:
        raise ConfigError("data.manifest is not set", path=config)
    out_dir = Path(out) if out is not None else _resolve(cfg.out, base)
    return cfg, manifest, out_dir


def _datasets(cfg: RunConfig, manifest: Path) -> tuple[list[SegSample], list[SegSample]]:
    size = cfg.data.image_size
    train_set = load_dataset(manifest, cfg.data.train_split, size)
    if not train_set:
        raise ManifestError(f"{manifest}: no samples in split {cfg.data.train_split!r}")
    if cfg.data.eval_split == cfg.data.train_split:
        return train_set, train_set
    eval_set = load_dataset(manifest, cfg.data.eval_split, size)
    if not eval_set:
        raise ManifestError(f"{manifest}: no samples in split {cfg.data.eval_split!r}")
    return train_set, eval_set


def _model_from_checkpoint(path: str, cfg: Optional[RunConfig] = None) -> tuple[HSTMRF, RunConfig]:
    ckpt = load_checkpoint(path)
    if cfg is None:
        cfg = config_from_dict(ckpt.config)
    model = HSTMRF(cfg.resolved_model(), cfg.seed)
    try:
        model.load_state_dict(ckpt.model_state())
    except StateDictError as exc:
        raise CLIError(f"checkpoint {path} does not match the model configuration: {exc}") from None
    return model, cfg


# ------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    size = args.size
    samples = gen_synthetic(args.n + args.val, size, args.seed, window=args.window)
    out = Path(args.out)
    try:
        for sub in ("images", "masks", "holdout"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        entries = []
        for i, s in enumerate(samples):
            img, msk = out / "images" / f"{s.id}.ppm", out / "masks" / f"{s.id}.pgm"
            write_pnm(s.image, img)
            write_pnm(s.mask[0], msk)
            entries.append(ManifestEntry(img, msk, "train" if i < args.n else "val"))
        write_manifest(entries, out / "manifest.txt")
        # held out of the manifest: a background-only image for sanity-checking predictions
        blank = gen_blank(size, args.seed)
        write_pnm(blank.image, out / "holdout" / "blank.ppm")
        write_pnm(blank.mask[0], out / "holdout" / "blank.pgm")
        cfg = RunConfig(model=replace(RunConfig().model, window=args.window),
                        data=replace(RunConfig().data, manifest="manifest.txt", image_size=size,
                                     eval_split="val" if args.val else "train"),
                        seed=args.seed, out="run")
        (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot write to {out}: {exc}") from None
    emit({"command": "gen-data", "n": args.n, "val": args.val, "size": size, "seed": args.seed,
          "manifest": str(out / "manifest.txt")})
    return 0


def cmd_train(args) -> int:
    cfg, manifest, out_dir = _load_run(args.config, args.out)
    train_set, eval_set = _datasets(cfg, manifest)
    trainer = Trainer(cfg, train_set, eval_set, out_dir)
    if args.resume:
        trainer.restore(args.resume)
    result = trainer.run()
    print(metrics_table(result.final, cfg.data.eval_split))
    emit({"command": "train", "step": result.step, **result.final.as_dict()})
    return 0


def cmd_eval(args) -> int:
    cfg, manifest, _ = _load_run(args.config, None)
    model, _ = _model_from_checkpoint(args.checkpoint, cfg)
    split = args.split or cfg.data.eval_split
    samples = load_dataset(manifest, split, cfg.data.image_size)
    if not samples:
        raise ManifestError(f"{manifest}: no samples in split {split!r}")
    result = evaluate_model(model, samples)
    print(metrics_table(result, split))
    emit({"command": "eval", "split": split, "n": len(samples), **result.as_dict()})
    return 0


def cmd_predict(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    image = read_image(args.image)
    size = cfg.data.image_size
    if image.shape[1:] != (size, size):
        image = resize_image(image, (size, size))
    logits = model.predict(image[None])[0]
    pred = (logits >= 0.0).astype(np.float32)  # sigmoid(z) >= 0.5
    gt = None
    if args.mask:
        gt = read_mask(args.mask)
        if gt.shape[1:] != pred.shape[1:]:
            raise ShapeError(f"mask {args.mask} is {gt.shape[1:]}, prediction is {pred.shape[1:]}")
    out = Path(args.out)
    stem = Path(args.image).stem
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    mask_path = out / f"{stem}_pred.pgm"
    write_pnm(pred[0], mask_path)
    overlay_path = out / "overlays" / f"{stem}.ppm"
    write_overlay(image, gt if gt is not None else np.zeros_like(pred), pred, overlay_path)
    emit({"command": "predict", "image": str(args.image), "mask": str(mask_path),
          "overlay": str(overlay_path), "positive_fraction": float(pred.mean())})
    return 0


def parse_states(text: str) -> list[str]:
    if text == "all":
        return list(ABLATION_STATES)
    states = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in states if s not in ABLATION_STATES]
    if bad or not states:
        raise CLIError(f"unknown ablation state(s) {', '.join(bad) or repr(text)}; "
                       f"valid states: {', '.join(ABLATION_STATES)}")
    return list(dict.fromkeys(states))


def cmd_ablate(args) -> int:
    states = parse_states(args.states)
    base, manifest, out_dir = _load_run(args.config, args.out)
    if args.steps is not None:
        base = replace(base, train=replace(base.train, steps=args.steps))
    train_set, eval_set = _datasets(base, manifest)
    splits = [base.data.train_split]
    if base.data.eval_split != base.data.train_split:
        splits.append(base.data.eval_split)
    headers = ["state", "params"] + [f"{c}/{s}" for s in splits for c, _ in METRIC_COLUMNS]
    rows, records = [], []
    for state in states:
        cfg = replace(base, ablation=state)
        trainer = Trainer(cfg, train_set, eval_set, out_dir / state)
        trainer.run()
        results = {splits[0]: evaluate_model(trainer.model, train_set)}
        if len(splits) > 1:
            results[splits[1]] = evaluate_model(trainer.model, eval_set)
        row = [state, trainer.model.num_parameters()]
        record = {"state": state, "params": row[1]}
        for s in splits:
            d = results[s].as_dict()
            row += [d[k] for _, k in METRIC_COLUMNS]
            record[s] = d
        rows.append(row)
        records.append(record)
        emit({"command": "ablate", **record})
    table = format_table(headers, rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    with open(out_dir / "ablation.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_scope(args.scope, args.seed)
    print(format_table(["target", "max_rel_err", "tol", "coords", "status"],
                       [[r.name, f"{r.max_rel_error:.3e}", f"{r.tol:.0e}", r.checked,
                         "PASS" if r.passed else "FAIL"] for r in reports]))
    failed = [r.name for r in reports if not r.passed]
    emit({"command": "gradcheck", "scope": args.scope, "seed": args.seed, "targets": len(reports),
          "failed": failed, "max_rel_error": max(r.max_rel_error for r in reports)})
    return 1 if failed else 0


# --------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hstmrf", description="Dual-receptive-field segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every training step to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic PPM/PGM dataset and manifest")
    g.add_argument("--n", type=int, default=8, help="training samples")
    g.add_argument("--val", type=int, default=0, help="extra samples in a 'val' split")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--window", type=int, default=4, help="attention window the data must suit")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", help="output directory (overrides the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", help="manifest split (default: the config's eval split)")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict a mask and overlay for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--mask", help="ground-truth mask, drawn in green on the overlay")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train and compare ablation states")
    a.add_argument("--config", required=True)
    a.add_argument("--states", default="all", help="'all' or a comma-separated list")
    a.add_argument("--steps", type=int, help="override train.steps for every state")
    a.add_argument("--out", help="output directory (overrides the config)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    c.add_argument("--scope", choices=SCOPES, default="op")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    raw = os.environ.get("HSTMRF_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CLIError(f"HSTMRF_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (CLIError, *EXPECTED_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        emit({"command": args.command, "error": str(exc)}, sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
