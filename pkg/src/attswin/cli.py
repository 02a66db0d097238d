"""Command-line entry point: train, eval, predict, gradcheck, ablate, synth-data."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    DatasetError,
    load_dataset,
    resize_samples,
    stack,
    synth_lesions,
    write_dataset,
    write_mask,
)
from .gradcheck import check_model
from .network import ABLATION_ROWS, ConfigError, ModelConfig, apply_ablation, build
from .training import TrainConfig, TrainingError, evaluate, predict_masks, segmentation_loss, train
from .tensor import Tensor

log = logging.getLogger("attswin")

METRIC_COLUMNS = ("dsc", "se", "sp", "acc", "tp", "fp", "tn", "fn")
ABLATION_COLUMNS = ("setting", "dsc", "se", "sp", "acc", "status")


class UsageError(Exception):
    """Bad configuration or data; exit code 1."""


def presets(name: str) -> tuple[ModelConfig, TrainConfig]:
    if name == "toy":
        return ModelConfig.toy(), TrainConfig.toy()
    if name == "paper":
        return ModelConfig(), TrainConfig(lr=1e-4, batch_size=24, epochs=100)
    raise UsageError(f"unknown preset {name!r}")


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg, train_cfg = presets(args.preset)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"{path}: config file not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        unknown = sorted(set(raw) - {"model", "train"})
        if unknown:
            raise UsageError(f"{path}: unknown top-level keys {unknown}")
        try:
            model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), **raw.get("model", {})})
            train_cfg = TrainConfig.from_dict({**dataclasses.asdict(train_cfg), **raw.get("train", {})})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{path}: {exc}") from exc
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    try:
        model_cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return model_cfg, train_cfg


def _dataset(args, cfg: ModelConfig, n: int, seed: int):
    if args.data:
        return load_dataset(args.data, cfg.img_size, cfg.in_chans)
    return synth_lesions(n, cfg.img_size, cfg.img_size, seed, cfg.in_chans)


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required for this command")
    return value


def _checkpoint(args):
    path = Path(_require(args.checkpoint, "--checkpoint"))
    if not path.is_file():
        raise UsageError(f"{path}: checkpoint not found")
    return load_checkpoint(path)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


def cmd_train(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    dataset = _dataset(args, model_cfg, 16, train_cfg.seed)
    model = build(model_cfg, train_cfg.seed)
    rows = train(model, dataset, train_cfg, out_dir=args.out)
    print(f"trained {len(rows)} epochs; final loss {rows[-1]['loss']:.5f} dsc {rows[-1]['dsc']:.4f}"
          if rows else "trained 0 epochs")
    return 0


def cmd_eval(args) -> int:
    model = _checkpoint(args)
    dataset = load_dataset(_require(args.data, "--data"), model.cfg.img_size, model.cfg.in_chans)
    metrics = evaluate(model, dataset, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, [metrics.as_row()])
    print(",".join(METRIC_COLUMNS))
    print(",".join(str(metrics.as_row()[c]) for c in METRIC_COLUMNS))
    return 0


def cmd_predict(args) -> int:
    model = _checkpoint(args)
    dataset = load_dataset(_require(args.data, "--data"), model.cfg.img_size, model.cfg.in_chans)
    images, _ = stack(dataset)
    masks = predict_masks(model, images, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample, mask in zip(dataset, masks):
        write_mask(out / f"{sample.name}_mask.pgm", mask)
    print(f"wrote {len(masks)} masks to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    model = build(model_cfg, train_cfg.seed).astype(np.float64)
    sample = synth_lesions(1, model_cfg.img_size, model_cfg.img_size, train_cfg.seed, model_cfg.in_chans)
    images, masks = stack(sample)
    img = Tensor(images.astype(np.float64))

    def loss_fn():
        return segmentation_loss(model(img), masks, train_cfg.lambda_ce, train_cfg.lambda_dice)

    reports = check_model(model, loss_fn, seed=train_cfg.seed)
    print("layer,max_rel_error,checked,passed")
    for kind, rep in reports.items():
        print(f"{kind},{rep.max_rel_error:.3e},{rep.checked},{rep.passed}")
    return 0 if all(r.passed for r in reports.values()) else 2


def cmd_synthdata(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    size = args.size or model_cfg.img_size
    samples = synth_lesions(args.n, size, size, train_cfg.seed, model_cfg.in_chans)
    written = write_dataset(args.out, samples)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set, test_set,
                 input_size: int) -> list[dict]:
    rows = []
    for key, label in ABLATION_ROWS.items():
        row = {"setting": label, "dsc": "", "se": "", "sp": "", "acc": "", "status": "ok"}
        try:
            cfg = apply_ablation(model_cfg, key, input_size=input_size)
            tr, te = train_set, test_set
            if cfg.img_size != model_cfg.img_size:
                tr, te = (resize_samples(s, cfg.img_size) for s in (train_set, test_set))
            model = build(cfg, train_cfg.seed)
            train(model, tr, train_cfg)
            m = evaluate(model, te)
            row.update(dsc=repr(m.dsc), se=repr(m.se), sp=repr(m.sp), acc=repr(m.acc))
        except Exception as exc:  # one failed row must not stop the sweep
            log.exception("ablation row %r failed", label)
            row["status"] = f"error: {exc}".replace(",", ";")
        rows.append(row)
        log.info("ablation %s: %s", label, row)
    return rows


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    if args.data:
        root = Path(args.data)
        train_set = load_dataset(root / "train", model_cfg.img_size, model_cfg.in_chans)
        test_set = load_dataset(root / "test", model_cfg.img_size, model_cfg.in_chans)
    else:
        size = model_cfg.img_size
        train_set = synth_lesions(64, size, size, train_cfg.seed, model_cfg.in_chans)
        test_set = synth_lesions(16, size, size, train_cfg.seed + 10_000, model_cfg.in_chans)
    input_size = 384 if args.preset == "paper" else 2 * model_cfg.img_size
    rows = run_ablation(model_cfg, train_cfg, train_set, test_set, input_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    for row in rows:
        print(f"{row['setting']}: dsc={row['dsc']} {row['status']}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "synth-data": cmd_synthdata,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attswin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with 'model' and/or 'train' sections")
        p.add_argument("--preset", choices=("toy", "paper"), default="toy")
        p.add_argument("--data", help="dataset directory (<name>_img.ppm|pgm + <name>_mask.pgm)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--checkpoint", help="model checkpoint (eval, predict)")
        p.add_argument("--threshold", type=float, default=0.5)
        if name == "synth-data":
            p.add_argument("--n", type=int, default=8, help="number of image/mask pairs")
            p.add_argument("--size", type=int, default=None, help="image side length")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.data and not Path(args.data).exists():
        print(f"error: dataset path {args.data} does not exist", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DatasetError, CheckpointError, ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
