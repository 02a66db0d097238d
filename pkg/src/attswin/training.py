"""Loss, Adam training loop and pooled-metric evaluation."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import Sample, stack
from .metrics import MetricsRecord
from .network import AttSwinUNet
from .optim import Adam
from .tensor import Tensor, log_softmax_last, no_grad, softmax_last

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "dsc", "se", "sp", "acc")


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 24
    epochs: int = 100
    seed: int = 0
    lambda_ce: float = 0.5
    lambda_dice: float = 0.5

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=4, epochs=200)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("loss: mask must contain only 0 and 1")
    return mask


def segmentation_loss(logits: Tensor, mask, lambda_ce: float = 0.5, lambda_dice: float = 0.5) -> Tensor:
    """lambda_ce * mean pixel cross-entropy + lambda_dice * (1 - smoothed soft Dice).

    Soft Dice uses the foreground-class probability pooled over the batch with
    a smoothing term of 1 in numerator and denominator.
    """
    mask = _check_mask(mask)
    if logits.shape[:-1] != mask.shape:
        raise ValueError(f"loss: logits {logits.shape} vs mask {mask.shape}")
    k = logits.shape[-1]
    onehot = np.eye(k, dtype=logits.dtype)[mask.astype(np.int64)]
    ce = -(log_softmax_last(logits) * onehot).sum(axis=-1).mean()
    fg = softmax_last(logits)[..., 1]
    m = mask.astype(logits.dtype)
    dice = ((fg * m).sum() * 2.0 + 1.0) / (fg.sum() + float(m.sum()) + 1.0)
    return ce * lambda_ce + (1.0 - dice) * lambda_dice


def predict_proba(model: AttSwinUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Foreground probability per pixel, (B, H, W)."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(images[i:i + batch_size])
            out.append(softmax_last(logits).data[..., 1])
    return np.concatenate(out)


def predict_masks(model: AttSwinUNet, images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(model, images) > threshold).astype(np.uint8)


def evaluate(model: AttSwinUNet, dataset: list[Sample], threshold: float = 0.5) -> MetricsRecord:
    """Confusion counts pooled over every pixel of every sample."""
    if not dataset:
        raise ValueError("evaluate: empty dataset")
    images, masks = stack(dataset)
    return MetricsRecord.from_masks(predict_masks(model, images, threshold), masks)


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def train(
    model: AttSwinUNet,
    dataset: list[Sample],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Adam on the CE + Dice loss; one log row per epoch.

    Shuffling draws from ``cfg.seed`` only, so (seed, config, data) fix every
    logged number. With ``out_dir`` the log and final checkpoint are written
    there as ``train_log.csv`` and ``model.ckpt``.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    images, masks = stack(dataset)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rows = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step += 1
            loss = segmentation_loss(model(images[idx]), masks[idx], cfg.lambda_ce, cfg.lambda_dice)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(step, f"non-finite loss {value}")
            loss.backward()
            for p in opt.params:
                if p.grad is not None and not np.isfinite(p.grad).all():
                    raise TrainingError(step, f"non-finite gradient in {p.name}")
            opt.step()
            losses.append(value)
        metrics = MetricsRecord.from_masks(predict_masks(model, images), masks)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "dsc": metrics.dsc,
               "se": metrics.se, "sp": metrics.sp, "acc": metrics.acc}
        rows.append(row)
        log.info("epoch %d loss %.5f dsc %.4f", epoch, row["loss"], row["dsc"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(rows, out / "train_log.csv")
        save_checkpoint(model, out / "model.ckpt")
    return rows
