"""
Training loop with noisy-label strategies.

Per-sample losses (BCE or MAE on sigmoid probabilities) are averaged over the
batch; with ``drop_highest`` the single worst sample of each batch has its
loss set to zero before averaging, so it contributes no gradient while the
denominator stays the full batch size.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from plumeseg.errors import EmptyError, NumericsError, ShapeError
from plumeseg.evaluation import dice
from plumeseg.nn.checkpoint import save_checkpoint
from plumeseg.nn.ops import LOSSES
from plumeseg.nn.optim import TrainHyper, adam_step, lr_at_epoch
from plumeseg.raster import BandMode

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "train_dice", "val_dice", "lr")


@dataclass(frozen=True)
class TrainConfig:
    hyper: TrainHyper = field(default_factory=TrainHyper)
    loss: str = "bce"
    drop_highest: bool = False
    drop_k: int = 1
    band_mode: BandMode = BandMode.THREE
    seed: int = 0
    checkpoint_every: int = 0
    micro_batch: int | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")
        if self.drop_k < 1:
            raise ValueError("drop_k must be >= 1")
        object.__setattr__(self, "band_mode", BandMode(self.band_mode))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_dice: float
    val_dice: float
    lr: float
    dropped_sample_ids: list = field(default_factory=list)


def drop_highest_weights(losses, k: int = 1):
    """Per-sample weights (1/b, zero for the k largest losses) and dropped indices.

    Ties go to the lowest index.
    """
    losses = np.asarray(losses, dtype=np.float64)
    b = len(losses)
    k = min(k, b)
    dropped = sorted(np.argsort(-losses, kind="stable")[:k].tolist())
    weights = np.full(b, 1.0 / b)
    weights[dropped] = 0.0
    return weights, dropped


def drop_highest_loss(losses):
    """Zero the largest per-sample loss and average over the full batch.

    Returns ``(masked_mean, dropped_index)``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise EmptyError("empty batch")
    weights, dropped = drop_highest_weights(losses, 1)
    return float(np.dot(weights, losses)), dropped[0]


def _stack(samples):
    x = np.stack([s.input for s in samples]).astype(np.float32)
    y = np.stack([s.label for s in samples])[:, None].astype(np.float32)
    return x, y


def _check_channels(model, samples):
    c = model.cfg.in_channels
    for s in samples:
        if s.input.shape[0] != c:
            raise ShapeError(f"sample {s.id} has {s.input.shape[0]} channels, model expects {c}")


def validate(model, samples, threshold: float = 0.5, loss: str = "bce", batch: int = 8):
    """Mean per-sample loss and mean per-sample Dice of a frozen model."""
    samples = list(samples)
    if not samples:
        raise EmptyError("no validation samples")
    loss_fn, _ = LOSSES[loss]
    losses, dices = [], []
    for i in range(0, len(samples), batch):
        x, y = _stack(samples[i : i + batch])
        prob = model.predict(x)
        losses.extend(loss_fn(prob, y).tolist())
        dices.extend(dice(p[0] >= threshold, t[0]) for p, t in zip(prob, y))
    return float(np.mean(losses)), float(np.mean(dices))


def _batch_gradients(model, x, y, cfg: TrainConfig):
    """Forward/backward one batch; returns (grads, per-sample losses, probs, weights, dropped)."""
    loss_fn, loss_bwd = LOSSES[cfg.loss]
    b = len(x)
    chunk = cfg.micro_batch or b
    if chunk >= b:
        prob = model.forward(x, train=True, pad=True)
        losses = loss_fn(prob, y)
        weights, dropped = drop_highest_weights(losses, cfg.drop_k) if cfg.drop_highest else (np.full(b, 1.0 / b), [])
        grads, _ = model.backward(loss_bwd(prob, y, weights))
        return grads, losses, prob, weights, dropped

    # losses first so the dropped sample is known before any backward pass
    probs = np.concatenate([model.forward(x[i : i + chunk], train=False, pad=True) for i in range(0, b, chunk)])
    losses = loss_fn(probs, y)
    weights, dropped = drop_highest_weights(losses, cfg.drop_k) if cfg.drop_highest else (np.full(b, 1.0 / b), [])
    grads = None
    for i in range(0, b, chunk):
        sl = slice(i, i + chunk)
        if not np.any(weights[sl]):
            continue
        prob = model.forward(x[sl], train=True, pad=True)
        g, _ = model.backward(loss_bwd(prob, y[sl], weights[sl]))
        if grads is None:
            grads = g
        else:
            for name in grads:
                grads[name] += g[name]
    if grads is None:
        grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    return grads, losses, probs, weights, dropped


def train(model, train_samples, val_samples, cfg: TrainConfig, out_dir=None, start_epoch: int = 0, on_epoch=None):
    """Run ``cfg.hyper.epochs`` epochs of minibatch Adam on ``model`` in place.

    Each epoch shuffles with a generator seeded by ``(cfg.seed, epoch)``, so a
    run resumed at ``start_epoch`` from a checkpoint replays the same batches.
    Batches whose every sample was dropped skip the optimizer step. Returns
    ``(model.state, records)``.
    """
    train_samples, val_samples = list(train_samples), list(val_samples)
    if not train_samples or not val_samples:
        raise EmptyError("train and validation sets must be non-empty")
    _check_channels(model, train_samples + val_samples)
    hyper = cfg.hyper
    out_dir = Path(out_dir) if out_dir is not None else None
    records = []
    n = len(train_samples)
    for epoch in range(start_epoch, hyper.epochs):
        lr = lr_at_epoch(hyper, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, dices, dropped_ids = 0.0, [], []
        for start in range(0, n, hyper.batch):
            batch = [train_samples[i] for i in order[start : start + hyper.batch]]
            x, y = _stack(batch)
            grads, losses, prob, weights, dropped = _batch_gradients(model, x, y, cfg)
            if not np.all(np.isfinite(losses)):
                raise NumericsError(f"non-finite loss at epoch {epoch}")
            loss_sum += float(np.dot(weights, losses)) * len(batch)
            dices.extend(dice(p[0] >= cfg.threshold, t[0]) for p, t in zip(prob, y))
            dropped_ids.extend(batch[i].id for i in dropped)
            if np.any(weights):
                adam_step(model.state, grads, lr, hyper)
        val_loss, val_dice = validate(model, val_samples, cfg.threshold, cfg.loss)
        rec = EpochRecord(epoch, loss_sum / n, val_loss, float(np.mean(dices)), val_dice, lr, dropped_ids)
        records.append(rec)
        log.info(
            "epoch %d lr=%g train_loss=%.4f val_loss=%.4f train_dice=%.4f val_dice=%.4f",
            epoch, lr, rec.train_loss, val_loss, rec.train_dice, val_dice,
        )
        if out_dir is not None and cfg.checkpoint_every and (
            (epoch + 1) % cfg.checkpoint_every == 0 or epoch == hyper.epochs - 1
        ):
            save_checkpoint(model, out_dir / f"ckpt_epoch{epoch}.bin", epoch=epoch)
        if on_epoch is not None:
            on_epoch(rec)
    return model.state, records


def write_history(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.train_dice), repr(r.val_dice), repr(r.lr)])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            EpochRecord(
                int(row["epoch"]),
                float(row["train_loss"]),
                float(row["val_loss"]),
                float(row["train_dice"]),
                float(row["val_dice"]),
                float(row["lr"]),
            )
            for row in csv.DictReader(fh)
        ]


def record_dict(rec: EpochRecord) -> dict:
    return asdict(rec)
