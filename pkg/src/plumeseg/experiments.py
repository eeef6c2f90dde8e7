"""
Desk-scale experiments on synthetic corpora.

These runners back the narrative demos and the acceptance suite: an overfit
capacity check, the BCE-versus-MAE comparison under heavy class imbalance,
and plain versus drop-highest BCE under simulated annotation noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from plumeseg.dataset import DropPlume, Dilate, SynthConfig, synthetic_samples
from plumeseg.evaluation import dice, threshold
from plumeseg.nn.optim import TrainHyper
from plumeseg.nn.unet import UNetConfig, build_unet
from plumeseg.raster import BandMode
from plumeseg.training import TrainConfig, train

# heavily imbalanced scenes: one or two small plumes per 96x96 scene
SPARSE_SYNTH = SynthConfig(size=96, plume_count=(1, 2), plume_sigma=(0.035, 0.06), cloud_count=(0, 2))
NOISY_SYNTH = SynthConfig(size=96, plume_count=(1, 3), plume_sigma=(0.05, 0.10), cloud_count=(0, 2))
LABEL_NOISE = (Dilate(6), DropPlume(0.2))

DESK_UNET = dict(depth=4, base_filters=8)
DESK_HYPER = TrainHyper(lr0=1e-3, gamma=0.1, step_epochs=9, epochs=21, batch=4)


@dataclass
class Corpus:
    train: list
    val: list
    val_clean: list = field(default_factory=list)

    @property
    def positive_fraction(self) -> float:
        labels = [s.label for s in self.train + self.val]
        return float(np.mean([lab.mean() for lab in labels]))


def make_corpus(cfg: SynthConfig, seed: int, n_train: int, n_val: int, band_mode=BandMode.THREE, noise=None) -> Corpus:
    """Synthetic train/val sets; training labels carry ``noise``, validation keeps clean copies."""
    pairs = synthetic_samples(n_train + n_val, cfg, seed, band_mode=band_mode, noise=noise, prefix=f"s{seed}_")
    train_set = [s for s, _ in pairs[:n_train]]
    val_set = [s for s, _ in pairs[n_train:]]
    return Corpus(train_set, val_set, [clean for _, clean in pairs[n_train:]])


@dataclass
class RunResult:
    seed: int
    loss: str
    drop_highest: bool
    records: list
    val_dice_clean: float
    positive_rate: float
    seconds: float
    model: object = None


def evaluate_clean(model, samples, clean_labels, t: float = 0.5):
    """Mean Dice against clean labels and the fraction of pixels predicted positive."""
    x = np.stack([s.input for s in samples])
    prob = model.predict(x)
    masks = [threshold(p[0], t) for p in prob]
    dices = [dice(m, c) for m, c in zip(masks, clean_labels)]
    return float(np.mean(dices)), float(np.mean([m.mean() for m in masks]))


def run_variant(
    corpus: Corpus,
    seed: int,
    loss: str = "bce",
    drop_highest: bool = False,
    band_mode=BandMode.THREE,
    hyper: TrainHyper = DESK_HYPER,
    unet: dict | None = None,
    keep_model: bool = False,
) -> RunResult:
    band_mode = BandMode(band_mode)
    ucfg = UNetConfig(in_channels=band_mode.n_planes, **(unet or DESK_UNET))
    model = build_unet(ucfg, seed=seed)
    tcfg = TrainConfig(hyper=hyper, loss=loss, drop_highest=drop_highest, band_mode=band_mode, seed=seed)
    t0 = time.time()
    _, records = train(model, corpus.train, corpus.val, tcfg)
    clean = corpus.val_clean or [s.label for s in corpus.val]
    d, rate = evaluate_clean(model, corpus.val, clean)
    return RunResult(seed, loss, drop_highest, records, d, rate, time.time() - t0, model if keep_model else None)


def run_overfit(seed: int = 0, n: int = 8, size: int = 64, max_steps: int = 200, target: float = 0.95):
    """Fit the full-size U-Net (depth 5, base 16) to ``n`` scenes.

    One optimizer step per epoch (batch = n). Stops at the first step whose
    post-update training Dice reaches ``target``; returns (dice, steps, records).
    """
    pairs = synthetic_samples(n, SynthConfig(size=size, plume_count=(1, 2)), seed, band_mode=BandMode.ONE, prefix="fit")
    samples = [s for s, _ in pairs]
    model = build_unet(UNetConfig(in_channels=3, depth=5, base_filters=16), seed=seed)
    hyper = TrainHyper(lr0=1e-3, gamma=1.0, step_epochs=max_steps, epochs=max_steps, batch=n)
    tcfg = TrainConfig(hyper=hyper, loss="bce", band_mode=BandMode.ONE, seed=seed)

    class _Reached(Exception):
        pass

    records = []

    def stop(rec):
        records.append(rec)
        # val set == train set, so val_dice is the post-step training Dice
        if rec.val_dice >= target:
            raise _Reached

    try:
        train(model, samples, samples, tcfg, on_epoch=stop)
    except _Reached:
        pass
    return records[-1].val_dice, len(records), records


def mae_collapse(seeds=(0, 1, 2), n_train: int = 96, n_val: int = 32, hyper: TrainHyper = DESK_HYPER):
    """BCE versus MAE on a corpus with under 2% smoke pixels."""
    out = {"bce": [], "mae": [], "positive_fraction": []}
    for seed in seeds:
        corpus = make_corpus(SPARSE_SYNTH, seed, n_train, n_val)
        out["positive_fraction"].append(corpus.positive_fraction)
        for loss in ("bce", "mae"):
            out[loss].append(run_variant(corpus, seed, loss=loss, hyper=hyper))
    return out


def loss_sampling(seeds=(0, 1, 2), n_train: int = 96, n_val: int = 32, hyper: TrainHyper = DESK_HYPER, noise=LABEL_NOISE):
    """Plain versus drop-highest BCE with noisy training labels, scored on clean labels."""
    out = {"plain": [], "drop": []}
    for seed in seeds:
        corpus = make_corpus(NOISY_SYNTH, seed, n_train, n_val, noise=noise)
        out["plain"].append(run_variant(corpus, seed, loss="bce", hyper=hyper))
        out["drop"].append(run_variant(corpus, seed, loss="bce", drop_highest=True, hyper=hyper))
    return out
