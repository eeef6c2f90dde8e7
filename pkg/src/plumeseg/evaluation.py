"""Thresholding, Dice, confusion counts and tiled scene-scale prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from plumeseg.dataset import NormStats, normalize_planes
from plumeseg.errors import ShapeError
from plumeseg.raster import BandMode, ChannelId, RasterScene, input_planes


def threshold(prob, t: float = 0.5) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    if isinstance(prob, RasterScene):
        prob = prob.plane(ChannelId.PROB)
    return (np.asarray(prob) >= t).astype(np.uint8)


def _check(a, b):
    a, b = np.asarray(a) != 0, np.asarray(b) != 0
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    a, b = _check(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mean_dice(preds, truths) -> float:
    """Unweighted mean of per-sample Dice."""
    scores = [dice(p, t) for p, t in zip(preds, truths)]
    return float(np.mean(scores)) if scores else float("nan")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None


def confusion(pred, truth) -> Confusion:
    p, t = _check(pred, truth)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    return Confusion(tp, fp, fn, int(p.size) - tp - fp - fn)


def tile_starts(size: int, tile: int) -> list[int]:
    """Tile origins covering ``size``; the last tile sits flush with the edge."""
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile + 1, tile))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


def predict_scene(model, scene: RasterScene, band_mode, tile: int = 300, stats: NormStats | None = None, batch: int = 4):
    """Probability map for a whole scene, returned as a one-channel ``Prob`` scene.

    The scene is normalized, cut into ``tile``-sized windows (edge windows
    flush with the border), each window is run through ``model.predict``, and
    overlapping pixels are averaged.
    """
    stats = NormStats() if stats is None else stats
    channels = BandMode(band_mode).channels
    planes = normalize_planes(input_planes(scene, band_mode), channels, stats)
    h, w = scene.height, scene.width
    th, tw = min(tile, h), min(tile, w)
    windows = [(r, c) for r in tile_starts(h, th) for c in tile_starts(w, tw)]
    total = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for i in range(0, len(windows), batch):
        chunk = windows[i : i + batch]
        x = np.stack([planes[:, r : r + th, c : c + tw] for r, c in chunk])
        prob = np.asarray(model.predict(x))
        for (r, c), p in zip(chunk, prob):
            total[r : r + th, c : c + tw] += p[0]
            count[r : r + th, c : c + tw] += 1
    prob = np.clip(total / count, 0.0, 1.0)
    return RasterScene(prob[None], (ChannelId.PROB,), scene.transform, scene.crs, scene.timestamp)
