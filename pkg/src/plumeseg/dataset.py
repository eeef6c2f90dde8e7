"""
Training corpora
----------------
Class-balanced crop sampling, leakage-free group splitting, min-max
normalization, a seeded synthetic scene generator and simulated annotation
noise.

Masks are plain ``(height, width)`` uint8 arrays throughout; their
georeferencing travels with the scene they label.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import ndimage

from plumeseg.errors import BoundsError, EmptyError, FormatError, ShapeError, StatsError
from plumeseg.raster import (
    REFLECTANCE_MAX,
    BandMode,
    ChannelId,
    GeoTransform,
    RasterScene,
    composite_true_color,
    crop_window,
    input_planes,
    read_scene,
    stack_input,
    write_scene,
)

CROP_SIZE = 300
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class Sample:
    input: np.ndarray
    label: np.ndarray
    base_id: str
    channels: tuple[ChannelId, ...]
    id: str = ""
    origin: tuple[int, int] = (0, 0)
    transform: GeoTransform = field(default_factory=GeoTransform)
    crs: str = "EPSG:4326"
    timestamp: datetime = datetime(1970, 1, 1, tzinfo=timezone.utc)

    def __post_init__(self):
        if self.input.ndim != 3 or self.input.shape[1:] != self.label.shape:
            raise ShapeError(f"input {self.input.shape} does not match label {self.label.shape}")
        if len(self.channels) != self.input.shape[0]:
            raise ShapeError("one channel id per input plane required")

    @property
    def positive(self) -> bool:
        return bool(self.label.any())


def scene_rng(seed: int, base_id: str) -> np.random.Generator:
    """Generator owned by one scene, independent of processing order."""
    return np.random.default_rng([seed, zlib.crc32(base_id.encode("utf-8"))])


def _window_sums(mask, size):
    integral = np.pad(np.cumsum(np.cumsum(mask.astype(np.int64), 0), 1), ((1, 0), (1, 0)))
    return integral[size:, size:] - integral[:-size, size:] - integral[size:, :-size] + integral[:-size, :-size]


def sample_crops(
    scene: RasterScene,
    mask,
    n_max: int = 15,
    pos_frac: float = 0.6,
    rng: np.random.Generator | None = None,
    *,
    base_id: str = "scene",
    band_mode=BandMode.THREE,
    size: int = CROP_SIZE,
    min_positive_pixels: int = 1,
    max_attempts: int = 200,
) -> list[Sample]:
    """Cut up to ``n_max`` square crops, aiming for ``round(pos_frac * n_max)`` positives.

    A positive crop is drawn by picking a random labeled pixel and a random
    window containing it; negatives are windows with no labeled pixel found
    by rejection sampling. Each crop gets at most ``max_attempts`` tries and
    window origins never repeat. Positive shortfalls are made up with
    negatives; other shortfalls just shrink the output.
    """
    rng = np.random.default_rng() if rng is None else rng
    mask = np.asarray(mask)
    if mask.shape != (scene.height, scene.width):
        raise ShapeError(f"mask {mask.shape} does not match scene {(scene.height, scene.width)}")
    if scene.height < size or scene.width < size:
        raise BoundsError(f"scene {scene.height}x{scene.width} smaller than crop {size}")
    stack_input(scene, band_mode)

    sums = _window_sums(mask != 0, size)
    max_r, max_c = scene.height - size, scene.width - size
    used: set[tuple[int, int]] = set()
    origins: list[tuple[int, int]] = []

    n_pos_target = int(round(pos_frac * n_max))
    ys, xs = np.nonzero(mask)
    if len(ys):
        for _ in range(n_pos_target):
            for _ in range(max_attempts):
                k = rng.integers(len(ys))
                r, c = int(ys[k]), int(xs[k])
                r0 = int(rng.integers(max(0, r - size + 1), min(r, max_r) + 1))
                c0 = int(rng.integers(max(0, c - size + 1), min(c, max_c) + 1))
                if (r0, c0) not in used and sums[r0, c0] >= min_positive_pixels:
                    used.add((r0, c0))
                    origins.append((r0, c0))
                    break
    for _ in range(n_max - len(origins)):
        for _ in range(max_attempts):
            r0 = int(rng.integers(0, max_r + 1))
            c0 = int(rng.integers(0, max_c + 1))
            if (r0, c0) not in used and sums[r0, c0] == 0:
                used.add((r0, c0))
                origins.append((r0, c0))
                break

    samples = []
    for k, (r0, c0) in enumerate(origins):
        crop = crop_window(scene, r0, c0, size)
        samples.append(
            Sample(
                input=input_planes(crop, band_mode),
                label=(mask[r0 : r0 + size, c0 : c0 + size] != 0).astype(np.uint8),
                base_id=base_id,
                channels=BandMode(band_mode).channels,
                id=f"{base_id}_{k:02d}",
                origin=(r0, c0),
                transform=crop.transform,
                crs=scene.crs,
                timestamp=scene.timestamp,
            )
        )
    return samples


@dataclass
class SplitManifest:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    base_assignment: dict[str, str] = field(default_factory=dict)

    def split_of(self, name: str) -> list[str]:
        return getattr(self, name)

    def to_json(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "base_assignment": self.base_assignment}

    @classmethod
    def from_json(cls, doc) -> SplitManifest:
        try:
            return cls(list(doc["train"]), list(doc["val"]), list(doc["test"]), dict(doc["base_assignment"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad split manifest: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> SplitManifest:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def group_split(samples, fractions=(0.70, 0.15, 0.15), rng: np.random.Generator | None = None) -> SplitManifest:
    """Assign whole base scenes to train/val/test.

    Base ids are shuffled and then ordered largest group first; each goes to
    the split currently furthest below its target sample count. Crops of one
    base scene therefore never straddle splits.
    """
    rng = np.random.default_rng() if rng is None else rng
    samples = list(samples)
    if not samples:
        raise EmptyError("no samples to split")
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    by_base: dict[str, list[str]] = {}
    for s in samples:
        by_base.setdefault(s.base_id, []).append(s.id)
    bases = sorted(by_base)
    order = [bases[i] for i in rng.permutation(len(bases))]
    order.sort(key=lambda b: -len(by_base[b]))  # stable: big groups first, shuffled within a size
    targets = fractions * len(samples)
    counts = np.zeros(3)
    manifest = SplitManifest()
    for base in order:
        k = int(np.argmax(targets - counts))
        counts[k] += len(by_base[base])
        manifest.base_assignment[base] = SPLITS[k]
    for s in samples:
        manifest.split_of(manifest.base_assignment[s.base_id]).append(s.id)
    return manifest


DEFAULT_RANGES = {
    ChannelId.RED: (0.0, 1.0),
    ChannelId.GREEN_SYNTH: (0.0, 1.0),
    ChannelId.BLUE: (0.0, 1.0),
    ChannelId.VEGGIE: (0.0, 1.0),
    ChannelId.C07: (250.0, 340.0),
    ChannelId.C11: (200.0, 310.0),
    ChannelId.AOT: (0.0, 1.5),
}


@dataclass(frozen=True)
class NormStats:
    """Per-channel physical (lo, hi) ranges for min-max scaling."""

    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))

    def __post_init__(self):
        ranges = {ChannelId(k): (float(lo), float(hi)) for k, (lo, hi) in self.ranges.items()}
        for ch, (lo, hi) in ranges.items():
            if not lo < hi:
                raise StatsError(f"{ch}: lo {lo} must be below hi {hi}")
        object.__setattr__(self, "ranges", ranges)

    def bounds(self, channels):
        try:
            lo = np.array([self.ranges[ChannelId(c)][0] for c in channels])
            hi = np.array([self.ranges[ChannelId(c)][1] for c in channels])
        except KeyError as exc:
            raise StatsError(f"no normalization range for {exc.args[0]}") from None
        return lo[:, None, None], hi[:, None, None]


def normalize_planes(planes, channels, stats: NormStats) -> np.ndarray:
    lo, hi = stats.bounds(channels)
    return np.clip((np.asarray(planes, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def denormalize_planes(planes, channels, stats: NormStats) -> np.ndarray:
    lo, hi = stats.bounds(channels)
    return np.asarray(planes, dtype=np.float64) * (hi - lo) + lo


def normalize(sample: Sample, stats: NormStats) -> Sample:
    return replace(sample, input=normalize_planes(sample.input, sample.channels, stats))


def write_sample(sample: Sample, path) -> None:
    data = np.concatenate([sample.input, sample.label[None].astype(np.float32)])
    scene = RasterScene(data, sample.channels + (ChannelId.MASK,), sample.transform, sample.crs, sample.timestamp)
    write_scene(scene, path)


def read_sample(path, sample_id: str, base_id: str) -> Sample:
    scene = read_scene(path)
    channels = tuple(c for c in scene.channels if c is not ChannelId.MASK)
    return Sample(
        input=np.stack([scene.plane(c) for c in channels]),
        label=scene.plane(ChannelId.MASK).astype(np.uint8),
        base_id=base_id,
        channels=channels,
        id=sample_id,
        transform=scene.transform,
        crs=scene.crs,
        timestamp=scene.timestamp,
    )


# --- label noise --------------------------------------------------------------


@dataclass(frozen=True)
class Dilate:
    radius: int

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("dilation radius must be >= 0")


@dataclass(frozen=True)
class Shift:
    dx: int
    dy: int


@dataclass(frozen=True)
class DropPlume:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx * xx + yy * yy <= radius * radius


def shift_mask(mask, dx: int, dy: int) -> np.ndarray:
    """Translate by ``dx`` columns and ``dy`` rows, filling with zeros."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = mask[src_r, src_c]
    return out


def inject_label_noise(mask, kind, rng: np.random.Generator | None = None) -> np.ndarray:
    """Corrupt a mask the way hand-drawn, time-smeared annotations do.

    ``kind`` is ``None``, a :class:`Dilate`, :class:`Shift` or
    :class:`DropPlume`, or a sequence of these applied in order.
    """
    mask = (np.asarray(mask) != 0).astype(np.uint8)
    if kind is None:
        return mask
    if isinstance(kind, (list, tuple)):
        for k in kind:
            mask = inject_label_noise(mask, k, rng)
        return mask
    if isinstance(kind, Dilate):
        if kind.radius == 0:
            return mask
        return ndimage.binary_dilation(mask, structure=disk(kind.radius)).astype(np.uint8)
    if isinstance(kind, Shift):
        return shift_mask(mask, kind.dx, kind.dy)
    if isinstance(kind, DropPlume):
        rng = np.random.default_rng() if rng is None else rng
        labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
        drop = np.concatenate([[False], rng.random(n) < kind.p])
        return np.where(drop[labels], 0, mask).astype(np.uint8)
    raise TypeError(f"unknown noise kind {kind!r}")


def noise_from_json(doc):
    """Parse ``{"kind": "dilate", "radius": 6}``-style specs (or lists of them)."""
    if doc is None:
        return None
    if isinstance(doc, list):
        return tuple(noise_from_json(d) for d in doc)
    kind = str(doc.get("kind", "")).lower()
    if kind == "dilate":
        return Dilate(int(doc["radius"]))
    if kind == "shift":
        return Shift(int(doc["dx"]), int(doc["dy"]))
    if kind in ("drop", "dropplume"):
        return DropPlume(float(doc["p"]))
    if kind in ("none", ""):
        return None
    raise FormatError(f"unknown noise kind {doc!r}")


# --- synthetic scenes ---------------------------------------------------------


@dataclass(frozen=True)
class Plume:
    cx: float
    cy: float
    sigma_major: float
    sigma_minor: float
    angle: float
    amplitude: float

    def field(self, cols, rows):
        dx, dy = cols - self.cx, rows - self.cy
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = (dx * ca + dy * sa) / self.sigma_major
        v = (-dx * sa + dy * ca) / self.sigma_minor
        return self.amplitude * np.exp(-0.5 * (u * u + v * v))

    @property
    def source(self):
        """Upwind end of the plume, where the fire sits."""
        d = 1.8 * self.sigma_major
        return self.cx - d * np.cos(self.angle), self.cy - d * np.sin(self.angle)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for :func:`generate_synthetic`. Sizes are fractions of ``size``."""

    size: int = 128
    plume_count: tuple[int, int] = (1, 3)
    plume_intensity: tuple[float, float] = (0.5, 1.0)
    plume_sigma: tuple[float, float] = (0.05, 0.12)
    plume_aspect: tuple[float, float] = (0.3, 0.7)
    cloud_count: tuple[int, int] = (0, 2)
    cloud_sigma: tuple[float, float] = (0.05, 0.12)
    texture_seed: int | None = None
    noise: object = None
    label_threshold: float = 0.15
    pixel_size: float = 0.02
    origin: tuple[float, float] = (-122.0, 40.0)
    crs: str = "EPSG:4326"
    timestamp: datetime = datetime(2018, 8, 1, 20, 0, tzinfo=timezone.utc)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be positive")
        for name in ("plume_count", "cloud_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) range")

    @property
    def transform(self) -> GeoTransform:
        return GeoTransform(self.origin[0], self.pixel_size, 0.0, self.origin[1], 0.0, -self.pixel_size)


def _texture(rng, size, n_waves=6):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    field_ = np.zeros((size, size))
    for _ in range(n_waves):
        wavelength = size * rng.uniform(0.3, 1.5)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (cols * np.cos(theta) + rows * np.sin(theta)) / wavelength + phase)
    lo, hi = field_.min(), field_.max()
    return (field_ - lo) / (hi - lo) if hi > lo else np.zeros_like(field_)


def draw_plumes(cfg: SynthConfig, rng: np.random.Generator) -> list[Plume]:
    n = int(rng.integers(cfg.plume_count[0], cfg.plume_count[1] + 1))
    plumes = []
    for _ in range(n):
        major = cfg.size * rng.uniform(*cfg.plume_sigma)
        plumes.append(
            Plume(
                cx=rng.uniform(0.1, 0.9) * cfg.size,
                cy=rng.uniform(0.1, 0.9) * cfg.size,
                sigma_major=major,
                sigma_minor=major * rng.uniform(*cfg.plume_aspect),
                angle=rng.uniform(0, np.pi),
                amplitude=rng.uniform(*cfg.plume_intensity),
            )
        )
    return plumes


def plume_field(plumes, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    total = np.zeros((size, size))
    for p in plumes:
        total += p.field(cols, rows)
    return total


def generate_synthetic(cfg: SynthConfig, rng: np.random.Generator, return_plumes: bool = False):
    """Seeded smoke scene and its clean label.

    Plumes are anisotropic Gaussian blobs that brighten the visible channels
    (more in blue than red) with a fire hotspot in C07 at their upwind end.
    Clouds are bright, cold blobs that never enter the label. The label is
    the set of pixels where the summed plume field exceeds
    ``cfg.label_threshold``; AOT is the blurred label over a background haze.
    """
    size = cfg.size
    tex_rng = np.random.default_rng(cfg.texture_seed) if cfg.texture_seed is not None else rng
    land, moist, haze = _texture(tex_rng, size), _texture(tex_rng, size), _texture(tex_rng, size)

    red = 0.10 + 0.08 * land
    blue = 0.06 + 0.03 * land
    veggie = 0.20 + 0.15 * moist
    c07 = 292.0 + 10.0 * land
    c11 = 284.0 + 8.0 * moist

    plumes = draw_plumes(cfg, rng)
    smoke = plume_field(plumes, size)
    label = (smoke > cfg.label_threshold).astype(np.uint8)
    s = np.clip(smoke, 0.0, 1.0)
    blue = blue + 0.30 * s
    red = red + 0.20 * s
    veggie = veggie + 0.08 * s
    c11 = c11 - 2.0 * s
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for p in plumes:
        fx, fy = p.source
        c07 = c07 + 30.0 * p.amplitude * np.exp(-((cols - fx) ** 2 + (rows - fy) ** 2) / (2 * 1.5**2))

    n_clouds = int(rng.integers(cfg.cloud_count[0], cfg.cloud_count[1] + 1))
    cloud = np.zeros((size, size))
    for _ in range(n_clouds):
        cx, cy = rng.uniform(0, size, 2)
        sig = size * rng.uniform(*cfg.cloud_sigma)
        for _ in range(4):
            ox, oy = rng.normal(0, sig * 0.6, 2)
            cloud += rng.uniform(0.4, 0.9) * np.exp(-((cols - cx - ox) ** 2 + (rows - cy - oy) ** 2) / (2 * (0.6 * sig) ** 2))
    cloud = np.clip(cloud, 0.0, 1.0)
    red, blue, veggie = red + 0.65 * cloud, blue + 0.65 * cloud, veggie + 0.60 * cloud
    c11 = c11 - 50.0 * cloud
    c07 = c07 - 15.0 * cloud

    noise = rng.normal(0.0, 0.004, (3, size, size))
    red, blue, veggie = (np.clip(b + n, 0.0, REFLECTANCE_MAX) for b, n in zip((red, blue, veggie), noise))
    aot = 0.08 + 0.06 * haze + 0.6 * ndimage.gaussian_filter(label.astype(np.float64), 3.0)

    data = np.stack([blue, red, veggie, c07, c11, aot])
    channels = (ChannelId.BLUE, ChannelId.RED, ChannelId.VEGGIE, ChannelId.C07, ChannelId.C11, ChannelId.AOT)
    scene = composite_true_color(RasterScene(data, channels, cfg.transform, cfg.crs, cfg.timestamp))
    if return_plumes:
        return scene, label, plumes
    return scene, label


def synthetic_samples(
    n: int,
    cfg: SynthConfig,
    seed: int,
    band_mode=BandMode.THREE,
    stats: NormStats | None = None,
    noise=None,
    prefix: str = "syn",
) -> list[tuple[Sample, np.ndarray]]:
    """``n`` whole synthetic scenes as normalized samples.

    Returns ``(sample, clean_label)`` pairs; ``sample.label`` carries
    ``noise`` applied to the clean label.
    """
    stats = NormStats() if stats is None else stats
    out = []
    for k in range(n):
        base = f"{prefix}{k:04d}"
        rng = scene_rng(seed, base)
        scene, clean = generate_synthetic(cfg, rng)
        noisy = inject_label_noise(clean, noise, rng)
        channels = BandMode(band_mode).channels
        sample = Sample(
            input=normalize_planes(input_planes(scene, band_mode), channels, stats),
            label=noisy,
            base_id=base,
            channels=channels,
            id=base,
            transform=scene.transform,
            crs=scene.crs,
            timestamp=scene.timestamp,
        )
        out.append((sample, clean))
    return out
