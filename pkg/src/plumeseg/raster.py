"""
Multi-band raster scenes
------------------------
A ``RasterScene`` is an immutable, georeferenced stack of float32 planes with a
UTC timestamp. Scenes are stored on disk in a small container format::

    bytes 0-3    magic b"GRD1"
    bytes 4-7    little-endian uint32 header length H
    bytes 8..8+H UTF-8 JSON header
    payload      one little-endian float32 plane per channel, row-major,
                 in header channel order

The JSON header carries ``width``, ``height``, ``channels`` (names),
``transform`` (``[origin_x, pixel_w, col_rot, origin_y, row_rot, pixel_h]``),
``crs`` and ``timestamp`` (ISO-8601, UTC).
"""

from __future__ import annotations

import enum
import json
import struct
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from plumeseg.errors import BoundsError, ChannelError, CrsError, DataError, FormatError, IoError

MAGIC = b"GRD1"
REFLECTANCE_MAX = 1.3
GREEN_WEIGHTS = (0.45, 0.10, 0.45)  # (Red, Veggie, Blue)


class ChannelId(str, enum.Enum):
    BLUE = "Blue"
    RED = "Red"
    VEGGIE = "Veggie"
    C07 = "C07"
    C11 = "C11"
    GREEN_SYNTH = "GreenSynth"
    AOT = "AOT"
    MASK = "Mask"
    PROB = "Prob"

    def __str__(self):
        return self.value


REFLECTANCE = frozenset({ChannelId.BLUE, ChannelId.RED, ChannelId.VEGGIE, ChannelId.GREEN_SYNTH})


class BandMode(str, enum.Enum):
    """Input channel sets: true color, plus C07/C11, plus aerosol optical thickness."""

    ONE = "1band"
    THREE = "3band"
    FOUR = "4band"

    @property
    def channels(self) -> tuple[ChannelId, ...]:
        return _BAND_CHANNELS[self]

    @property
    def n_planes(self) -> int:
        return len(_BAND_CHANNELS[self])


_TRUE_COLOR = (ChannelId.RED, ChannelId.GREEN_SYNTH, ChannelId.BLUE)
_BAND_CHANNELS = {
    BandMode.ONE: _TRUE_COLOR,
    BandMode.THREE: _TRUE_COLOR + (ChannelId.C07, ChannelId.C11),
    BandMode.FOUR: _TRUE_COLOR + (ChannelId.C07, ChannelId.C11, ChannelId.AOT),
}


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel-to-map transform, GDAL coefficient order.

    ``x = origin_x + col * pixel_w + row * col_rot`` and
    ``y = origin_y + col * row_rot + row * pixel_h``, with (row, col) in
    continuous pixel space (pixel centers sit at half-integers).
    """

    origin_x: float = 0.0
    pixel_w: float = 1.0
    col_rot: float = 0.0
    origin_y: float = 0.0
    row_rot: float = 0.0
    pixel_h: float = -1.0

    def __post_init__(self):
        if self.pixel_w == 0 or self.pixel_h == 0:
            raise DataError("pixel size must be nonzero")
        if self.determinant == 0:
            raise DataError("geotransform is not invertible")

    @property
    def determinant(self) -> float:
        return self.pixel_w * self.pixel_h - self.col_rot * self.row_rot

    def pixel_to_map(self, row, col):
        x = self.origin_x + col * self.pixel_w + row * self.col_rot
        y = self.origin_y + col * self.row_rot + row * self.pixel_h
        return x, y

    def map_to_pixel(self, x, y):
        dx = np.asarray(x, dtype=np.float64) - self.origin_x
        dy = np.asarray(y, dtype=np.float64) - self.origin_y
        det = self.determinant
        col = (self.pixel_h * dx - self.col_rot * dy) / det
        row = (self.pixel_w * dy - self.row_rot * dx) / det
        return row, col

    def centers(self, height: int, width: int):
        """Map coordinates of every pixel center as two (height, width) arrays."""
        rows, cols = np.meshgrid(
            np.arange(height, dtype=np.float64) + 0.5,
            np.arange(width, dtype=np.float64) + 0.5,
            indexing="ij",
        )
        return self.pixel_to_map(rows, cols)

    def translated(self, row0: int, col0: int) -> GeoTransform:
        x, y = self.pixel_to_map(row0, col0)
        return GeoTransform(float(x), self.pixel_w, self.col_rot, float(y), self.row_rot, self.pixel_h)

    def to_list(self) -> list[float]:
        return [self.origin_x, self.pixel_w, self.col_rot, self.origin_y, self.row_rot, self.pixel_h]

    @classmethod
    def from_list(cls, values) -> GeoTransform:
        if len(values) != 6:
            raise FormatError("transform must have 6 coefficients")
        return cls(*(float(v) for v in values))


def _utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return _utc(ts).isoformat().replace("+00:00", "Z")


def parse_timestamp(text: str) -> datetime:
    try:
        return _utc(datetime.fromisoformat(text.strip().replace("Z", "+00:00")))
    except (AttributeError, ValueError) as exc:
        raise FormatError(f"bad ISO-8601 timestamp: {text!r}") from exc


@dataclass(frozen=True, eq=False)
class RasterScene:
    """Georeferenced multi-channel float32 grid.

    ``data`` has shape (channels, height, width) and is made read-only on
    construction. ``warnings`` collects ingestion notes (NaN fills, clipping)
    and is not part of scene identity.
    """

    data: np.ndarray
    channels: tuple[ChannelId, ...]
    transform: GeoTransform = field(default_factory=GeoTransform)
    crs: str = "EPSG:4326"
    timestamp: datetime = datetime(1970, 1, 1, tzinfo=timezone.utc)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise FormatError(f"scene data must be 3-D, got shape {data.shape}")
        channels = tuple(ChannelId(c) for c in self.channels)
        if len(channels) != data.shape[0]:
            raise FormatError(f"{len(channels)} channel names for {data.shape[0]} planes")
        if len(set(channels)) != len(channels):
            raise FormatError("channel ids must be unique")
        if not np.all(np.isfinite(data)):
            raise DataError("scene planes must be finite")
        for k, ch in enumerate(channels):
            plane = data[k]
            if ch in REFLECTANCE and plane.size and (plane.min() < 0 or plane.max() > REFLECTANCE_MAX):
                raise DataError(f"{ch} reflectance outside [0, {REFLECTANCE_MAX}]")
            if ch is ChannelId.MASK and not np.all((plane == 0) | (plane == 1)):
                raise DataError("Mask values must be 0 or 1")
            if ch is ChannelId.PROB and plane.size and (plane.min() < 0 or plane.max() > 1):
                raise DataError("Prob values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "timestamp", _utc(self.timestamp))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __contains__(self, channel) -> bool:
        return ChannelId(channel) in self.channels

    def plane(self, channel) -> np.ndarray:
        channel = ChannelId(channel)
        try:
            return self.data[self.channels.index(channel)]
        except ValueError:
            raise ChannelError(f"scene has no {channel} channel") from None

    def with_plane(self, channel, plane) -> RasterScene:
        """Return a new scene with ``channel`` added (or replaced)."""
        channel = ChannelId(channel)
        plane = np.asarray(plane, dtype=np.float32)
        if plane.shape != (self.height, self.width):
            raise FormatError(f"plane shape {plane.shape} != {(self.height, self.width)}")
        if channel in self.channels:
            data = self.data.copy()
            data[self.channels.index(channel)] = plane
            channels = self.channels
        else:
            data = np.concatenate([self.data, plane[None]], axis=0)
            channels = self.channels + (channel,)
        return RasterScene(data, channels, self.transform, self.crs, self.timestamp)

    def select(self, channels) -> RasterScene:
        channels = tuple(ChannelId(c) for c in channels)
        data = np.stack([self.plane(c) for c in channels]) if channels else np.zeros((0, self.height, self.width))
        return RasterScene(data, channels, self.transform, self.crs, self.timestamp)

    def __eq__(self, other):
        if not isinstance(other, RasterScene):
            return NotImplemented
        return (
            self.channels == other.channels
            and self.transform == other.transform
            and self.crs == other.crs
            and self.timestamp == other.timestamp
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def _header(scene: RasterScene) -> bytes:
    header = {
        "width": scene.width,
        "height": scene.height,
        "channels": [c.value for c in scene.channels],
        "transform": scene.transform.to_list(),
        "crs": scene.crs,
        "timestamp": format_timestamp(scene.timestamp),
    }
    return json.dumps(header).encode("utf-8")


def encoded_size(width: int, height: int, n_channels: int, header_len: int) -> int:
    return 8 + header_len + n_channels * width * height * 4


def write_scene(scene: RasterScene, path) -> None:
    if not scene.channels:
        raise FormatError("cannot write a scene with zero channels")
    header = _header(scene)
    payload = scene.data.astype("<f4", copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_scene(path, nan_tolerance: float = 0.01) -> RasterScene:
    """Read and validate a ``.grd`` scene.

    Planes with at most ``nan_tolerance`` NaN pixels have those pixels
    replaced by the channel median; more raise :class:`DataError`.
    Reflectance planes are clipped into ``[0, 1.3]``.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        width, height = int(header["width"]), int(header["height"])
        names = list(header["channels"])
        transform = GeoTransform.from_list(header["transform"])
        crs = str(header["crs"])
        timestamp = parse_timestamp(header["timestamp"])
        channels = tuple(ChannelId(n) for n in names)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if width < 0 or height < 0:
        raise FormatError(f"{path}: negative dimensions")
    payload = raw[8 + hlen :]
    expected = len(channels) * width * height * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(len(channels), height, width).astype(np.float32)

    notes = []
    n_pix = width * height
    for k, ch in enumerate(channels):
        plane = data[k]
        bad = np.isnan(plane)
        n_bad = int(bad.sum())
        if n_bad:
            if n_bad > nan_tolerance * n_pix:
                raise DataError(f"{path}: {ch} has {n_bad}/{n_pix} NaN pixels")
            fill = np.median(plane[~bad]) if n_bad < n_pix else 0.0
            plane[bad] = fill
            notes.append(f"{ch}: filled {n_bad} NaN pixels with median {fill:g}")
        if ch in REFLECTANCE and plane.size and (plane.min() < 0 or plane.max() > REFLECTANCE_MAX):
            np.clip(plane, 0.0, REFLECTANCE_MAX, out=plane)
            notes.append(f"{ch}: clipped to [0, {REFLECTANCE_MAX}]")
    for note in notes:
        warnings.warn(f"{path}: {note}", stacklevel=2)
    return RasterScene(data, channels, transform, crs, timestamp, warnings=tuple(notes))


def composite_true_color(scene: RasterScene) -> RasterScene:
    """Add a synthetic green plane built from Red, Veggie and Blue."""
    red, veggie, blue = (scene.plane(c) for c in (ChannelId.RED, ChannelId.VEGGIE, ChannelId.BLUE))
    wr, wv, wb = GREEN_WEIGHTS
    green = wr * red.astype(np.float64) + wv * veggie.astype(np.float64) + wb * blue.astype(np.float64)
    green = np.clip(green, 0.0, REFLECTANCE_MAX)
    return scene.with_plane(ChannelId.GREEN_SYNTH, green)


def crop_window(scene: RasterScene, row0: int, col0: int, size: int) -> RasterScene:
    if row0 < 0 or col0 < 0 or size < 0 or row0 + size > scene.height or col0 + size > scene.width:
        raise BoundsError(f"window ({row0}, {col0}, {size}) outside {scene.height}x{scene.width} scene")
    data = scene.data[:, row0 : row0 + size, col0 : col0 + size]
    return RasterScene(data, scene.channels, scene.transform.translated(row0, col0), scene.crs, scene.timestamp)


def nearest_indices(src_transform: GeoTransform, src_shape, x, y, k: int = 8):
    """Index of the src pixel whose center is closest (in map units) to each (x, y).

    A KD-tree proposes the ``k`` nearest centers; those are re-ranked with
    the exact squared distance, ties going to the smaller (row, col).
    """
    height, width = src_shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rr, cc = np.mgrid[0:height, 0:width]
    sx, sy = src_transform.pixel_to_map(rr + 0.5, cc + 0.5)
    tree = cKDTree(np.c_[sx.ravel(), sy.ravel()])
    k = min(k, height * width)
    _, idx = tree.query(np.c_[x.ravel(), y.ravel()], k=k)
    idx = idx.reshape(-1, k)
    d = (sx.ravel()[idx] - x.reshape(-1, 1)) ** 2 + (sy.ravel()[idx] - y.reshape(-1, 1)) ** 2
    # flat row-major index orders by (row, col)
    cand = np.where(d == d.min(axis=1, keepdims=True), idx, np.iinfo(np.int64).max)
    best = cand.min(axis=1)
    rows, cols = np.divmod(best, width)
    return rows.reshape(x.shape), cols.reshape(x.shape)


def resample_nearest(src: RasterScene, target: RasterScene, channel) -> RasterScene:
    """Carry ``channel`` from ``src`` onto the grid of ``target`` by nearest pixel center."""
    channel = ChannelId(channel)
    plane = src.plane(channel)
    if src.crs != target.crs:
        raise CrsError(f"CRS mismatch: {src.crs} vs {target.crs}")
    x, y = target.transform.centers(target.height, target.width)
    rows, cols = nearest_indices(src.transform, (src.height, src.width), x, y)
    return target.with_plane(channel, plane[rows, cols])


def stack_input(scene: RasterScene, band_mode) -> tuple[ChannelId, ...]:
    """Ordered input channels for ``band_mode``; raises if any is missing."""
    channels = BandMode(band_mode).channels
    missing = [c.value for c in channels if c not in scene.channels]
    if missing:
        raise ChannelError(f"{BandMode(band_mode).value} needs missing channels {missing}")
    return channels


def input_planes(scene: RasterScene, band_mode) -> np.ndarray:
    """(C, H, W) float32 stack of the band-mode input channels."""
    return np.stack([scene.plane(c) for c in stack_input(scene, band_mode)])
