"""
Smoke plume annotations
-----------------------
Parse time-stamped plume polygons from GeoJSON, select those valid at a scene
time, and burn them into binary masks with a pixel-center rule.

Point-in-polygon uses even-odd ray casting toward +x over every ring, so holes
subtract. Edges are half-open in y (``[y_min, y_max)``) and a point lying
exactly on any edge is inside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from plumeseg.errors import CrsError, FormatError, IoError
from plumeseg.raster import GeoTransform, format_timestamp, parse_timestamp

DEFAULT_CRS = "EPSG:4326"


@dataclass(frozen=True, eq=False)
class PlumePolygon:
    rings: tuple[np.ndarray, ...]
    start: datetime
    end: datetime
    source_id: str = ""
    density: str | None = None

    def __post_init__(self):
        rings = []
        for ring in self.rings:
            ring = np.array(ring, dtype=np.float64)
            if ring.ndim != 2 or ring.shape[1] != 2:
                raise FormatError("ring must be an (n, 2) coordinate array")
            if len(ring) < 4 or not np.array_equal(ring[0], ring[-1]):
                raise FormatError("ring needs >= 4 points with first == last")
            ring.setflags(write=False)
            rings.append(ring)
        if not rings:
            raise FormatError("polygon has no rings")
        if ring_area(rings[0]) == 0:
            raise FormatError("exterior ring has zero area")
        if self.start > self.end:
            raise FormatError("start is after end")
        object.__setattr__(self, "rings", tuple(rings))

    @property
    def bounds(self):
        ext = self.rings[0]
        return ext[:, 0].min(), ext[:, 1].min(), ext[:, 0].max(), ext[:, 1].max()


@dataclass(frozen=True)
class AnnotationSet:
    polygons: tuple[PlumePolygon, ...] = ()
    crs: str = DEFAULT_CRS
    rejects: tuple[dict, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "polygons", tuple(self.polygons))
        object.__setattr__(self, "rejects", tuple(self.rejects))

    def __len__(self):
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)

    def union(self, other: AnnotationSet) -> AnnotationSet:
        if other.crs != self.crs:
            raise CrsError(f"CRS mismatch: {self.crs} vs {other.crs}")
        return AnnotationSet(self.polygons + other.polygons, self.crs, self.rejects + other.rejects)


def ring_area(ring) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def _crs_of(doc) -> str:
    crs = doc.get("crs")
    if crs is None:
        return DEFAULT_CRS
    if isinstance(crs, str):
        return crs
    try:
        return str(crs["properties"]["name"])
    except (KeyError, TypeError):
        raise FormatError("unrecognised crs member") from None


def _polygon_parts(geometry):
    gtype = geometry.get("type")
    coords = geometry.get("coordinates")
    if gtype == "Polygon":
        return [coords]
    if gtype == "MultiPolygon":
        return list(coords)
    raise FormatError(f"unsupported geometry type {gtype!r}")


def parse_annotations_doc(doc) -> AnnotationSet:
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise FormatError("annotations must be a GeoJSON FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise FormatError("FeatureCollection has no features list")
    crs = _crs_of(doc)
    polygons, rejects = [], []
    for index, feature in enumerate(features):
        props = (feature or {}).get("properties") or {}
        fid = str(feature.get("id", props.get("id", index))) if isinstance(feature, dict) else str(index)
        try:
            if "Start" not in props or "End" not in props:
                raise FormatError("missing Start/End")
            start, end = parse_timestamp(props["Start"]), parse_timestamp(props["End"])
            density = props.get("Density")
            parts = _polygon_parts(feature.get("geometry") or {})
            made = [
                PlumePolygon(tuple(np.asarray(r, dtype=np.float64)[:, :2] for r in part), start, end, fid, density)
                for part in parts
            ]
        except (FormatError, TypeError, ValueError, IndexError, AttributeError) as exc:
            rejects.append({"index": index, "id": fid, "reason": str(exc)})
            continue
        polygons.extend(made)
    return AnnotationSet(tuple(polygons), crs, tuple(rejects))


def parse_annotations(path) -> AnnotationSet:
    """Load a GeoJSON FeatureCollection of Polygon/MultiPolygon plumes.

    Features that cannot be turned into valid polygons (missing or inverted
    Start/End, degenerate rings, unsupported geometry) are listed in
    ``AnnotationSet.rejects`` rather than dropped silently.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return parse_annotations_doc(doc)


def write_rejects(rejects, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in rejects:
            fh.write(json.dumps(item) + "\n")


def annotations_to_geojson(aset: AnnotationSet) -> dict:
    features = []
    for k, poly in enumerate(aset.polygons):
        props = {"Start": format_timestamp(poly.start), "End": format_timestamp(poly.end)}
        if poly.density is not None:
            props["Density"] = poly.density
        features.append(
            {
                "type": "Feature",
                "id": poly.source_id or str(k),
                "properties": props,
                "geometry": {"type": "Polygon", "coordinates": [ring.tolist() for ring in poly.rings]},
            }
        )
    return {"type": "FeatureCollection", "crs": aset.crs, "features": features}


def write_annotations(aset: AnnotationSet, path) -> None:
    Path(path).write_text(json.dumps(annotations_to_geojson(aset)), encoding="utf-8")


def match_time(aset: AnnotationSet, t: datetime) -> AnnotationSet:
    """Polygons whose validity interval contains ``t`` (both ends inclusive)."""
    keep = tuple(p for p in aset.polygons if p.start <= t <= p.end)
    return AnnotationSet(keep, aset.crs)


def point_in_polygon(point, poly: PlumePolygon) -> bool:
    px, py = float(point[0]), float(point[1])
    inside = False
    for ring in poly.rings:
        for k in range(len(ring) - 1):
            x1, y1 = ring[k]
            x2, y2 = ring[k + 1]
            cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
            if cross == 0 and min(x1, x2) <= px <= max(x1, x2) and min(y1, y2) <= py <= max(y1, y2):
                return True
            if (y1 <= py < y2) or (y2 <= py < y1):
                x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                if px < x_cross:
                    inside = not inside
    return inside


def points_in_polygon(x, y, poly: PlumePolygon) -> np.ndarray:
    """Vectorised :func:`point_in_polygon` over arrays of map coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(x.shape, dtype=bool)
    on_edge = np.zeros(x.shape, dtype=bool)
    for ring in poly.rings:
        for k in range(len(ring) - 1):
            x1, y1 = ring[k]
            x2, y2 = ring[k + 1]
            cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
            on_edge |= (
                (cross == 0)
                & (min(x1, x2) <= x) & (x <= max(x1, x2))
                & (min(y1, y2) <= y) & (y <= max(y1, y2))
            )
            spans = ((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1))
            if not spans.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= spans & (x < x_cross)
    return inside | on_edge


def rasterize(aset: AnnotationSet, grid: GeoTransform, width: int, height: int, crs: str | None = None) -> np.ndarray:
    """Burn the union of polygons into a (height, width) uint8 mask.

    A pixel is 1 iff its center lies in any polygon.
    """
    if crs is not None and crs != aset.crs:
        raise CrsError(f"CRS mismatch: annotations {aset.crs} vs grid {crs}")
    mask = np.zeros((height, width), dtype=bool)
    if not aset.polygons or width == 0 or height == 0:
        return mask.astype(np.uint8)
    x, y = grid.centers(height, width)
    for poly in aset.polygons:
        xmin, ymin, xmax, ymax = poly.bounds
        cand = (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax) & ~mask
        if not cand.any():
            continue
        rows, cols = np.nonzero(cand)
        hit = points_in_polygon(x[rows, cols], y[rows, cols], poly)
        mask[rows[hit], cols[hit]] = True
    return mask.astype(np.uint8)


def mask_to_polygons(
    mask, grid: GeoTransform, start: datetime, end: datetime, source_id: str = "mask", crs: str = DEFAULT_CRS
) -> AnnotationSet:
    """Vectorise a mask into one rectangle per horizontal run of ones.

    Rasterizing the result on the same grid reproduces ``mask`` exactly.
    """
    mask = np.asarray(mask).astype(bool)
    polys = []
    for r in range(mask.shape[0]):
        row = np.concatenate([[False], mask[r], [False]])
        edges = np.flatnonzero(row[1:] != row[:-1])
        for c0, c1 in zip(edges[::2], edges[1::2]):
            corners = [(r, c0), (r, c1), (r + 1, c1), (r + 1, c0), (r, c0)]
            ring = np.array([grid.pixel_to_map(float(i), float(j)) for i, j in corners])
            polys.append(PlumePolygon((ring,), start, end, f"{source_id}:{r}:{c0}"))
    return AnnotationSet(tuple(polys), crs)

