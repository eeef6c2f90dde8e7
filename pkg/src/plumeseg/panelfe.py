"""
Station fixed-effects regression of PM2.5 on smoke exposure
-----------------------------------------------------------
Model: ``pm25[i, t] = beta1 * smoke[i, t] + alpha[i] + eps[i, t]`` with one
intercept per monitoring station, estimated by within-station demeaning.

With ``n`` observations, ``N`` stations and one regressor::

    RSS   = sum(eps_hat ** 2)
    TSS   = sum((y - mean(y)) ** 2)
    TSS_w = sum((y - station_mean(y)) ** 2)
    r2            = 1 - RSS / TSS
    adj_r2        = 1 - (RSS / (n - N - 1)) / (TSS / (n - 1))
    within_r2     = 1 - RSS / TSS_w
    within_adj_r2 = 1 - (RSS / (n - N - 1)) / (TSS_w / (n - N))
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime

import numpy as np

from plumeseg.annotations import AnnotationSet, point_in_polygon
from plumeseg.errors import DataError, DofError, FormatError, NoWithinVariationError, SingularError
from plumeseg.raster import GeoTransform, RasterScene

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Station:
    id: str
    x: float
    y: float
    crs: str = "EPSG:4326"


@dataclass(frozen=True)
class PanelObservation:
    station_id: str
    date: date
    pm25: float
    smoke: int

    def __post_init__(self):
        if not np.isfinite(self.pm25) or self.pm25 < 0:
            raise DataError(f"pm25 must be finite and >= 0, got {self.pm25}")
        if self.smoke not in (0, 1):
            raise DataError("smoke must be 0 or 1")


@dataclass
class FEResult:
    beta1: float
    station_effects: dict
    r2: float
    adj_r2: float
    within_r2: float
    within_adj_r2: float
    n_obs: int
    n_stations: int
    residuals: np.ndarray
    rss: float
    station_ids: list = field(default_factory=list)
    dates: list = field(default_factory=list)
    se: float | None = None  # reserved; standard errors are not estimated

    def summary(self) -> dict:
        keys = ("beta1", "r2", "adj_r2", "within_r2", "within_adj_r2", "n_obs", "n_stations")
        return {k: getattr(self, k) for k in keys}


# --- exposure -----------------------------------------------------------------


def _pixel_of(transform: GeoTransform, shape, x, y):
    row, col = transform.map_to_pixel(x, y)
    r, c = int(np.floor(row)), int(np.floor(col))
    if 0 <= r < shape[0] and 0 <= c < shape[1]:
        return r, c
    return None


def smoke_indicator(station: Station, sources) -> int:
    """1 if any of the day's sources puts smoke over the station.

    ``sources`` holds masks (``(mask, GeoTransform)`` pairs or ``Mask``
    scenes; the pixel containing the station is read) and/or annotation
    sets (point-in-polygon on every polygon). Masks not covering the station
    are skipped with a warning.
    """
    for src in sources:
        if isinstance(src, AnnotationSet):
            if any(point_in_polygon((station.x, station.y), p) for p in src.polygons):
                return 1
            continue
        if isinstance(src, RasterScene):
            mask, transform = src.data[0], src.transform
        else:
            mask, transform = src
        mask = np.asarray(mask)
        px = _pixel_of(transform, mask.shape, station.x, station.y)
        if px is None:
            log.warning("station %s lies outside a mask grid; mask skipped", station.id)
            continue
        if mask[px] != 0:
            return 1
    return 0


def build_panel(stations, pm25_records, exposure, dates=None) -> list[PanelObservation]:
    """Join PM2.5 readings with daily smoke exposure.

    ``pm25_records`` is an iterable of ``(station_id, date, pm25)``;
    ``exposure`` maps a date to that day's list of sources (see
    :func:`smoke_indicator`). Rows exist only where a reading exists; rows
    are ordered by (station_id, date).
    """
    readings = {}
    for sid, day, value in pm25_records:
        key = (sid, day)
        if key in readings:
            raise DataError(f"duplicate PM2.5 record for station {sid} on {day}")
        readings[key] = float(value)
    wanted = set(dates) if dates is not None else None
    rows = []
    for st in sorted(stations, key=lambda s: s.id):
        days = sorted(d for (sid, d) in readings if sid == st.id and (wanted is None or d in wanted))
        for day in days:
            rows.append(PanelObservation(st.id, day, readings[(st.id, day)], smoke_indicator(st, exposure.get(day, []))))
    return rows


# --- estimation ---------------------------------------------------------------


def _arrays(panel):
    panel = list(panel)
    ids = [o.station_id for o in panel]
    units, codes = np.unique(np.asarray(ids, dtype=object).astype(str), return_inverse=True)
    y = np.array([o.pm25 for o in panel], dtype=np.float64)
    x = np.array([o.smoke for o in panel], dtype=np.float64)
    return panel, units, codes, y, x


def _fit_stats(y, resid, codes, n_units, k=1):
    n = len(y)
    counts = np.bincount(codes, minlength=n_units)
    y_bar_i = np.bincount(codes, weights=y, minlength=n_units) / counts
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    tss_w = float(((y - y_bar_i[codes]) ** 2).sum())
    dof = n - n_units - k
    r2 = 1 - rss / tss if tss > 0 else float("nan")
    adj = 1 - (rss / dof) / (tss / (n - 1)) if tss > 0 else float("nan")
    wr2 = 1 - rss / tss_w if tss_w > 0 else float("nan")
    wadj = 1 - (rss / dof) / (tss_w / (n - n_units)) if tss_w > 0 else float("nan")
    return rss, r2, adj, wr2, wadj


def fe_fit(panel) -> FEResult:
    """Within (station-demeaned) estimator of the smoke coefficient."""
    panel, units, codes, y, x = _arrays(panel)
    n, N = len(y), len(units)
    if n < 2:
        raise DofError("need at least 2 observations")
    counts = np.bincount(codes, minlength=N)
    x_bar = np.bincount(codes, weights=x, minlength=N) / counts
    y_bar = np.bincount(codes, weights=y, minlength=N) / counts
    xt = x - x_bar[codes]
    yt = y - y_bar[codes]
    sxx = float(xt @ xt)
    if sxx <= 0:
        raise NoWithinVariationError("smoke does not vary within any station")
    if n <= N + 1:
        raise DofError(f"{n} observations leave no residual degrees of freedom with {N} stations")
    beta = float(xt @ yt) / sxx
    alpha = y_bar - beta * x_bar
    resid = y - alpha[codes] - beta * x
    rss, r2, adj, wr2, wadj = _fit_stats(y, resid, codes, N)
    return FEResult(
        beta1=beta,
        station_effects={str(u): float(a) for u, a in zip(units, alpha)},
        r2=r2,
        adj_r2=adj,
        within_r2=wr2,
        within_adj_r2=wadj,
        n_obs=n,
        n_stations=N,
        residuals=resid,
        rss=rss,
        station_ids=[o.station_id for o in panel],
        dates=[o.date for o in panel],
    )


def lsdv_oracle(panel) -> FEResult:
    """Dummy-variable OLS of y on [smoke, one column per station] (test oracle)."""
    panel, units, codes, y, x = _arrays(panel)
    n, N = len(y), len(units)
    design = np.zeros((n, N + 1))
    design[:, 0] = x
    design[np.arange(n), codes + 1] = 1.0
    gram = design.T @ design
    if np.linalg.matrix_rank(gram) < N + 1:
        raise SingularError("dummy-variable design is rank deficient")
    if n <= N + 1:
        raise DofError("no residual degrees of freedom")
    coef = np.linalg.solve(gram, design.T @ y)
    resid = y - design @ coef
    rss, r2, adj, wr2, wadj = _fit_stats(y, resid, codes, N)
    return FEResult(
        beta1=float(coef[0]),
        station_effects={str(u): float(a) for u, a in zip(units, coef[1:])},
        r2=r2,
        adj_r2=adj,
        within_r2=wr2,
        within_adj_r2=wadj,
        n_obs=n,
        n_stations=N,
        residuals=resid,
        rss=rss,
        station_ids=[o.station_id for o in panel],
        dates=[o.date for o in panel],
    )


# --- files --------------------------------------------------------------------


def _parse_date(text) -> date:
    try:
        return datetime.strptime(text.strip(), "%Y-%m-%d").date()
    except ValueError as exc:
        raise FormatError(f"bad date {text!r}, expected YYYY-MM-DD") from exc


def read_stations(path) -> list[Station]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    stations, seen = [], set()
    for row in rows:
        try:
            st = Station(row["station_id"], float(row["x"]), float(row["y"]), row.get("crs") or "EPSG:4326")
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad station row {row}") from exc
        if st.id in seen:
            raise DataError(f"duplicate station id {st.id}")
        seen.add(st.id)
        stations.append(st)
    return stations


def write_stations(stations, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "x", "y", "crs"])
        for s in stations:
            w.writerow([s.id, repr(s.x), repr(s.y), s.crs])


def read_pm25(path) -> list[tuple[str, date, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            return [(r["station_id"], _parse_date(r["date"]), float(r["pm25"])) for r in csv.DictReader(fh)]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad PM2.5 row ({exc})") from exc


def write_pm25(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "date", "pm25"])
        for sid, day, value in records:
            w.writerow([sid, day.isoformat(), repr(float(value))])


def write_result(result: FEResult, json_path, residuals_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(result.summary(), fh, indent=1)
    if residuals_path is not None:
        with open(residuals_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["station_id", "date", "residual"])
            for sid, day, e in zip(result.station_ids, result.dates, result.residuals):
                w.writerow([sid, day.isoformat(), repr(float(e))])


def daily_exposure(sources_by_time) -> dict:
    """Group ``(timestamp, source)`` pairs into ``{date: [sources]}``."""
    out = defaultdict(list)
    for ts, src in sources_by_time:
        out[ts.date()].append(src)
    return dict(out)
