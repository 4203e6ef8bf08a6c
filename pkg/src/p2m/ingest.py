"""External data acquisition: hourly 50 m wind speed from the NASA POWER
hourly API and wholesale electricity prices from CSV exports.

Regional wind is the mean over the API grid cells inside the region's
bounding box (single-cell retrieval is available for quick looks).  Fetches
are cached per region-year under ``cache/<region>/<year>.csv`` with atomic
writes, so repeated calls are idempotent and concurrent fetchers never see
partial files.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import requests

DEFAULT_API_BASE = "https://power.larc.nasa.gov/api/temporal/hourly/point"
API_BASE_ENV = "P2M_POWER_API_BASE"
WIND_PARAMETER = "WS50M"        # wind speed at 50 m; configuration, not gospel
CELL_STEP_DEG = 0.05
MAX_GAP_HOURS = 3
SPLIT_BOUNDARY = pd.Timestamp("2023-01-01T00:00:00")


@dataclass(frozen=True)
class RegionSpec:
    name: str
    lat_range: tuple[float, float]
    lon_range: tuple[float, float]
    tax_key: str

    def __post_init__(self):
        if self.lat_range[0] > self.lat_range[1] or self.lon_range[0] > self.lon_range[1]:
            raise ValueError(f"{self.name}: ranges must be ordered min <= max")


REGIONS = {
    "dunkirk": RegionSpec("dunkirk", (50.78, 51.23), (2.08, 2.53), "dunkirk"),
    "skive": RegionSpec("skive", (56.46, 56.66), (8.97, 9.07), "skive"),
    "fredericia": RegionSpec("fredericia", (55.46, 55.66), (9.64, 9.79), "fredericia"),
    "weener": RegionSpec("weener", (53.06, 53.26), (7.25, 7.40), "weener"),
}


class CurationError(ValueError):
    """Raised when fetched data cannot be curated into a gap-free archive."""


@dataclass
class Archive:
    region: str
    times: pd.DatetimeIndex     # hourly, strictly increasing, UTC
    values: np.ndarray
    kind: str                   # "wind" | "price"
    source: dict = field(default_factory=dict)
    split: str | None = None    # None | "train" | "validation"

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise ValueError("times and values must align")
        if len(self.times) > 1:
            deltas = np.diff(self.times.asi8)
            if not np.all(deltas == 3_600_000_000_000):
                raise ValueError(f"{self.region}: timestamps must be hourly with no gaps")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.region}: non-finite values present")
        if self.kind == "wind" and np.any(self.values < 0):
            raise ValueError(f"{self.region}: negative wind speeds present")

    def __len__(self) -> int:
        return len(self.values)

    def to_csv(self, path: str | Path) -> Path:
        from .artifacts import write_csv

        stamps = self.times.strftime("%Y-%m-%dT%H:%M:%SZ")
        return write_csv(path, ["timestamp_utc", "value"],
                         zip(stamps, self.values))

    @classmethod
    def from_csv(cls, path: str | Path, region: str, kind: str) -> "Archive":
        frame = pd.read_csv(path, float_precision="round_trip")
        times = pd.DatetimeIndex(pd.to_datetime(frame["timestamp_utc"], utc=True)
                                 ).tz_localize(None)
        return cls(region=region, times=times,
                   values=frame["value"].to_numpy(dtype=float), kind=kind,
                   source={"file": str(path)})


def _grid_cells(region: RegionSpec, cell_step: float, single_cell: bool):
    if single_cell:
        return [((region.lat_range[0] + region.lat_range[1]) / 2,
                 (region.lon_range[0] + region.lon_range[1]) / 2)]
    lats = np.arange(region.lat_range[0], region.lat_range[1] + 1e-9, cell_step)
    lons = np.arange(region.lon_range[0], region.lon_range[1] + 1e-9, cell_step)
    return [(float(la), float(lo)) for la in lats for lo in lons]


def _request_json(url: str, params: dict, retries: int = 3, backoff: float = 1.0,
                  session=None) -> dict:
    last = None
    for attempt in range(retries):
        try:
            getter = session.get if session is not None else requests.get
            resp = getter(url, params=params, timeout=60)
            if resp.status_code == 200:
                return resp.json()
            last = f"HTTP {resp.status_code}"
        except requests.RequestException as exc:
            last = repr(exc)
        time.sleep(backoff * (2**attempt))
    raise ConnectionError(f"NASA POWER request failed after {retries} tries: {last}")


def _fill_gaps(times: pd.DatetimeIndex, values: np.ndarray,
               region: str) -> np.ndarray:
    """Linear interpolation for gaps of up to MAX_GAP_HOURS; longer gaps are
    curation errors naming the span."""
    series = pd.Series(values, index=times)
    missing = series.isna()
    if not missing.any():
        return series.to_numpy()
    runs = []
    run_start = None
    for ts, is_na in missing.items():
        if is_na and run_start is None:
            run_start = ts
        elif not is_na and run_start is not None:
            runs.append((run_start, ts - pd.Timedelta(hours=1)))
            run_start = None
    if run_start is not None:
        runs.append((run_start, times[-1]))
    too_long = [(a, b) for a, b in runs
                if (b - a) / pd.Timedelta(hours=1) + 1 > MAX_GAP_HOURS]
    if too_long:
        spans = ", ".join(f"{a}..{b}" for a, b in too_long)
        raise CurationError(f"{region}: gaps longer than {MAX_GAP_HOURS}h: {spans}")
    filled = series.interpolate(method="linear", limit_area="inside")
    if filled.isna().any():
        edges = filled[filled.isna()].index
        raise CurationError(f"{region}: unfillable edge gaps at {list(edges[:4])}")
    return filled.to_numpy()


def fetch_wind(
    region: RegionSpec | str,
    start: str,
    end: str,
    cache_dir: str | Path = "cache",
    base_url: str | None = None,
    cell_step: float = CELL_STEP_DEG,
    single_cell: bool = False,
    session=None,
) -> Archive:
    """Hourly regional wind archive for [start, end] (inclusive dates).

    Whole calendar years are fetched and cached; the requested span is then
    sliced out.  Cell series within the region box are averaged.
    """
    if isinstance(region, str):
        region = REGIONS[region.lower()]
    base = base_url or os.environ.get(API_BASE_ENV, DEFAULT_API_BASE)
    start_ts = pd.Timestamp(start)
    end_ts = pd.Timestamp(end)
    if end_ts < start_ts:
        raise ValueError("end before start")

    cache_root = Path(cache_dir) / region.name
    cache_root.mkdir(parents=True, exist_ok=True)
    pieces = []
    for year in range(start_ts.year, end_ts.year + 1):
        cache_file = cache_root / f"{year}.csv"
        if cache_file.exists():
            pieces.append(Archive.from_csv(cache_file, region.name, "wind"))
            continue
        y_start = max(start_ts, pd.Timestamp(f"{year}-01-01"))
        y_end = min(end_ts, pd.Timestamp(f"{year}-12-31"))
        cells = _grid_cells(region, cell_step, single_cell)
        per_cell = []
        times = None
        for lat, lon in cells:
            payload = _request_json(base, {
                "parameters": WIND_PARAMETER,
                "community": "RE",
                "latitude": round(lat, 4),
                "longitude": round(lon, 4),
                "start": y_start.strftime("%Y%m%d"),
                "end": y_end.strftime("%Y%m%d"),
                "format": "JSON",
            }, session=session)
            hourly = payload["properties"]["parameter"][WIND_PARAMETER]
            keys = sorted(hourly)
            cell_times = pd.DatetimeIndex(
                pd.to_datetime(keys, format="%Y%m%d%H"))
            cell_vals = np.array([hourly[k] for k in keys], dtype=float)
            cell_vals[cell_vals <= -990] = np.nan   # API missing-value marker
            if times is None:
                times = cell_times
            elif not times.equals(cell_times):
                raise CurationError(f"{region.name}: cells returned differing hours")
            per_cell.append(cell_vals)
        stacked = np.vstack(per_cell)
        present = ~np.isnan(stacked)
        counts = present.sum(axis=0)
        sums = np.where(present, stacked, 0.0).sum(axis=0)
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        full_index = pd.date_range(times[0], times[-1], freq="h")
        series = pd.Series(values, index=times).reindex(full_index)
        filled = _fill_gaps(full_index, series.to_numpy(), region.name)
        year_archive = Archive(
            region=region.name, times=full_index, values=np.maximum(filled, 0.0),
            kind="wind",
            source={"url": base, "parameter": WIND_PARAMETER,
                    "cells": len(cells), "year": year})
        tmp = cache_file.with_suffix(".csv.tmp")
        year_archive.to_csv(tmp)
        os.replace(tmp, cache_file)      # atomic publish
        pieces.append(year_archive)

    times = pieces[0].times
    values = pieces[0].values
    for piece in pieces[1:]:
        times = times.append(piece.times)
        values = np.concatenate([values, piece.values])
    mask = (times >= start_ts) & (times <= end_ts + pd.Timedelta(hours=23))
    return Archive(region=region.name, times=times[mask], values=values[mask],
                   kind="wind",
                   source={"url": base, "parameter": WIND_PARAMETER,
                           "start": str(start_ts.date()), "end": str(end_ts.date())})


def load_prices(
    csv_path: str | Path,
    region: str,
    time_col: str = "Datetime (UTC)",
    price_col: str = "Price (EUR/MWhe)",
) -> Archive:
    """Parse a wholesale price CSV export into an hourly archive.

    Column names are configurable; currency is taken as provided.  Duplicate
    timestamps and unparseable rows are rejected, naming the offenders.
    """
    frame = pd.read_csv(csv_path)
    for col in (time_col, price_col):
        if col not in frame.columns:
            raise ValueError(f"{csv_path}: missing column {col!r}; "
                             f"have {list(frame.columns)}")
    times = pd.to_datetime(frame[time_col], utc=True, errors="coerce")
    bad_rows = np.flatnonzero(times.isna().to_numpy())
    prices = pd.to_numeric(frame[price_col], errors="coerce")
    bad_rows = sorted(set(bad_rows) | set(np.flatnonzero(prices.isna().to_numpy())))
    if bad_rows:
        shown = ", ".join(str(int(i) + 2) for i in bad_rows[:10])  # 1-based + header
        raise ValueError(f"{csv_path}: unparseable rows at lines {shown}")
    times = pd.DatetimeIndex(times).tz_localize(None)
    dupes = times[times.duplicated()]
    if len(dupes):
        raise ValueError(f"{csv_path}: duplicate timestamp {dupes[0]}")
    order = np.argsort(times.asi8, kind="stable")
    return Archive(region=region, times=times[order],
                   values=prices.to_numpy(dtype=float)[order], kind="price",
                   source={"file": str(csv_path)})


def split_label(ts: pd.Timestamp) -> str:
    return "train" if ts < SPLIT_BOUNDARY else "validation"


def make_splits(archive: Archive) -> tuple[Archive, Archive]:
    """Calendar split: hours before 2023 train, 2023 onward validation.
    A missing side comes back empty (flagged via its length)."""
    mask = archive.times < SPLIT_BOUNDARY
    train = Archive(region=archive.region, times=archive.times[mask],
                    values=archive.values[mask], kind=archive.kind,
                    source=archive.source, split="train")
    val = Archive(region=archive.region, times=archive.times[~mask],
                  values=archive.values[~mask], kind=archive.kind,
                  source=archive.source, split="validation")
    return train, val
