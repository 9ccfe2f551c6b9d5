#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Station.py
# ==================================
"""Monitoring stations and their hourly pollutant series: normalization statistics,
 gap filling and the station CSV format."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numba import njit

from aircast.constants import POLLUTANTS, POLLUTANT_KEYS, N_POLLUTANTS, MAX_GAP_HOURS
from aircast.utils import InputValidationError, ShapeError, MissingArtifactError

logger = logging.getLogger(__name__)

HOUR = np.timedelta64(1, 'h')


def to_hour(t):
    """Any timestamp-like value -> numpy datetime64[h] (naive values are taken as UTC)."""
    ts = pd.Timestamp(t)
    if ts.tzinfo is not None:
        ts = ts.tz_convert('UTC').tz_localize(None)
    return np.datetime64(ts.floor('h'), 'h')


def format_hour(t):
    return pd.Timestamp(np.datetime64(t, 'h')).strftime('%Y-%m-%dT%H:00:00Z')


@dataclass(frozen=True)
class Station:
    """ A monitoring site.

    :param id: station identifier, unique within a city
    :param lat: latitude in degrees [-90, 90]
    :param lon: longitude in degrees [-180, 180]
    """
    id: str
    lat: float
    lon: float

    def __post_init__(self):
        if not -90 <= self.lat <= 90:
            raise InputValidationError(f"Station {self.id}: latitude {self.lat} outside [-90, 90]")
        if not -180 <= self.lon <= 180:
            raise InputValidationError(f"Station {self.id}: longitude {self.lon} outside [-180, 180]")


class StationSeries(object):
    """ Hourly concentrations of the pollutant sextet at one station.

    :param station: Station
    :param start_time: first hour (UTC)
    :param values: [T, 6] concentrations, ug/m3 except CO in mg/m3, axis order POLLUTANTS
    :param valid: [T, 6] boolean validity mask (defaults to finite entries)
    """
    __slots__ = ('station', 'start_time', 'values', 'valid')

    def __init__(self, station, start_time, values, valid=None):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != N_POLLUTANTS:
            raise ShapeError(f"Station {station.id}: values must be [T, {N_POLLUTANTS}], got {values.shape}")
        valid = np.isfinite(values) if valid is None else np.array(valid, dtype=bool)
        if valid.shape != values.shape:
            raise ShapeError(f"Station {station.id}: mask shape {valid.shape} != values shape {values.shape}")
        valid &= np.isfinite(values)
        if np.any(values[valid] < 0):
            raise InputValidationError(f"Station {station.id}: negative concentration among valid entries")
        values[~valid] = np.nan
        self.station = station
        self.start_time = to_hour(start_time)
        self.values = values
        self.valid = valid

    @property
    def n_times(self):
        return self.values.shape[0]

    @property
    def times(self):
        return self.start_time+np.arange(self.n_times)*HOUR

    def copy(self):
        return StationSeries(self.station, self.start_time, self.values.copy(), self.valid.copy())


@dataclass(frozen=True)
class NormStats:
    """ Per-pollutant mean and (population) standard deviation of one city's history. """
    mean: tuple
    std: tuple

    def __post_init__(self):
        if len(self.mean) != N_POLLUTANTS or len(self.std) != N_POLLUTANTS:
            raise ShapeError(f"NormStats needs {N_POLLUTANTS} means and stds")
        if not all(s > 0 for s in self.std):
            raise InputValidationError(f"NormStats std must be > 0, got {self.std}")

    def to_dict(self):
        return {'mean': list(self.mean), 'std': list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d['mean']), tuple(float(v) for v in d['std']))


def normalize(x, stats, pollutant=None):
    """ (x - mean)/std. With `pollutant=None` the last axis of `x` is the pollutant axis. """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputValidationError("normalize: non-finite input")
    mean, std = _stats_for(stats, pollutant)
    return (x-mean)/std


def denormalize(z, stats, pollutant=None):
    mean, std = _stats_for(stats, pollutant)
    return np.asarray(z, dtype=np.float64)*std+mean


def _stats_for(stats, pollutant):
    if pollutant is None:
        return np.asarray(stats.mean), np.asarray(stats.std)
    if stats.std[pollutant] <= 0:
        raise InputValidationError(f"std of {POLLUTANTS[pollutant]} must be > 0")
    return stats.mean[pollutant], stats.std[pollutant]


def compute_norm_stats(series):
    """ Pool the valid entries of all stations of a city and compute mean/std per pollutant
     (population convention, divide by N).

    :param series: list of StationSeries
    :return: NormStats
    """
    if not series:
        raise InputValidationError("compute_norm_stats: empty series list")
    means, stds = [], []
    for p, name in enumerate(POLLUTANTS):
        vals = np.concatenate([s.values[s.valid[:, p], p] for s in series])
        if vals.size < 2:
            raise InputValidationError(f"compute_norm_stats: fewer than 2 valid samples for {name}")
        mu = vals.mean()
        sd = np.sqrt(np.mean((vals-mu)**2))
        if not sd > 0:
            raise InputValidationError(f"compute_norm_stats: zero variance for {name}")
        means.append(float(mu))
        stds.append(float(sd))
    return NormStats(tuple(means), tuple(stds))


@njit(cache=True)
def _fill_runs(values, valid, max_gap):
    """Linear fill of interior invalid runs no longer than max_gap, per column, in place."""
    n_t, n_p = values.shape
    for p in range(n_p):
        last = -1
        for t in range(n_t):
            if valid[t, p]:
                gap = t-last-1
                if last >= 0 and 0 < gap <= max_gap:
                    v0 = values[last, p]
                    v1 = values[t, p]
                    for k in range(1, gap+1):
                        values[last+k, p] = v0+(v1-v0)*k/(gap+1)
                        valid[last+k, p] = True
                last = t


def fill_gaps(series, max_gap=MAX_GAP_HOURS):
    """ Fill interior gaps of length <= max_gap hours by linear interpolation between the
     bounding valid values. Longer gaps and gaps touching either end stay invalid.
     Originally valid entries are never altered; returns a new StationSeries. """
    if max_gap < 1:
        raise InputValidationError(f"fill_gaps: max_gap must be >= 1, got {max_gap}")
    out = series.copy()
    vals = np.where(out.valid, out.values, 0.)
    valid = out.valid.copy()
    _fill_runs(vals, valid, int(max_gap))
    vals[~valid] = np.nan
    out.values, out.valid = vals, valid
    return out


def fill_gaps_all(series, max_gap=MAX_GAP_HOURS, n_jobs=1):
    """ fill_gaps over a city, optionally on a thread pool; output ordered by station id. """
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            filled = list(pool.map(lambda s: fill_gaps(s, max_gap), series))
    else:
        filled = [fill_gaps(s, max_gap) for s in series]
    n_before = sum(int(s.valid.sum()) for s in series)
    n_after = sum(int(s.valid.sum()) for s in filled)
    logger.debug("fill_gaps: %d entries filled over %d stations", n_after-n_before, len(series))
    return sorted(filled, key=lambda s: s.station.id)


# ---------------------------------------------------------------------
# station CSV: time,station_id,lat,lon,so2,no2,co,o3,pm25,pm10
# ---------------------------------------------------------------------

CSV_COLUMNS = ('time', 'station_id', 'lat', 'lon')+POLLUTANT_KEYS


def series_to_frame(series):
    frames = []
    for s in series:
        df = pd.DataFrame(np.where(s.valid, s.values, np.nan), columns=list(POLLUTANT_KEYS))
        df.insert(0, 'lon', s.station.lon)
        df.insert(0, 'lat', s.station.lat)
        df.insert(0, 'station_id', s.station.id)
        df.insert(0, 'time', [format_hour(t) for t in s.times])
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def write_station_csv(path, series):
    series_to_frame(series).to_csv(path, index=False, na_rep='', float_format='%.17g')


def read_station_csv(path):
    """ Read the station CSV; hours missing from a station's rows become invalid entries.
    :return: list of StationSeries sorted by station id, all on a common hourly axis
    """
    try:
        df = pd.read_csv(path, dtype={'station_id': str})
    except FileNotFoundError as e:
        raise MissingArtifactError(f"Missing station CSV: {path}", path=path) from e
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise InputValidationError(f"{path}: missing columns {missing}")
    times = pd.to_datetime(df['time'], utc=True).dt.tz_localize(None)
    df = df.assign(hour=times.values.astype('datetime64[h]'))
    t0, t1 = df['hour'].min(), df['hour'].max()
    n_t = int((t1-t0)/HOUR)+1
    out = []
    for sid, grp in df.groupby('station_id', sort=True):
        station = Station(str(sid), float(grp['lat'].iloc[0]), float(grp['lon'].iloc[0]))
        values = np.full((n_t, N_POLLUTANTS), np.nan)
        idx = ((grp['hour'].values-np.datetime64(t0, 'h'))/HOUR).astype(int)
        values[idx] = grp[list(POLLUTANT_KEYS)].to_numpy(dtype=float)
        out.append(StationSeries(station, t0, values))
    return out
