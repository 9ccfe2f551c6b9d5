#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Dataset.py
# ==================================
"""City datasets: stations + hourly series + hourly met stack + monthly emission stack.
 Preprocessing (gap filling, standardization, positional/temporal encodings) and the
 construction of training/inference windows for the 6-h and the interpolation models."""

import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from aircast.constants import DEG2RAD, STEP_HOURS, MAX_GAP_HOURS
from aircast.Grid import (compute_grid_stats, standardize_channels, grid_pe, check_same_geometry,
                          read_stack, write_stack)
from aircast.Station import (HOUR, compute_norm_stats, fill_gaps_all, normalize, to_hour, format_hour,
                             read_station_csv, write_station_csv)
from aircast.utils import (InputValidationError, ShapeError, OutOfBoundsError, MissingArtifactError,
                           read_json, write_json)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeCode:
    """Day of year (1..366) and hour of day (0..23)."""
    doy: int
    hod: int

    def __post_init__(self):
        if not 1 <= self.doy <= 366:
            raise InputValidationError(f"doy must be in 1..366, got {self.doy}")
        if not 0 <= self.hod <= 23:
            raise InputValidationError(f"hod must be in 0..23, got {self.hod}")


def encode_time(t):
    """ UTC timestamp -> TimeCode (proleptic Gregorian, leap-aware). """
    ts = pd.Timestamp(to_hour(t))
    return TimeCode(int(ts.dayofyear), int(ts.hour))


def relative_pe(lat_i, lon_i, ref_lat, ref_lon, lat_range, lon_range):
    """ Relative positional encoding of a site w.r.t. a reference point.
     Degree differences are converted to radians before sin/cos.

    :return: [..., 4]: [sin(dlat)/lat_range, cos(dlat)/lat_range, sin(dlon)/lon_range, cos(dlon)/lon_range]
    """
    if not lat_range > 0 or not lon_range > 0:
        raise InputValidationError(f"PE ranges must be > 0, got lat_range={lat_range}, lon_range={lon_range}")
    dlat = (np.asarray(lat_i, dtype=float)-ref_lat)*DEG2RAD
    dlon = (np.asarray(lon_i, dtype=float)-ref_lon)*DEG2RAD
    return np.stack([np.sin(dlat)/lat_range, np.cos(dlat)/lat_range,
                     np.sin(dlon)/lon_range, np.cos(dlon)/lon_range], axis=-1)


class CityDataset(object):
    """ One city's complete data in physical units.

    :param name: city name
    :param series: list of StationSeries on a common hourly axis
    :param met: FieldStack of hourly meteorology
    :param ems: FieldStack of monthly emissions (frame valid from its month start)
    :param config: dict of the generating configuration (embedded in dataset directories)
    """
    __slots__ = ('name', 'series', 'met', 'ems', 'config')

    def __init__(self, name, series, met, ems, config=None):
        series = sorted(series, key=lambda s: s.station.id)
        ids = [s.station.id for s in series]
        if len(set(ids)) != len(ids):
            raise InputValidationError(f"Station ids must be unique within {name}: {ids}")
        if any(s.start_time != series[0].start_time or s.n_times != series[0].n_times for s in series):
            raise ShapeError(f"All stations of {name} must share one hourly axis")
        check_same_geometry(met, ems)
        self.name = name
        self.series = series
        self.met = met
        self.ems = ems
        self.config = config or {}

    @property
    def stations(self):
        return [s.station for s in self.series]

    @property
    def times(self):
        return self.series[0].times

    @property
    def n_times(self):
        return self.series[0].n_times

    @property
    def values(self):
        """[T, N_s, 6] physical concentrations (NaN where invalid)."""
        return np.stack([s.values for s in self.series], axis=1)

    @property
    def valid(self):
        return np.stack([s.valid for s in self.series], axis=1)

    @property
    def geometry(self):
        return self.met.geometry

    def station_pe(self):
        """Relative PE of every station w.r.t. the station centroid, scaled by the grid extent."""
        ref_lat, ref_lon, lat_range, lon_range = self.pe_reference()
        st = self.stations
        return relative_pe([s.lat for s in st], [s.lon for s in st], ref_lat, ref_lon, lat_range, lon_range)

    def grid_pe(self):
        ref_lat, ref_lon, lat_range, lon_range = self.pe_reference()
        return grid_pe(self.geometry, ref_lat, ref_lon, lat_range, lon_range)

    def pe_reference(self):
        st = self.stations
        g = self.geometry
        return (float(np.mean([s.lat for s in st])), float(np.mean([s.lon for s in st])),
                g.n_lat*g.resolution, g.n_lon*g.resolution)


class PreparedCity(object):
    """ A gap-filled, standardized view of a CityDataset, ready for window building. """
    __slots__ = ('dataset', 'times', 'z', 'valid', 'met', 'ems', 'met_index0', 'norm', 'met_stats', 'ems_stats',
                 'station_pe', 'grid_pe')

    def __init__(self, dataset, norm=None, met_stats=None, ems_stats=None, max_gap=MAX_GAP_HOURS, n_jobs=1):
        filled = fill_gaps_all(dataset.series, max_gap, n_jobs)
        self.dataset = dataset
        self.times = dataset.times
        self.norm = norm or compute_norm_stats(filled)
        self.met_stats = met_stats or compute_grid_stats(dataset.met)
        self.ems_stats = ems_stats or compute_grid_stats(dataset.ems)
        values = np.stack([s.values for s in filled], axis=1)
        self.valid = np.stack([s.valid for s in filled], axis=1)
        self.z = np.where(self.valid, normalize(np.where(self.valid, values, 0.), self.norm), 0.)
        self.met = standardize_channels(dataset.met.data, self.met_stats).astype(np.float32)
        self.ems = standardize_channels(dataset.ems.data, self.ems_stats).astype(np.float32)
        met_t = dataset.met.times
        if len(met_t) > 1 and np.any(np.diff(met_t) != HOUR):
            raise InputValidationError("The met stack must be hourly without holes")
        self.met_index0 = int((self.times[0]-met_t[0])/HOUR)
        self.station_pe = dataset.station_pe()
        self.grid_pe = dataset.grid_pe()

    @property
    def n_times(self):
        return len(self.times)

    def time_index(self, time):
        k = int((to_hour(time)-self.times[0])/HOUR)
        if not 0 <= k < self.n_times:
            raise OutOfBoundsError(f"{format_hour(to_hour(time))} outside the station record")
        return k

    def met_frame(self, k):
        """Standardized met frame at station-axis hour index k."""
        i = self.met_index0+k
        if not 0 <= i < self.met.shape[0]:
            raise OutOfBoundsError(f"No met frame for {format_hour(self.times[0]+k*HOUR)}")
        return self.met[i]

    def ems_frame(self, k):
        i = self.dataset.ems.index_at_or_before(self.times[0]+k*HOUR)
        return self.ems[i]


@dataclass
class SampleWindow:
    """ One training/inference instance.

    x_prev, x_curr: [N_s, 6] normalized inputs (X_{t-6}, X_t for the 6-h model;
    X_t, X_{t+6} for the interpolation model); met, ems: standardized [C, n_lat, n_lon];
    target: [N_s, 6] (6-h) or [5, N_s, 6] (interpolation) or None at inference.
    station_pe [N_s, 4] and grid_pe [2, n_lat, n_lon] are shared by all windows of a city.
    """
    x_prev: np.ndarray
    x_curr: np.ndarray
    met: np.ndarray
    ems: np.ndarray
    timecode: TimeCode
    target: np.ndarray
    anchor: np.datetime64
    kind: str = '6h'
    station_pe: np.ndarray = None
    grid_pe: np.ndarray = None


WINDOW_KINDS = ('6h', 'interp')


def build_windows(prepared, stride=1, kind='6h', met_offset=None, start=None, end=None):
    """ Enumerate windows over a prepared city.

     6h: anchor t needs valid X_{t-6}, X_t, X_{t+6}; inputs (X_{t-6}, X_t), target X_{t+6},
         met at t+met_offset (default 6, the predicted hour).
     interp: anchor t needs valid X_t..X_{t+6}; inputs (X_t, X_{t+6}), target X_{t+1..t+5},
         met at t+met_offset (default 3, the central hour).
     Windows with any invalid entry in their inputs or target are dropped.

    :param start, end: optional anchor-time bounds (inclusive)
    :return: list of SampleWindow in chronological order
    """
    if kind not in WINDOW_KINDS:
        raise InputValidationError(f"Unknown window kind {kind}. Supported kinds: {'|'.join(WINDOW_KINDS)}")
    if stride < 1:
        raise InputValidationError(f"stride must be >= 1, got {stride}")
    z, ok = prepared.z, prepared.valid.all(axis=2)  # [T, N] frame validity per station
    frame_ok = ok.all(axis=1)
    n_t = prepared.n_times
    if kind == '6h':
        first, last = STEP_HOURS, n_t-STEP_HOURS-1
        met_offset = STEP_HOURS if met_offset is None else met_offset
    else:
        first, last = 0, n_t-STEP_HOURS-1
        met_offset = STEP_HOURS//2 if met_offset is None else met_offset
    if start is not None:
        first = max(first, int((to_hour(start)-prepared.times[0])/HOUR))
    if end is not None:
        last = min(last, int((to_hour(end)-prepared.times[0])/HOUR))
    windows = []
    for t in range(first, last+1, stride):
        if kind == '6h':
            if not (frame_ok[t-STEP_HOURS] and frame_ok[t] and frame_ok[t+STEP_HOURS]):
                continue
            x_prev, x_curr, target = z[t-STEP_HOURS], z[t], z[t+STEP_HOURS]
        else:
            if not frame_ok[t:t+STEP_HOURS+1].all():
                continue
            x_prev, x_curr, target = z[t], z[t+STEP_HOURS], z[t+1:t+STEP_HOURS]
        try:
            met = prepared.met_frame(t+met_offset)
        except OutOfBoundsError:
            continue
        anchor = prepared.times[t]
        windows.append(SampleWindow(x_prev, x_curr, met, prepared.ems_frame(t), encode_time(anchor),
                                    target, anchor, kind, prepared.station_pe, prepared.grid_pe))
    if not windows:
        logger.warning("build_windows(%s, stride=%d) produced no window for %s", kind, stride,
                       prepared.dataset.name)
    else:
        logger.debug("build_windows(%s, stride=%d): %d windows", kind, stride, len(windows))
    return windows


def batch_windows(windows):
    """ Stack windows into model-ready float64 arrays. """
    if not windows:
        raise InputValidationError("batch_windows: empty window list")
    batch = {'x_prev': np.stack([w.x_prev for w in windows]).astype(np.float64),
             'x_curr': np.stack([w.x_curr for w in windows]).astype(np.float64),
             'met': np.stack([w.met for w in windows]).astype(np.float64),
             'ems': np.stack([w.ems for w in windows]).astype(np.float64),
             'doy': np.array([w.timecode.doy for w in windows]),
             'hod': np.array([w.timecode.hod for w in windows]),
             'station_pe': windows[0].station_pe,
             'grid_pe': windows[0].grid_pe}
    if windows[0].target is not None:
        batch['target'] = np.stack([w.target for w in windows]).astype(np.float64)
    return batch


def split_windows(windows, val_fraction):
    """Chronological split: the last `val_fraction` of windows are held out."""
    if not 0 < val_fraction < 1:
        raise InputValidationError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = max(1, int(round(len(windows)*val_fraction))) if len(windows) > 1 else 0
    return windows[:len(windows)-n_val], windows[len(windows)-n_val:]


# ---------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------

def write_dataset(path, dataset):
    os.makedirs(path, exist_ok=True)
    write_station_csv(os.path.join(path, 'stations.csv'), dataset.series)
    write_stack(os.path.join(path, 'met'), dataset.met)
    write_stack(os.path.join(path, 'ems'), dataset.ems)
    write_json(os.path.join(path, 'dataset.json'), {'name': dataset.name, 'n_stations': len(dataset.series),
                                                    'start': format_hour(dataset.times[0]),
                                                    'n_times': dataset.n_times})
    if dataset.config:
        write_json(os.path.join(path, 'synth_config.json'), dataset.config)
    logger.info("Wrote dataset %s (%d stations, %d hours) to %s", dataset.name, len(dataset.series),
                dataset.n_times, path)


def read_dataset(path):
    if not os.path.isdir(path):
        raise MissingArtifactError(f"Missing dataset directory: {path}", path=path)
    info = read_json(os.path.join(path, 'dataset.json'))
    series = read_station_csv(os.path.join(path, 'stations.csv'))
    if len(series) != info['n_stations']:
        raise ShapeError(f"{path}: expected {info['n_stations']} stations, found {len(series)}")
    met = read_stack(os.path.join(path, 'met'))
    ems = read_stack(os.path.join(path, 'ems'))
    cfg_path = os.path.join(path, 'synth_config.json')
    config = read_json(cfg_path) if os.path.exists(cfg_path) else None
    if series[0].n_times != info['n_times']:
        raise ShapeError(f"{path}: expected {info['n_times']} hours, found {series[0].n_times}")
    return CityDataset(info['name'], series, met, ems, config)
