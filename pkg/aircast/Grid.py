#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Grid.py
# ==================================
"""Regular lat/lon rasters of meteorology or emission channels.
 The origin is the south-west corner of cell (0, 0); row i spans latitudes
 [origin_lat + i*res, origin_lat + (i+1)*res], column j likewise in longitude.
 Support bilinear regridding, point sampling, grid positional encoding,
 channel standardization and the sidecar-JSON + float32 file format."""

import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from aircast.Station import to_hour, format_hour
from aircast.utils import (InputValidationError, ShapeError, OutOfBoundsError, MissingArtifactError,
                           read_json, write_json)

logger = logging.getLogger(__name__)

_TOL = 1e-9


@dataclass(frozen=True)
class GridGeometry:
    origin_lat: float
    origin_lon: float
    resolution: float
    n_lat: int
    n_lon: int

    def __post_init__(self):
        if not self.resolution > 0:
            raise InputValidationError(f"Grid resolution must be > 0, got {self.resolution}")
        if self.n_lat < 1 or self.n_lon < 1:
            raise InputValidationError(f"Grid needs at least one cell, got {self.n_lat}x{self.n_lon}")

    @property
    def lats(self):
        """Cell-centre latitudes, south to north."""
        return self.origin_lat+(np.arange(self.n_lat)+0.5)*self.resolution

    @property
    def lons(self):
        return self.origin_lon+(np.arange(self.n_lon)+0.5)*self.resolution

    @property
    def n_cells(self):
        return self.n_lat*self.n_lon

    @property
    def centre(self):
        return (self.origin_lat+0.5*self.n_lat*self.resolution,
                self.origin_lon+0.5*self.n_lon*self.resolution)

    def to_dict(self):
        return {'origin_lat': self.origin_lat, 'origin_lon': self.origin_lon,
                'resolution': self.resolution, 'n_lat': self.n_lat, 'n_lon': self.n_lon}


class GriddedField(object):
    """ One time-stamped raster.

    :param geometry: GridGeometry
    :param channels: list of unique channel names
    :param time: valid time (UTC hour)
    :param data: [C, n_lat, n_lon] values
    """
    __slots__ = ('geometry', 'channels', 'time', 'data')

    def __init__(self, geometry, channels, time, data):
        channels = tuple(channels)
        if len(set(channels)) != len(channels):
            raise InputValidationError(f"Channel names must be unique, got {channels}")
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (len(channels), geometry.n_lat, geometry.n_lon):
            raise ShapeError(f"Grid data shape {data.shape} does not match "
                             f"({len(channels)}, {geometry.n_lat}, {geometry.n_lon})")
        self.geometry = geometry
        self.channels = channels
        self.time = to_hour(time)
        self.data = data

    @property
    def n_channels(self):
        return len(self.channels)


class FieldStack(object):
    """ Time-ordered frames sharing geometry and channels; data stored as float32
     (the on-disk precision) with shape [T, C, n_lat, n_lon]. """
    __slots__ = ('geometry', 'channels', 'times', 'data')

    def __init__(self, geometry, channels, times, data):
        channels = tuple(channels)
        if len(set(channels)) != len(channels):
            raise InputValidationError(f"Channel names must be unique, got {channels}")
        times = np.array([to_hour(t) for t in times], dtype='datetime64[h]')
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.shape != (len(times), len(channels), geometry.n_lat, geometry.n_lon):
            raise ShapeError(f"Stack data shape {data.shape} does not match "
                             f"({len(times)}, {len(channels)}, {geometry.n_lat}, {geometry.n_lon})")
        if len(times) > 1 and np.any(np.diff(times) <= np.timedelta64(0, 'h')):
            raise InputValidationError("Stack times must be strictly increasing")
        self.geometry = geometry
        self.channels = channels
        self.times = times
        self.data = data

    def __len__(self):
        return len(self.times)

    def index_of(self, time):
        t = to_hour(time)
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or self.times[i] != t:
            raise OutOfBoundsError(f"No frame valid at {format_hour(t)}")
        return i

    def index_at_or_before(self, time):
        """Frame in force at `time` (e.g. the monthly emission field of that month)."""
        t = to_hour(time)
        i = int(np.searchsorted(self.times, t, side='right'))-1
        if i < 0:
            raise OutOfBoundsError(f"No frame in force at {format_hour(t)}")
        return i

    def frame(self, i):
        return GriddedField(self.geometry, self.channels, self.times[i], self.data[i].astype(np.float64))


def check_same_geometry(*fields):
    geos = [f.geometry for f in fields]
    if any(g != geos[0] for g in geos[1:]):
        raise ShapeError(f"Grid geometry mismatch: {[g.to_dict() for g in geos]}")
    return geos[0]


def _interpolator(geometry, data):
    """data [C, n_lat, n_lon] -> RegularGridInterpolator over (lat, lon) with trailing channels."""
    if geometry.n_lat < 2 or geometry.n_lon < 2:
        raise ShapeError("Bilinear interpolation needs at least 2x2 source cells")
    return RegularGridInterpolator((geometry.lats, geometry.lons), np.moveaxis(data, 0, -1),
                                   method='linear', bounds_error=True)


def _check_inside(geometry, lats, lons):
    la, lo = geometry.lats, geometry.lons
    bad = ((lats < la[0]-_TOL) | (lats > la[-1]+_TOL) | (lons < lo[0]-_TOL) | (lons > lo[-1]+_TOL))
    if np.any(bad):
        k = int(np.argmax(bad))
        raise OutOfBoundsError(f"Point ({lats.flat[k]:.4f}, {lons.flat[k]:.4f}) outside the source cell-centre "
                               f"extent lat [{la[0]:.4f}, {la[-1]:.4f}], lon [{lo[0]:.4f}, {lo[-1]:.4f}]")


def bilinear_sample(field, lats, lons):
    """ Bilinear interpolation of the 4 surrounding cell centres at the given points.

    :param field: GriddedField
    :param lats, lons: arrays of the same shape
    :return: [C, *lats.shape]
    """
    lats, lons = np.broadcast_arrays(np.asarray(lats, dtype=float), np.asarray(lons, dtype=float))
    _check_inside(field.geometry, lats, lons)
    g = field.geometry
    pts = np.stack([np.clip(lats, g.lats[0], g.lats[-1]), np.clip(lons, g.lons[0], g.lons[-1])], axis=-1)
    out = _interpolator(g, field.data)(pts.reshape(-1, 2))
    return np.moveaxis(out, -1, 0).reshape((field.n_channels,)+lats.shape)


def bilinear_regrid(field, target_resolution, origin_lat=None, origin_lon=None, n_lat=None, n_lon=None):
    """ Resample a field onto a regular grid of `target_resolution` degrees.
     By default the target grid is the largest one whose cell centres lie within the
     source cell-centre extent; an explicit target (origin, counts) may be given instead.

    :return: GriddedField on the target grid
    """
    if not target_resolution > 0:
        raise InputValidationError(f"target_resolution must be > 0, got {target_resolution}")
    src = field.geometry
    if origin_lat is None:
        origin_lat = src.lats[0]
        n_lat = int(np.floor((src.lats[-1]-src.lats[0])/target_resolution+_TOL))
    if origin_lon is None:
        origin_lon = src.lons[0]
        n_lon = int(np.floor((src.lons[-1]-src.lons[0])/target_resolution+_TOL))
    if not n_lat or not n_lon:
        raise OutOfBoundsError(f"No target cell of {target_resolution} deg fits inside the source extent")
    tgt = GridGeometry(float(origin_lat), float(origin_lon), float(target_resolution), int(n_lat), int(n_lon))
    lat2, lon2 = np.meshgrid(tgt.lats, tgt.lons, indexing='ij')
    data = bilinear_sample(field, lat2, lon2)
    logger.debug("Regridded %dx%d @ %g deg -> %dx%d @ %g deg", src.n_lat, src.n_lon, src.resolution,
                 tgt.n_lat, tgt.n_lon, tgt.resolution)
    return GriddedField(tgt, field.channels, field.time, data)


def grid_pe(geometry, ref_lat, ref_lon, lat_range, lon_range):
    """ Two-channel positional encoding of cell centres relative to (ref_lat, ref_lon).
    :return: [2, n_lat, n_lon]: ((lat - ref_lat)/lat_range, (lon - ref_lon)/lon_range)
    """
    if not (lat_range > 0 and lon_range > 0):
        raise InputValidationError(f"PE ranges must be > 0, got {lat_range}, {lon_range}")
    lat2, lon2 = np.meshgrid(geometry.lats, geometry.lons, indexing='ij')
    return np.stack([(lat2-ref_lat)/lat_range, (lon2-ref_lon)/lon_range])


@dataclass(frozen=True)
class GridStats:
    """Per-channel mean/std of a FieldStack (population convention)."""
    channels: tuple
    mean: tuple
    std: tuple

    def to_dict(self):
        return {'channels': list(self.channels), 'mean': list(self.mean), 'std': list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d['channels']), tuple(float(v) for v in d['mean']), tuple(float(v) for v in d['std']))


def compute_grid_stats(stack, time_slice=slice(None)):
    data = stack.data[time_slice].astype(np.float64)
    mean = data.mean(axis=(0, 2, 3))
    std = data.std(axis=(0, 2, 3))
    # a channel that never varies is only centred
    std = np.where(std > 0, std, 1.)
    return GridStats(stack.channels, tuple(mean.tolist()), tuple(std.tolist()))


def standardize_channels(data, stats):
    """data [..., C, n_lat, n_lon] (float) -> standardized float64 copy."""
    mean = np.asarray(stats.mean).reshape(-1, 1, 1)
    std = np.asarray(stats.std).reshape(-1, 1, 1)
    return (np.asarray(data, dtype=np.float64)-mean)/std


# ---------------------------------------------------------------------
# Grid files: <stem>.json header + <stem>.bin little-endian float32,
# channel-major then row-major (lat rows, lon cols); stacks append frames.
# ---------------------------------------------------------------------

def write_grid(stem, field):
    header = field.geometry.to_dict()
    header.update({'channels': list(field.channels), 'time': format_hour(field.time)})
    write_json(stem+'.json', header)
    field.data.astype('<f4').tofile(stem+'.bin')


def _read_payload(stem, header, n_frames):
    geometry = GridGeometry(float(header['origin_lat']), float(header['origin_lon']), float(header['resolution']),
                            int(header['n_lat']), int(header['n_lon']))
    if not os.path.exists(stem+'.bin'):
        raise MissingArtifactError(f"Missing grid payload: {stem}.bin", path=stem+'.bin')
    raw = np.fromfile(stem+'.bin', dtype='<f4')
    shape = (n_frames, len(header['channels']), geometry.n_lat, geometry.n_lon)
    if raw.size != int(np.prod(shape)):
        raise ShapeError(f"{stem}.bin holds {raw.size} values, header implies {shape}")
    return geometry, raw.reshape(shape)


def read_grid(stem):
    header = read_json(stem+'.json')
    geometry, data = _read_payload(stem, header, 1)
    return GriddedField(geometry, header['channels'], header['time'], data[0])


def write_stack(stem, stack):
    header = stack.geometry.to_dict()
    header.update({'channels': list(stack.channels), 'time': format_hour(stack.times[0]),
                   'times': [format_hour(t) for t in stack.times]})
    write_json(stem+'.json', header)
    stack.data.astype('<f4').tofile(stem+'.bin')


def read_stack(stem):
    header = read_json(stem+'.json')
    geometry, data = _read_payload(stem, header, len(header['times']))
    return FieldStack(geometry, header['channels'], header['times'], data)
