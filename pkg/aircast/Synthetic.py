#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Synthetic.py
# ==================================
"""Synthetic city generator.
 Hourly met drivers (wind as slow sinusoids plus AR(1) anomalies, temperature, humidity, rain),
 monthly emission maps made of Gaussian hot spots, and station series built from a diurnal term,
 a seasonal term, a ventilation term driven by the local met, an emission term sampled upwind
 of every station, plus noise. The met and emission influences can be switched off to
 produce cities where one modality carries no signal."""

import logging
from dataclasses import dataclass, field, fields, asdict

import numpy as np
import pandas as pd

from aircast.constants import (POLLUTANTS, MET_CHANNELS, EMS_CHANNELS, EMS_SOURCE, CITY_PRESETS, PRESSURE_LEVELS,
                               HORIZON_HOURS, DAY_HOURS, YEAR_DAYS, PI)
from aircast.Dataset import CityDataset
from aircast.Grid import GridGeometry, FieldStack, bilinear_sample
from aircast.Station import HOUR, Station, StationSeries, to_hour, format_hour
from aircast.utils import ConfigError, substream

logger = logging.getLogger(__name__)

# typical city levels, CO in mg/m3
BASE_LEVEL = {'SO2': 10., 'NO2': 35., 'CO': 0.8, 'O3': 60., 'PM2.5': 40., 'PM10': 70.}
# hour of the diurnal maximum
DIURNAL_PEAK = {'SO2': 10., 'NO2': 20., 'CO': 20., 'O3': 15., 'PM2.5': 21., 'PM10': 19.}
# day of year of the seasonal maximum (winter haze, summer ozone)
SEASONAL_PEAK = {'SO2': 15., 'NO2': 15., 'CO': 15., 'O3': 196., 'PM2.5': 15., 'PM10': 60.}
# O3 is titrated where precursors are emitted
EMS_SIGN = {'SO2': 1., 'NO2': 1., 'CO': 1., 'O3': -0.5, 'PM2.5': 1., 'PM10': 1.}
FLOOR = 0.05  # fraction of the base level
KM_PER_DEG = 111.0


@dataclass
class SynthConfig:
    """ Generating parameters of one synthetic city.

    extent and resolution are in degrees; influences scale the ventilation and emission
    terms relative to the base level; `missing_rate` is the expected invalid fraction of
    every (station, pollutant) column, injected as runs of 1..8 hours.
    """
    city: str = 'beijing'
    n_stations: int = 11
    centre_lat: float = 39.90
    centre_lon: float = 116.40
    extent: float = 2.0
    resolution: float = 0.1
    start: str = '2023-01-01T00:00:00Z'
    days: int = 60
    met_channels: list = field(default_factory=lambda: list(MET_CHANNELS))
    ems_channels: list = field(default_factory=lambda: list(EMS_CHANNELS))
    noise_level: float = 0.05
    met_influence: float = 1.0
    ems_influence: float = 1.0
    diurnal_amplitude: float = 0.3
    seasonal_amplitude: float = 0.2
    advection_hours: float = 3.0
    missing_rate: float = 0.0
    seed: int = 0

    @classmethod
    def preset(cls, city, **overrides):
        key = city.lower()
        if key not in CITY_PRESETS:
            raise ConfigError(f"Unknown city: {city}. Supported cities: {'|'.join(CITY_PRESETS)}", fields=('city',))
        n_st, lat, lon = CITY_PRESETS[key]
        return cls(**dict(dict(city=key, n_stations=n_st, centre_lat=lat, centre_lon=lon), **overrides))

    @property
    def n_cells(self):
        return int(round(self.extent/self.resolution))

    def validate(self):
        bad = []
        if self.n_stations < 1:
            bad.append('n_stations')
        if not self.resolution > 0 or not self.extent > 0 or self.n_cells < 4:
            bad.append('extent/resolution (grid must be at least 4x4)')
        if self.days < 10:
            bad.append('days')
        if not -90 <= self.centre_lat <= 90:
            bad.append('centre_lat')
        if not -180 <= self.centre_lon <= 180:
            bad.append('centre_lon')
        if not self.met_channels or any(c not in MET_CHANNELS for c in self.met_channels) or \
                len(set(self.met_channels)) != len(self.met_channels):
            bad.append('met_channels')
        if not self.ems_channels or any(c not in EMS_CHANNELS for c in self.ems_channels) or \
                len(set(self.ems_channels)) != len(self.ems_channels):
            bad.append('ems_channels')
        for name in ('noise_level', 'met_influence', 'ems_influence', 'diurnal_amplitude', 'seasonal_amplitude',
                     'advection_hours'):
            if not getattr(self, name) >= 0:
                bad.append(name)
        if not 0 <= self.missing_rate < 0.5:
            bad.append('missing_rate')
        try:
            to_hour(self.start)
        except (ValueError, TypeError):
            bad.append('start')
        if bad:
            raise ConfigError(f"Invalid synthetic config, offending fields: {', '.join(bad)}", fields=bad)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d)-known)
        if unknown:
            raise ConfigError(f"Unknown synthetic config keys: {unknown}", fields=unknown)
        return cls(**d)


def _geometry(cfg):
    n = cfg.n_cells
    half = 0.5*n*cfg.resolution
    return GridGeometry(cfg.centre_lat-half, cfg.centre_lon-half, cfg.resolution, n, n)


def _stations(cfg, geometry):
    rng = substream(cfg.seed, 'synth:stations')
    span = 0.35*cfg.extent
    lats = cfg.centre_lat+rng.uniform(-span, span, cfg.n_stations)
    lons = cfg.centre_lon+rng.uniform(-span, span, cfg.n_stations)
    prefix = cfg.city[:3].upper()
    return [Station(f"{prefix}{k:03d}", float(la), float(lo)) for k, (la, lo) in enumerate(zip(lats, lons))]


def _ar1(rng, n, phi, sigma):
    out = np.empty(n)
    eps = rng.normal(0., sigma, n)
    out[0] = eps[0]/np.sqrt(1.-phi**2)
    for k in range(1, n):
        out[k] = phi*out[k-1]+eps[k]
    return out


def _drivers(cfg, n_hours):
    """Domain-wide hourly driver series. Wind has no diurnal component."""
    t = np.arange(n_hours, dtype=float)
    rng = substream(cfg.seed, 'synth:wind')
    ph_u, ph_v = rng.uniform(0, 2*PI, 2)
    u = 1.5+3.0*np.sin(2*PI*t/(4.3*DAY_HOURS)+ph_u)+_ar1(rng, n_hours, 0.97, 0.35)
    v = -0.5+2.5*np.sin(2*PI*t/(6.1*DAY_HOURS)+ph_v)+_ar1(rng, n_hours, 0.97, 0.35)
    return {'u': u, 'v': v,
            't': _ar1(substream(cfg.seed, 'synth:temperature'), n_hours, 0.95, 0.6),
            'q': _ar1(substream(cfg.seed, 'synth:humidity'), n_hours, 0.95, 0.3),
            'rain': _ar1(substream(cfg.seed, 'synth:rain'), n_hours, 0.9, 0.45)}


def _calendar(times):
    ts = pd.DatetimeIndex(times.astype('datetime64[ns]'))
    return ts.dayofyear.to_numpy().astype(float), ts.hour.to_numpy().astype(float)


def _met_at(cfg, drivers, times, lats, lons):
    """ Every known met channel at arbitrary points.
    :param lats, lons: arrays of one common shape S
    :return: {channel: [T, *S]}
    """
    doy, hod = _calendar(times)
    expand = (slice(None),)+(None,)*np.ndim(lats)
    gy = ((np.asarray(lats)-cfg.centre_lat)/(0.5*cfg.extent))[None]
    gx = ((np.asarray(lons)-cfg.centre_lon)/(0.5*cfg.extent))[None]
    u, v = drivers['u'][expand], drivers['v'][expand]
    # no calendar cycle in the met of a city without met influence: met and series stay independent
    cycle = 1. if cfg.met_influence > 0 else 0.
    t2m = (281.+cycle*(10.*np.cos(2*PI*(doy-200.)/YEAR_DAYS)+4.*np.sin(2*PI*(hod-9.)/DAY_HOURS)))[expand] \
        + drivers['t'][expand]-1.5*gy
    dew = t2m-6.-2.*np.tanh(drivers['q'][expand])+0.5*gx
    rain = np.maximum(drivers['rain'][expand]-0.9, 0.)*(1.+0.2*gy)
    out = {'U10M': u*(1.+0.05*gy), 'V10M': v*(1.+0.05*gx), 'T2M': t2m, 'D2M': dew, 'TP': rain}
    out['U100M'] = 1.3*out['U10M']
    out['V100M'] = 1.3*out['V10M']
    for k, level in enumerate(PRESSURE_LEVELS):
        height_km = 0.1+0.7*k
        out[f'U{level}'] = (1.4+0.3*k)*out['U10M']
        out[f'V{level}'] = (1.4+0.3*k)*out['V10M']
        out[f'T{level}'] = t2m-6.5*height_km
        out[f'SH{level}'] = 3.8e-3*np.exp((dew-273.15)/15.)*(level/1000.)
    return out


def _months(start, stop):
    m0 = np.datetime64(start, 'M')
    m1 = np.datetime64(stop, 'M')
    return np.arange(m0, m1+1).astype('datetime64[h]')


def _emission_stack(cfg, geometry, month_starts):
    rng = substream(cfg.seed, 'synth:ems')
    lat2, lon2 = np.meshgrid(geometry.lats, geometry.lons, indexing='ij')
    data = np.empty((len(month_starts), len(cfg.ems_channels), geometry.n_lat, geometry.n_lon))
    for i in range(len(month_starts)):
        for c in range(len(cfg.ems_channels)):
            field_ = np.full(lat2.shape, 0.2)
            for _ in range(3):
                la = cfg.centre_lat+rng.uniform(-0.4, 0.4)*cfg.extent
                lo = cfg.centre_lon+rng.uniform(-0.4, 0.4)*cfg.extent
                width = rng.uniform(0.075, 0.2)*cfg.extent
                field_ += rng.uniform(0.5, 1.5)*np.exp(-((lat2-la)**2+(lon2-lo)**2)/(2*width**2))
            data[i, c] = field_
    return FieldStack(geometry, cfg.ems_channels, month_starts, data)


def _noise_free(cfg, stations, times, ems, drivers):
    """ Noise-free concentrations [T, N, 6] given stations, hourly times, the emission stack
     and the driver series (which must cover `times`). """
    n_t = len(times)
    drivers = {k: v[:n_t] for k, v in drivers.items()}
    doy, hod = _calendar(times)
    lats = np.array([s.lat for s in stations])
    lons = np.array([s.lon for s in stations])

    met = _met_at(cfg, drivers, times, lats, lons)
    if cfg.met_influence > 0:
        speed = np.hypot(met['U10M'], met['V10M'])
        ventilation = -0.5*np.tanh((speed-3.)/2.)-0.3*np.tanh(met['TP'])
    else:
        ventilation = np.zeros((n_t, len(stations)))

    # emissions at the station and upwind of it, relative to the monthly domain mean
    g = ems.geometry
    disp = cfg.advection_hours*3600./(KM_PER_DEG*1000.)
    up_lat = np.clip(lats[None]-drivers['v'][:, None]*disp, g.lats[0], g.lats[-1])
    up_lon = np.clip(lons[None]-drivers['u'][:, None]*disp, g.lons[0], g.lons[-1])
    local = np.empty((len(ems.channels), n_t, len(stations)))
    upwind = np.empty_like(local)
    month_idx = np.searchsorted(ems.times, times, side='right')-1
    for i in np.unique(month_idx):
        sel = month_idx == i
        frame = ems.frame(i)
        frame.data /= frame.data.mean(axis=(1, 2), keepdims=True)
        local[:, sel] = bilinear_sample(frame, lats, lons)[:, None]
        upwind[:, sel] = bilinear_sample(frame, up_lat[sel], up_lon[sel])

    out = np.empty((n_t, len(stations), len(POLLUTANTS)))
    for p, name in enumerate(POLLUTANTS):
        src = EMS_SOURCE[name]
        if src in ems.channels:
            c = ems.channels.index(src)
            e_loc, e_up = local[c], upwind[c]
        else:
            e_loc, e_up = local.mean(axis=0), upwind.mean(axis=0)
        e = e_loc+cfg.met_influence*(e_up-e_loc)
        rel = (1.
               + cfg.diurnal_amplitude*np.cos(2*PI*(hod-DIURNAL_PEAK[name])/DAY_HOURS)[:, None]
               + cfg.seasonal_amplitude*np.cos(2*PI*(doy-SEASONAL_PEAK[name])/YEAR_DAYS)[:, None]
               + cfg.met_influence*ventilation
               + cfg.ems_influence*EMS_SIGN[name]*(e-1.))
        out[..., p] = BASE_LEVEL[name]*np.maximum(rel, FLOOR)
    return out


def _inject_gaps(cfg, n_t, n_st):
    valid = np.ones((n_t, n_st, len(POLLUTANTS)), dtype=bool)
    if cfg.missing_rate <= 0:
        return valid
    rng = substream(cfg.seed, 'synth:gaps')
    mean_len = 4.5
    for s in range(n_st):
        for p in range(len(POLLUTANTS)):
            for _ in range(rng.binomial(n_t, cfg.missing_rate/mean_len)):
                length = int(rng.integers(1, 9))
                t0 = int(rng.integers(0, n_t))
                valid[t0:t0+length, s, p] = False
    return valid


def synth_generate(config, seed=None):
    """ Generate a complete synthetic city.

    :param config: SynthConfig
    :param seed: overrides config.seed when given
    :return: CityDataset with the (seed-resolved) config embedded
    """
    if seed is not None:
        config = SynthConfig.from_dict(dict(config.to_dict(), seed=int(seed)))
    cfg = config.validate()
    geometry = _geometry(cfg)
    stations = _stations(cfg, geometry)
    start = to_hour(cfg.start)
    n_t = cfg.days*DAY_HOURS
    times = start+np.arange(n_t)*HOUR
    # met runs past the last observation so the last initializations still have 72 h of drivers
    n_met = n_t+HORIZON_HOURS
    met_times = start+np.arange(n_met)*HOUR
    drivers = _drivers(cfg, n_met)

    lat2, lon2 = np.meshgrid(geometry.lats, geometry.lons, indexing='ij')
    grids = _met_at(cfg, drivers, met_times, lat2, lon2)
    met = FieldStack(geometry, cfg.met_channels, met_times, np.stack([grids[c] for c in cfg.met_channels], axis=1))
    ems = _emission_stack(cfg, geometry, _months(start, met_times[-1]))

    clean = _noise_free(cfg, stations, times, ems, drivers)
    base = np.array([BASE_LEVEL[p] for p in POLLUTANTS])
    noise = substream(cfg.seed, 'synth:noise').normal(0., 1., clean.shape)*cfg.noise_level*base
    values = np.maximum(clean+noise, FLOOR*base)
    valid = _inject_gaps(cfg, n_t, len(stations))

    series = [StationSeries(st, start, values[:, k], valid[:, k]) for k, st in enumerate(stations)]
    logger.info("Generated %s: %d stations, %d hours from %s, grid %dx%d, %d met / %d ems channels, seed %d",
                cfg.city, len(stations), n_t, format_hour(start), geometry.n_lat, geometry.n_lon,
                len(cfg.met_channels), len(cfg.ems_channels), cfg.seed)
    return CityDataset(cfg.city, series, met, ems, cfg.to_dict())


def synth_formula(config, dataset):
    """ Noise-free generative values [T, N, 6] for a dataset generated from `config`. """
    cfg = config.validate()
    n_met = dataset.n_times+HORIZON_HOURS
    return _noise_free(cfg, dataset.stations, dataset.times, dataset.ems, _drivers(cfg, n_met))
