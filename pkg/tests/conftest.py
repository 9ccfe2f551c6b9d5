#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: conftest.py
# ==================================

import numpy as np
import pytest

from aircast.Dataset import CityDataset
from aircast.Forecaster import ModelConfig
from aircast.Grid import FieldStack, GridGeometry
from aircast.Station import HOUR, Station, StationSeries
from aircast.Synthetic import SynthConfig, synth_generate

SMALL_SYNTH = dict(n_stations=3, days=10, extent=0.8, resolution=0.2)
SMALL_MODEL = dict(d_model=8, temb_dim=4, mlp_hidden=8, resnet_depth=1, resnet_width=4)


def small_synth_config(**overrides):
    return SynthConfig.preset('beijing', **dict(SMALL_SYNTH, **overrides))


def toy_city(n_t, n_st=2, nan_hours=(), seed=0):
    """Hand-built city on a 4x4 grid; `nan_hours` are set missing at station 0."""
    rng = np.random.default_rng(seed)
    geo = GridGeometry(39., 116., 0.5, 4, 4)
    t0 = np.datetime64('2023-01-01T00', 'h')
    series = []
    for k in range(n_st):
        values = 10.+5.*rng.random((n_t, 6))
        if k == 0:
            values[list(nan_hours)] = np.nan
        series.append(StationSeries(Station(f'S{k}', 39.5+0.2*k, 116.5+0.3*k), t0, values))
    met = FieldStack(geo, ('T2M', 'U10M'), t0+np.arange(n_t)*HOUR, rng.random((n_t, 2, 4, 4)))
    ems = FieldStack(geo, ('NOx', 'CO'), [t0], rng.random((1, 2, 4, 4)))
    return CityDataset('toy', series, met, ems)


@pytest.fixture(scope='session')
def small_dataset():
    return synth_generate(small_synth_config())


@pytest.fixture
def small_model_config(small_dataset):
    return ModelConfig.for_dataset(small_dataset, **SMALL_MODEL)
