#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: test_Station.py
# ==================================

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from aircast.Station import (NormStats, Station, StationSeries, compute_norm_stats, denormalize, fill_gaps,
                             fill_gaps_all, normalize, read_station_csv, write_station_csv)
from aircast.utils import InputValidationError

T0 = '2023-01-01T00:00:00Z'


def _series(columns, sid='A', valid=None):
    """Station series with the same column repeated for all six pollutants."""
    values = np.repeat(np.asarray(columns, dtype=float)[:, None], 6, axis=1)
    return StationSeries(Station(sid, 39.9, 116.4), T0, values, valid)


def test_station_bounds():
    with pytest.raises(InputValidationError):
        Station('bad', 91., 0.)
    with pytest.raises(InputValidationError):
        Station('bad', 0., -181.)


def test_negative_concentration_rejected():
    with pytest.raises(InputValidationError):
        _series([1., -2., 3.])


def test_normalize_examples():
    stats = NormStats((4.,)*6, (1.632993,)*6)
    assert normalize(4., stats, 0) == 0.
    assert_allclose(normalize(6., stats, 0), 1.224745, atol=1e-6)
    identity = NormStats((0.,)*6, (1.,)*6)
    assert normalize(3.7, identity, 2) == 3.7


def test_normalize_round_trip():
    stats = NormStats((1., 20., 0.7, 55., 35., 70.), (0.5, 8., 0.3, 20., 15., 30.))
    x = np.random.default_rng(1).uniform(0., 200., (50, 6))
    assert_allclose(denormalize(normalize(x, stats), stats), x, rtol=1e-12)


def test_normalize_rejects_non_finite():
    stats = NormStats((0.,)*6, (1.,)*6)
    with pytest.raises(InputValidationError):
        normalize(np.nan, stats, 0)


def test_compute_norm_stats_population_std():
    stats = compute_norm_stats([_series([2., 4., 6.])])
    assert_allclose(stats.mean, [4.]*6)
    assert_allclose(stats.std, [1.632993]*6, atol=1e-6)


def test_compute_norm_stats_pools_stations():
    stats = compute_norm_stats([_series([1., 3.], 'A'), _series([5., 7.], 'B')])
    assert_allclose(stats.mean, [4.]*6)
    assert_allclose(stats.std, [np.sqrt(5.)]*6, rtol=1e-12)


def test_compute_norm_stats_zero_variance():
    with pytest.raises(InputValidationError, match='SO2'):
        compute_norm_stats([_series([5., 5., 5.])])


def test_fill_gaps_midpoint():
    s = _series([10., np.nan, 20.])
    out = fill_gaps(s, max_gap=1)
    assert_allclose(out.values[1], 15.)
    assert out.valid.all()
    # the input is untouched
    assert not s.valid[1].any()


def test_fill_gaps_long_and_boundary_gaps_stay():
    s = _series([np.nan, 1., np.nan, np.nan, np.nan, np.nan, 6., np.nan])
    out = fill_gaps(s, max_gap=3)
    assert_array_equal(out.valid[:, 0], [False, True, False, False, False, False, True, False])


def test_fill_gaps_keeps_valid_entries():
    rng = np.random.default_rng(3)
    values = rng.uniform(1., 50., (200, 6))
    values[rng.random((200, 6)) < 0.2] = np.nan
    s = StationSeries(Station('A', 30., 120.), T0, values)
    out = fill_gaps(s)
    assert_array_equal(out.values[s.valid], s.values[s.valid])
    assert out.valid.sum() >= s.valid.sum()


def test_fill_gaps_all_parallel_matches_serial():
    rng = np.random.default_rng(4)
    series = []
    for k in range(4):
        values = rng.uniform(1., 50., (100, 6))
        values[rng.random((100, 6)) < 0.1] = np.nan
        series.append(StationSeries(Station(f'S{3-k}', 30., 120.), T0, values))
    serial = fill_gaps_all(series)
    parallel = fill_gaps_all(series, n_jobs=3)
    assert [s.station.id for s in serial] == ['S0', 'S1', 'S2', 'S3']
    for a, b in zip(serial, parallel):
        assert_array_equal(a.valid, b.valid)
        assert_array_equal(a.values, b.values)


def test_station_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    values = rng.uniform(0., 100., (30, 6))
    values[4, 2] = np.nan
    series = [StationSeries(Station('B', 31.2, 121.5), T0, values),
              StationSeries(Station('A', 31.1, 121.4), T0, values[::-1].copy())]
    path = tmp_path/'stations.csv'
    write_station_csv(path, series)
    back = read_station_csv(path)
    assert [s.station.id for s in back] == ['A', 'B']
    by_id = {s.station.id: s for s in back}
    assert_array_equal(by_id['B'].valid, series[0].valid)
    assert_array_equal(by_id['B'].values[series[0].valid], series[0].values[series[0].valid])
    assert by_id['A'].station == series[1].station
