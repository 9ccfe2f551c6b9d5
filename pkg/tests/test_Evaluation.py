#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: test_Evaluation.py
# ==================================

import json
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from aircast.constants import METRICS, POLLUTANTS
from aircast.Dataset import build_windows
from aircast.Evaluation import (AblationSpec, MetricsReport, ablation_deltas, emit_plot_data, evaluation_inits,
                                evaluation_states, forecast_states, holdout_split, interpolation_benchmark, parse_arms,
                                render_svg, run_ablation, run_ablation_suite, training_windows, window_report,
                                write_ablation, _observations)
from aircast.Forecaster import AirModel, ForecastBundle, ModelConfig, linear_interpolation
from aircast.metrics import compute_metrics
from aircast.Station import HOUR, StationSeries, compute_norm_stats
from aircast.Synthetic import synth_generate
from aircast.Trainer import TrainConfig, train_6h, train_interp
from aircast.utils import InputValidationError

from conftest import small_synth_config

QUANTILES = (0.1, 0.5, 0.9)


def _bundle(dataset, inits, leads=72, seed=None):
    """Hourly bundle whose quantiles all equal the observations (perturbed when `seed` is given)."""
    ids = [s.station.id for s in dataset.series]
    stub = ForecastBundle(inits, ids, QUANTILES, np.zeros((len(inits), leads//6, len(ids), 6, 3)),
                          np.zeros((len(inits), leads, len(ids), 6, 3)))
    obs = np.nan_to_num(_observations(stub, dataset), nan=1.)
    if seed is not None:
        obs = obs*np.random.default_rng(seed).uniform(0.8, 1.2, obs.shape)
    hourly = np.repeat(obs[..., None], 3, axis=-1)
    return ForecastBundle(inits, ids, QUANTILES, hourly[:, 5::6], hourly)


def test_holdout_split_uses_training_statistics(small_dataset):
    prepared, split = holdout_split(small_dataset, 0.2)
    assert split == small_dataset.times[192]
    head = [StationSeries(s.station, s.start_time, s.values[:192]) for s in small_dataset.series]
    assert_allclose(prepared.norm.mean, compute_norm_stats(head).mean, rtol=1e-12)
    assert_allclose(prepared.norm.std, compute_norm_stats(head).std, rtol=1e-12)
    with pytest.raises(InputValidationError):
        holdout_split(small_dataset, 1.)


def test_training_windows_end_before_split(small_dataset):
    prepared, split = holdout_split(small_dataset)
    six = training_windows(prepared, split)
    interp = training_windows(prepared, split, 'interp')
    assert six and interp
    assert max(w.anchor for w in six)+6*HOUR < split
    assert max(w.anchor for w in interp)+6*HOUR < split


def test_evaluation_inits(small_dataset):
    prepared, split = holdout_split(small_dataset)
    inits = evaluation_inits(prepared, split, 4)
    assert inits == [small_dataset.times[192], small_dataset.times[204]]
    assert evaluation_inits(prepared, split, 12) == []


def test_perfect_forecast_scores(small_dataset):
    times = small_dataset.times
    report = window_report([_bundle(small_dataset, times[[24, 48]])], small_dataset, 'perfect')
    assert report.lead_hours == list(range(1, 73))
    assert report.n_inits == 2
    for p in POLLUTANTS:
        assert_allclose(report.hourly[p]['RMSE'], 0., atol=1e-12)
        assert report.n_pairs[p] == [2*3]*72
        assert set(report.windows[p]) == {'1-24h', '25-48h', '49-72h'}
        for w in report.windows[p].values():
            assert w['n'] == 24*3*2
            assert w['MAE'] == 0.
            assert_allclose(w['R'], 1., rtol=1e-9)
        assert report.coverage[p] == 1.


def test_window_pools_bundles(small_dataset):
    times = small_dataset.times
    b1, b2 = _bundle(small_dataset, times[[12]], seed=1), _bundle(small_dataset, times[[60, 84]], seed=2)
    report = window_report([b1, b2], small_dataset)
    pred = np.concatenate([b1.median(), b2.median()])
    obs = np.concatenate([_observations(b1, small_dataset), _observations(b2, small_dataset)])
    for j, p in enumerate(POLLUTANTS):
        ms = compute_metrics(pred[:, 24:48, :, j], obs[:, 24:48, :, j])
        for m in METRICS:
            assert_allclose(report.windows[p]['25-48h'][m], ms[m], rtol=1e-12)
        hour1 = compute_metrics(pred[:, 0, :, j], obs[:, 0, :, j])
        assert_allclose(report.hourly[p]['RMSE'][0], hour1.RMSE, rtol=1e-12)


def test_partial_overlap_and_no_overlap(small_dataset):
    times = small_dataset.times
    tail = _bundle(small_dataset, times[[200]])
    report = window_report([tail], small_dataset)
    # 39 lead hours fall inside the record
    assert report.n_pairs['SO2'][38] == 3
    assert report.n_pairs['SO2'][39] == 0
    assert np.isnan(report.hourly['SO2']['RMSE'][50])
    ids = [s.station.id for s in small_dataset.series]
    late = ForecastBundle([times[-1]+100*HOUR], ids, QUANTILES, np.ones((1, 12, 3, 6, 3)))
    with pytest.raises(InputValidationError):
        window_report([late], small_dataset)


def test_report_files_round_trip(tmp_path, small_dataset):
    report = window_report([_bundle(small_dataset, small_dataset.times[[24]], seed=3)], small_dataset, 'ALL', 0.25)
    report.write(str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ['metrics.csv', 'metrics.json', 'windows.csv']
    frame = pd.read_csv(tmp_path/'metrics.csv')
    assert len(frame) == 6*len(METRICS)*72
    windows = pd.read_csv(tmp_path/'windows.csv')
    assert len(windows) == 6*3*len(METRICS)
    back = MetricsReport.read(str(tmp_path/'metrics.json'))
    assert back.label == 'ALL' and back.val_loss == 0.25
    assert back.lead_hours == report.lead_hours
    assert_allclose(back.to_frame()['value'], report.to_frame()['value'], rtol=1e-15, equal_nan=True)


def test_plot_outputs_are_reproducible(tmp_path, small_dataset):
    report = window_report([_bundle(small_dataset, small_dataset.times[[24]], seed=4)], small_dataset)
    paths = emit_plot_data(report, str(tmp_path))
    assert [os.path.basename(p) for p in paths] == [f'{m}.csv' for m in METRICS]
    df = pd.read_csv(paths[1])
    assert len(df) == 6*72
    assert set(df['pollutant']) == set(POLLUTANTS)
    again = str(tmp_path/'again.svg')
    render_svg(paths[1], again)
    with open(tmp_path/'plots'/'RMSE.svg', 'rb') as a, open(again, 'rb') as b:
        assert a.read() == b.read()


def test_ablation_specs():
    spec = AblationSpec('DEMET')
    assert not spec.use_met and spec.use_ems
    assert [s.exp_id for s in parse_arms('all, demet,ALL')] == ['ALL', 'DEMET']
    with pytest.raises(InputValidationError):
        AblationSpec('NO_MET')
    with pytest.raises(InputValidationError):
        parse_arms(' , ')


def test_ablation_spec_applies_inputs(small_model_config):
    cfg = AblationSpec('STN_ONLY').apply(small_model_config)
    assert not cfg.use_met and not cfg.use_ems
    assert cfg.d_model == small_model_config.d_model


def _fake_report(label, r, rrmse):
    windows = {p: {'1-24h': {'R': r, 'RMSE': 1., 'rRMSE': rrmse, 'MRE': 0.1, 'MAE': 1., 'n': 10}}
               for p in POLLUTANTS}
    hourly = {p: {m: [0.] for m in METRICS} for p in POLLUTANTS}
    return MetricsReport(label, [1], hourly, {p: [10] for p in POLLUTANTS}, windows)


def test_ablation_deltas(tmp_path):
    reports = {'ALL': _fake_report('ALL', 0.9, 0.3), 'DEMET': _fake_report('DEMET', 0.6, 0.5)}
    deltas = ablation_deltas(reports)
    assert list(deltas) == ['ALL-DEMET']
    assert_allclose(deltas['ALL-DEMET']['O3']['1-24h']['dR'], 0.3, rtol=1e-12)
    assert_allclose(deltas['ALL-DEMET']['O3']['1-24h']['drRMSE'], -0.2, rtol=1e-12)
    summary = write_ablation(str(tmp_path), reports)
    assert summary['arms'] == ['ALL', 'DEMET']
    with open(tmp_path/'ablation.json') as fp:
        assert json.load(fp)['deltas']['ALL-DEMET']['SO2']['1-24h']['dR'] == pytest.approx(0.3)
    assert os.path.exists(tmp_path/'report_DEMET.json')


def test_run_ablation_arm(small_dataset, small_model_config):
    tcfg = TrainConfig(epochs=1, batch_size=8)
    report = run_ablation(AblationSpec('STN_ONLY'), small_dataset, small_model_config, tcfg, seed=7, stride=6,
                          steps=4)
    assert report.label == 'STN_ONLY'
    assert report.lead_hours == [6, 12, 18, 24]
    assert report.n_inits == 2
    assert set(report.windows['PM2.5']) == {'1-24h'}
    assert np.isfinite(report.val_loss)
    again = run_ablation(AblationSpec('STN_ONLY'), small_dataset, small_model_config, tcfg, seed=7, stride=6,
                         steps=4)
    assert_allclose(again.to_frame()['value'], report.to_frame()['value'], rtol=0, equal_nan=True)


def test_interpolation_benchmark(small_dataset, small_model_config):
    prepared, split = holdout_split(small_dataset)
    windows = training_windows(prepared, split, 'interp', stride=6)
    imodel = AirModel(replace(small_model_config, zero_head=True), 'interp')
    scores = interpolation_benchmark(imodel, windows, batch_size=4)
    target = np.stack([w.target for w in windows])
    line = linear_interpolation(np.stack([w.x_prev for w in windows]), np.stack([w.x_curr for w in windows]))
    assert scores['n_windows'] == len(windows)
    assert_allclose(scores['linear'], np.sqrt(np.mean((line-target)**2)), rtol=1e-10)
    assert_allclose(scores['model'], scores['linear'], rtol=1e-10)
    with pytest.raises(InputValidationError):
        interpolation_benchmark(imodel, [])


# ---------------------------------------------------------------------
# training reproductions: default model width, 20 epochs of batches of 16 at lr 1e-3, stride-1 windows
# ---------------------------------------------------------------------

SIX_HOURLY = (0, 6, 12, 18)


@pytest.fixture(scope='module')
def trained_city():
    """A 45-day three-station city and the 6-h model trained on its first 36 days."""
    dataset = synth_generate(small_synth_config(days=45))
    prepared, split = holdout_split(dataset)
    model, _ = train_6h(training_windows(prepared, split, '6h', stride=1), ModelConfig.for_dataset(dataset),
                        TrainConfig(epochs=20))
    return dataset, prepared, split, model


def _mean_report(dataset, prepared, split, model, steps):
    state = evaluation_states(prepared, evaluation_inits(prepared, split, steps, SIX_HOURLY), steps, model.config)
    return window_report([forecast_states(model, state, prepared.norm)], dataset), state.n_inits


@pytest.mark.slow
def test_error_grows_and_levels_off(trained_city):
    report, n_inits = _mean_report(*trained_city, steps=12)
    assert n_inits >= 20
    rrmse = np.mean([report.hourly[p]['rRMSE'] for p in POLLUTANTS], axis=0)
    assert rrmse[11] >= rrmse[0]
    assert rrmse[11]-rrmse[6] < rrmse[5]-rrmse[0]


@pytest.mark.slow
def test_quantile_band_coverage(trained_city):
    report, _ = _mean_report(*trained_city, steps=1)
    coverage = np.mean([report.coverage[p] for p in POLLUTANTS])
    assert 0.6 <= coverage <= 0.95


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_interpolator_beats_linear(seed):
    dataset = synth_generate(small_synth_config(days=28, seed=seed))
    prepared, split = holdout_split(dataset)
    imodel, _ = train_interp(training_windows(prepared, split, 'interp', stride=1),
                             ModelConfig.for_dataset(dataset, seed=seed), TrainConfig(epochs=20, seed=seed))
    scores = interpolation_benchmark(imodel, build_windows(prepared, 1, 'interp', start=split))
    assert scores['model'] < scores['linear']


@pytest.mark.slow
def test_met_arm_wins_and_inert_emissions_do_not():
    # 28 days from Jan 1: a single emission map covers the record
    dataset = synth_generate(small_synth_config(days=28, ems_influence=0.))
    arms = parse_arms('ALL,DEMET,STN_ONLY')
    loss = {a.exp_id: [] for a in arms}
    for seed in range(3):
        reports = run_ablation_suite(arms, dataset, ModelConfig.for_dataset(dataset), TrainConfig(epochs=20),
                                     seed=seed, steps=4)
        for name, report in reports.items():
            loss[name].append(report.val_loss)
    loss = {k: np.array(v) for k, v in loss.items()}
    assert loss['ALL'].mean() < loss['STN_ONLY'].mean()
    noise = 2*max(loss['DEMET'].std(ddof=1), loss['STN_ONLY'].std(ddof=1))
    assert abs(loss['DEMET'].mean()-loss['STN_ONLY'].mean()) < noise
