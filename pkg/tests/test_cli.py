#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: test_cli.py
# ==================================

import json
import os

import pandas as pd
import pytest

from aircast.cli import COMMAND_FUNCS, RunConfig, build_parser, main, resolve_config
from aircast.utils import ConfigError

from conftest import SMALL_MODEL, SMALL_SYNTH


def _config_file(directory, **extra):
    path = os.path.join(str(directory), 'run.json')
    with open(path, 'w') as fp:
        json.dump(dict(dict(synth=SMALL_SYNTH, model=SMALL_MODEL, train={'epochs': 1, 'batch_size': 8}, stride=6,
                            steps=4), **extra), fp)
    return path


def _read_dir(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), 'rb') as fp:
            out[name] = fp.read()
    return out


@pytest.fixture(scope='module')
def trained(tmp_path_factory):
    """A synthesized dataset with both models trained on it."""
    root = tmp_path_factory.mktemp('cli')
    cfg = _config_file(root)
    assert main(['synth', '--config', cfg, '--out', str(root/'synth')]) == 0
    data = str(root/'synth'/'dataset')
    assert main(['train', '--config', cfg, '--data', data, '--out', str(root/'train')]) == 0
    assert main(['train-interp', '--config', cfg, '--data', data, '--out', str(root/'interp')]) == 0
    return root, cfg, data


def test_resolve_config_precedence(tmp_path):
    cfg_path = _config_file(tmp_path, seed=3, city='shanghai')
    args = build_parser().parse_args(['synth', '--config', cfg_path, '--seed', '9'])
    cfg = resolve_config(args)
    assert cfg.seed == 9
    assert cfg.city == 'shanghai'
    assert cfg.out == os.path.join('runs', 'synth')
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({'epochs': 3})


def test_arms_flag_is_parsed(tmp_path):
    args = build_parser().parse_args(['ablate', '--arms', 'stn_only,ALL', '--out', str(tmp_path)])
    assert resolve_config(args).arms == ('STN_ONLY', 'ALL')


def test_synth_is_reproducible(tmp_path):
    cfg = _config_file(tmp_path)
    assert main(['synth', '--config', cfg, '--seed', '4', '--out', str(tmp_path/'a')]) == 0
    assert main(['synth', '--config', cfg, '--seed', '4', '--out', str(tmp_path/'b')]) == 0
    assert _read_dir(tmp_path/'a'/'dataset') == _read_dir(tmp_path/'b'/'dataset')
    for name in ('config.json', 'run.log', 'timing.json'):
        assert os.path.exists(tmp_path/'a'/name)


def test_missing_checkpoint_fails(tmp_path, capsys):
    assert main(['forecast', '--out', str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err['error'] == 'MissingArtifactError'
    assert err['command'] == 'forecast'


def test_unexpected_error_is_reported(tmp_path, capsys, monkeypatch):
    def crash(cfg):
        raise RuntimeError('disk vanished')
    monkeypatch.setitem(COMMAND_FUNCS, 'gradcheck', crash)
    assert main(['gradcheck', '--out', str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err == {'error': 'RuntimeError', 'message': 'disk vanished', 'command': 'gradcheck'}
    assert os.path.exists(tmp_path/'timing.json')


def test_usage_errors(tmp_path):
    assert main(['bogus']) == 2
    assert main(['synth', '--steps', 'many']) == 2
    assert main(['synth', '--steps', '0', '--out', str(tmp_path)]) == 1


def test_train_writes_checkpoint(trained):
    root, _, _ = trained
    assert os.path.exists(root/'train'/'checkpoint'/'manifest.json')
    with open(root/'train'/'train_report.json') as fp:
        report = json.load(fp)
    assert report['kind'] == '6h'
    assert 'wall_clock' not in report
    with open(root/'train'/'checkpoint'/'manifest.json') as fp:
        meta = json.load(fp)['meta']
    assert {'norm', 'met_stats', 'ems_stats', 'split_time', 'model_config'} <= set(meta)


def test_forecast(trained, tmp_path):
    root, cfg, data = trained
    out = str(tmp_path/'fc')
    assert main(['forecast', '--config', cfg, '--data', data, '--checkpoint', str(root/'train'/'checkpoint'),
                 '--interp-checkpoint', str(root/'interp'/'checkpoint'), '--init', '2023-01-05T00:00:00Z',
                 '--dump-attention', '--out', out]) == 0
    df = pd.read_csv(os.path.join(out, 'forecast.csv'))
    assert len(df) == 24*3*6*3
    assert sorted(df['lead_hour'].unique()) == list(range(1, 25))
    assert os.path.exists(os.path.join(out, 'attention', 'site_attention_step04.csv'))


def test_evaluate_and_plot(trained, tmp_path):
    root, cfg, data = trained
    out = str(tmp_path/'ev')
    assert main(['evaluate', '--config', cfg, '--data', data, '--checkpoint', str(root/'train'/'checkpoint'),
                 '--out', out]) == 0
    with open(os.path.join(out, 'metrics.json')) as fp:
        metrics = json.load(fp)
    assert metrics['lead_hours'] == [6, 12, 18, 24]
    assert metrics['n_inits'] == 2
    plot_out = str(tmp_path/'pl')
    assert main(['plot', '--report', os.path.join(out, 'metrics.json'), '--out', plot_out]) == 0
    assert os.path.exists(os.path.join(plot_out, 'plots', 'MAE.svg'))


def test_evaluate_hourly(trained, tmp_path):
    root, cfg, data = trained
    out = str(tmp_path/'ev')
    assert main(['evaluate', '--config', cfg, '--data', data, '--checkpoint', str(root/'train'/'checkpoint'),
                 '--interp-checkpoint', str(root/'interp'/'checkpoint'), '--out', out]) == 0
    with open(os.path.join(out, 'metrics.json')) as fp:
        assert json.load(fp)['lead_hours'] == list(range(1, 25))
    with open(os.path.join(out, 'interp_benchmark.json')) as fp:
        bench = json.load(fp)
    assert bench['n_windows'] > 0
    assert bench['model'] > 0 and bench['linear'] > 0


def test_evaluate_rejects_other_city(trained, tmp_path):
    root, cfg, _ = trained
    other = _config_file(tmp_path, synth=dict(SMALL_SYNTH, n_stations=4))
    assert main(['evaluate', '--config', other, '--checkpoint', str(root/'train'/'checkpoint'),
                 '--out', str(tmp_path/'ev')]) == 1


def test_ablate(tmp_path):
    cfg = _config_file(tmp_path)
    out = tmp_path/'abl'
    assert main(['ablate', '--config', cfg, '--arms', 'ALL,STN_ONLY', '--out', str(out)]) == 0
    assert sorted(n for n in os.listdir(out) if n.startswith('report_')) == ['report_ALL.json',
                                                                             'report_STN_ONLY.json']
    with open(out/'ablation.json') as fp:
        summary = json.load(fp)
    assert summary['arms'] == ['ALL', 'STN_ONLY']


@pytest.mark.slow
def test_gradcheck(tmp_path):
    assert main(['gradcheck', '--out', str(tmp_path)]) == 0
    with open(tmp_path/'gradcheck.json') as fp:
        assert json.load(fp)['max_rel_error'] <= 1e-4
