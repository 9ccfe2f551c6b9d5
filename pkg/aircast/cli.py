#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: cli.py
# ==================================
"""Command-line entry point.

 aircast <command> [--config PATH] [--seed N] [--out DIR] [flags]

 Parameters resolve as dataclass defaults <- JSON config file <- flags. Every run directory
 receives the resolved config.json, run.log and timing.json next to the command outputs;
 failures exit with status 1 and one JSON line on stderr."""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, asdict

from aircast import __version__
from aircast.constants import ABLATION_ARMS, HORIZON_STEPS, INIT_HOURS, QUANTILES, STEP_HOURS
from aircast.Dataset import PreparedCity, build_windows, read_dataset, write_dataset
from aircast.Evaluation import (TEST_FRACTION, MetricsReport, emit_plot_data, evaluation_inits, evaluation_states,
                                forecast_states, holdout_split, interpolation_benchmark, parse_arms, run_ablation_suite,
                                training_windows, window_report, write_ablation)
from aircast.Forecaster import (AirModel, ModelConfig, check_model_pair, dump_attention, initial_state, norm_from_meta,
                               write_forecast_csv)
from aircast.Grid import GridStats
from aircast.Station import format_hour, to_hour
from aircast.Synthetic import SynthConfig, synth_generate
from aircast.Trainer import TrainConfig, train_6h, train_interp, verify_gradients
from aircast.utils import (AircastError, ConfigError, InputValidationError, MissingArtifactError, OutOfBoundsError,
                           read_json, setup_logging, write_json)

logger = logging.getLogger(__name__)

COMMANDS = ('synth', 'train', 'train-interp', 'forecast', 'evaluate', 'ablate', 'gradcheck', 'plot')


@dataclass
class RunConfig:
    """ Fully resolved parameters of one invocation; `synth`, `model` and `train` hold
     overrides of SynthConfig, ModelConfig and TrainConfig. """
    command: str = 'synth'
    seed: int = 0
    out: str = None
    city: str = 'beijing'
    data: str = None
    checkpoint: str = None
    interp_checkpoint: str = None
    init: str = None
    steps: int = HORIZON_STEPS
    quantiles: tuple = QUANTILES
    arms: tuple = ABLATION_ARMS
    dump_attention: bool = False
    report: str = None
    log_level: str = None
    test_fraction: float = TEST_FRACTION
    hourly: bool = False
    stride: int = 1
    n_jobs: int = 1
    synth: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def validate(self):
        bad = []
        if self.command not in COMMANDS:
            bad.append('command')
        if self.steps < 1:
            bad.append('steps')
        if not 0 < self.test_fraction < 1:
            bad.append('test_fraction')
        if self.stride < 1:
            bad.append('stride')
        if self.n_jobs < 1:
            bad.append('n_jobs')
        if bad:
            raise ConfigError(f"Invalid run config, offending fields: {', '.join(bad)}", fields=bad)
        return self

    def to_dict(self):
        d = asdict(self)
        d['quantiles'] = list(self.quantiles)
        d['arms'] = list(self.arms)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d)-known)
        if unknown:
            raise ConfigError(f"Unknown run config keys: {unknown}", fields=unknown)
        d = dict(d)
        if 'quantiles' in d:
            d['quantiles'] = tuple(float(q) for q in d['quantiles'])
        if 'arms' in d:
            d['arms'] = tuple(d['arms'])
        return cls(**d)

    def synth_config(self):
        return SynthConfig.preset(self.city, **dict(self.synth, seed=self.seed)).validate()

    def model_config(self, dataset):
        return ModelConfig.for_dataset(dataset, **dict(self.model, quantiles=self.quantiles, seed=self.seed))

    def train_config(self):
        return TrainConfig.from_dict(dict(self.train, quantiles=list(self.quantiles), seed=self.seed))


def _quantile_list(text):
    try:
        return tuple(float(q) for q in text.split(','))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"quantiles must be comma-separated numbers, got {text!r}") from e


def build_parser():
    p = argparse.ArgumentParser(prog='aircast', description='Station-level multi-pollutant air-quality forecasting.')
    p.add_argument('--version', action='version', version=f'aircast {__version__}')
    p.add_argument('command', choices=COMMANDS)
    p.add_argument('--config', help='JSON file with RunConfig fields')
    p.add_argument('--seed', type=int)
    p.add_argument('--out', help='run directory')
    p.add_argument('--city', help='synthetic city preset')
    p.add_argument('--data', help='dataset directory (synthesized from --city/--seed when absent)')
    p.add_argument('--checkpoint', help='6-h model checkpoint directory')
    p.add_argument('--interp-checkpoint', dest='interp_checkpoint', help='interpolation model checkpoint directory')
    p.add_argument('--init', help='initialization time, e.g. 2023-02-20T00:00:00Z')
    p.add_argument('--steps', type=int, help='number of 6-h steps')
    p.add_argument('--quantiles', type=_quantile_list, help='comma-separated quantile levels')
    p.add_argument('--arms', help='comma-separated ablation arms')
    p.add_argument('--report', help='metrics.json to plot')
    p.add_argument('--dump-attention', dest='dump_attention', action='store_true', default=None)
    p.add_argument('--hourly', action='store_true', default=None, help='ablate/evaluate with hourly frames')
    p.add_argument('--n-jobs', dest='n_jobs', type=int)
    p.add_argument('--log-level', dest='log_level', type=str.upper)
    return p


def resolve_config(args):
    """defaults <- --config file <- flags"""
    d = {}
    if args.config:
        d.update(read_json(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    d['command'] = args.command
    if isinstance(d.get('arms'), str):
        d['arms'] = tuple(s.exp_id for s in parse_arms(d['arms']))
    cfg = RunConfig.from_dict(d)
    if cfg.out is None:
        cfg.out = os.path.join('runs', cfg.command.replace('-', '_'))
    return cfg.validate()


# ---------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------

def load_dataset(cfg):
    if cfg.data:
        return read_dataset(cfg.data)
    logger.info("No --data given, synthesizing %s with seed %d", cfg.city, cfg.seed)
    return synth_generate(cfg.synth_config())


def _require(path, what):
    if not path:
        raise MissingArtifactError(f"Missing artifact: {what} (no checkpoint directory given)", path=None)
    if not os.path.exists(os.path.join(path, 'manifest.json')):
        raise MissingArtifactError(f"Missing {what}: {path}", path=path)
    return path


def prepared_from_meta(dataset, meta):
    """PreparedCity standardized with the statistics stored in a checkpoint."""
    return PreparedCity(dataset, norm_from_meta(meta), GridStats.from_dict(meta['met_stats']),
                        GridStats.from_dict(meta['ems_stats']))


def _load_models(cfg):
    model, meta = AirModel.load(_require(cfg.checkpoint, '--checkpoint'), '6h')
    imodel = None
    if cfg.interp_checkpoint:
        imodel, _ = AirModel.load(_require(cfg.interp_checkpoint, '--interp-checkpoint'), 'interp')
        check_model_pair(model, imodel)
    return model, imodel, meta


def _check_compatible(model, dataset):
    c = model.config
    g = dataset.geometry
    if (c.n_stations, c.n_lat, c.n_lon, c.n_met, c.n_ems) != (len(dataset.series), g.n_lat, g.n_lon,
                                                               len(dataset.met.channels), len(dataset.ems.channels)):
        raise InputValidationError(f"checkpoint was trained for {c.n_stations} stations on a {c.n_lat}x{c.n_lon} "
                                   f"grid; dataset {dataset.name} does not match")


def _latest_state(prepared, steps, mcfg):
    for t0 in reversed(prepared.times):
        if int(t0.astype(int) % 24) not in INIT_HOURS:
            continue
        try:
            return initial_state(prepared, t0, steps, mcfg.met_offset, mcfg.interp_met_offset)
        except (InputValidationError, OutOfBoundsError):
            continue
    raise InputValidationError(f"{prepared.dataset.name}: no initialization with complete inputs")


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------

def cmd_synth(cfg):
    dataset = synth_generate(cfg.synth_config())
    path = os.path.join(cfg.out, 'dataset')
    write_dataset(path, dataset)
    return {'dataset': path}


def _cmd_train(cfg, kind):
    dataset = load_dataset(cfg)
    mcfg = cfg.model_config(dataset)
    tcfg = cfg.train_config()
    prepared, split_time = holdout_split(dataset, cfg.test_fraction)
    offset = mcfg.met_offset if kind == '6h' else mcfg.interp_met_offset
    windows = training_windows(prepared, split_time, kind, cfg.stride, offset)
    model, report = (train_6h if kind == '6h' else train_interp)(windows, mcfg, tcfg)
    path = os.path.join(cfg.out, 'checkpoint')
    report.checkpoint = path
    model.save(path, {'norm': prepared.norm.to_dict(), 'met_stats': prepared.met_stats.to_dict(),
                      'ems_stats': prepared.ems_stats.to_dict(), 'split_time': format_hour(split_time),
                      'city': dataset.name, 'train_config': tcfg.to_dict()})
    write_json(os.path.join(cfg.out, 'train_report.json'), report.to_dict())
    return {'checkpoint': path, 'best_val_loss': report.best_val_loss, 'wall_clock': report.wall_clock}


def cmd_train(cfg):
    return _cmd_train(cfg, '6h')


def cmd_train_interp(cfg):
    return _cmd_train(cfg, 'interp')


def cmd_forecast(cfg):
    model, imodel, meta = _load_models(cfg)
    dataset = load_dataset(cfg)
    _check_compatible(model, dataset)
    prepared = prepared_from_meta(dataset, meta)
    mcfg = model.config
    if cfg.init:
        state = initial_state(prepared, to_hour(cfg.init), cfg.steps, mcfg.met_offset, mcfg.interp_met_offset)
    else:
        state = _latest_state(prepared, cfg.steps, mcfg)
    bundle = forecast_states(model, state, prepared.norm, imodel, cfg.steps)
    path = os.path.join(cfg.out, 'forecast.csv')
    write_forecast_csv(path, bundle)
    out = {'forecast': path, 'init_time': format_hour(bundle.init_times[0])}
    if cfg.dump_attention:
        att_dir = os.path.join(cfg.out, 'attention')
        for step in range(1, cfg.steps+1):
            dump_attention(att_dir, bundle, dataset.geometry, step)
        out['attention'] = att_dir
    return out


def cmd_evaluate(cfg):
    model, imodel, meta = _load_models(cfg)
    dataset = load_dataset(cfg)
    _check_compatible(model, dataset)
    prepared = prepared_from_meta(dataset, meta)
    start = to_hour(meta['split_time']) if 'split_time' in meta else dataset.times[STEP_HOURS]
    state = evaluation_states(prepared, evaluation_inits(prepared, start, cfg.steps), cfg.steps, model.config)
    bundle = forecast_states(model, state, prepared.norm, imodel, cfg.steps)
    report = window_report([bundle], dataset, label=os.path.basename(os.path.normpath(cfg.checkpoint)))
    report.write(cfg.out)
    out = {'metrics': os.path.join(cfg.out, 'metrics.json'), 'n_inits': report.n_inits}
    if imodel is not None:
        windows = build_windows(prepared, cfg.stride, 'interp', imodel.config.interp_met_offset, start=start)
        if windows:
            write_json(os.path.join(cfg.out, 'interp_benchmark.json'), interpolation_benchmark(imodel, windows))
            out['interp_benchmark'] = os.path.join(cfg.out, 'interp_benchmark.json')
    return out


def cmd_ablate(cfg):
    dataset = load_dataset(cfg)
    specs = parse_arms(list(cfg.arms))
    reports = run_ablation_suite(specs, dataset, cfg.model_config(dataset), cfg.train_config(), cfg.seed,
                                 cfg.n_jobs, hourly=cfg.hourly, stride=cfg.stride, test_fraction=cfg.test_fraction,
                                 steps=cfg.steps)
    write_ablation(cfg.out, reports)
    return {'arms': list(reports)}


def cmd_gradcheck(cfg):
    report = verify_gradients(seed=cfg.seed)
    write_json(os.path.join(cfg.out, 'gradcheck.json'), report)
    return {'max_rel_error': report['max_rel_error']}


def cmd_plot(cfg):
    if not cfg.report:
        raise MissingArtifactError("Missing artifact: --report (no metrics.json given)", path=None)
    paths = emit_plot_data(MetricsReport.read(cfg.report), cfg.out)
    return {'plots': paths}


COMMAND_FUNCS = {'synth': cmd_synth,
                 'train': cmd_train,
                 'train-interp': cmd_train_interp,
                 'forecast': cmd_forecast,
                 'evaluate': cmd_evaluate,
                 'ablate': cmd_ablate,
                 'gradcheck': cmd_gradcheck,
                 'plot': cmd_plot,
                 }


def _close_log_files():
    root = logging.getLogger('aircast')
    for h in list(root.handlers):
        if isinstance(h, logging.FileHandler):
            root.removeHandler(h)
            h.close()


def _fail(command, exc):
    sys.stderr.write(json.dumps({'error': type(exc).__name__, 'message': str(exc), 'command': command})+'\n')
    return 1


def main(argv=None):
    """ :return: exit status (0 ok, 1 failure, 2 usage error) """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        setup_logging(cfg.log_level, os.path.join(cfg.out, 'run.log'))
    except Exception as e:
        return _fail(args.command, e)
    write_json(os.path.join(cfg.out, 'config.json'), cfg.to_dict())
    logger.info("aircast %s %s -> %s", __version__, cfg.command, cfg.out)
    t0 = time.perf_counter()
    try:
        result = COMMAND_FUNCS[cfg.command](cfg)
    except AircastError as e:
        logger.error("%s failed: %s", cfg.command, e)
        return _fail(cfg.command, e)
    except Exception as e:
        logger.exception("%s crashed", cfg.command)
        return _fail(cfg.command, e)
    finally:
        write_json(os.path.join(cfg.out, 'timing.json'), {'command': cfg.command,
                                                          'wall_clock_s': time.perf_counter()-t0})
        _close_log_files()
    logger.info("%s done: %s", cfg.command, result)
    return 0


def run():
    sys.exit(main())


if __name__ == '__main__':
    run()
