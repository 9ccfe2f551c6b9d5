#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Evaluation.py
# ==================================
"""Hold-out evaluation of forecast bundles, reported per lead hour and per lead-time window,
 the four-arm input ablation, and the metric curves (CSV + SVG) derived from a report."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from aircast.constants import POLLUTANTS, METRICS, LEAD_WINDOWS, INIT_HOURS, STEP_HOURS, ABLATION_ARMS
from aircast.Dataset import PreparedCity, batch_windows, build_windows
from aircast.Forecaster import (ForecastBundle, hourly_forecast, initial_state, interpolate_frames,
                                linear_interpolation, rollout, stack_states, with_inputs)
from aircast.Grid import compute_grid_stats
from aircast.metrics import compute_metrics, interval_coverage
from aircast.Station import HOUR, StationSeries, compute_norm_stats, fill_gaps_all, format_hour, to_hour
from aircast.Trainer import train_6h, train_interp
from aircast.utils import InputValidationError, OutOfBoundsError, derive_seed, read_json, write_json

logger = logging.getLogger(__name__)

TEST_FRACTION = 0.2


# ---------------------------------------------------------------------
# hold-out protocol
# ---------------------------------------------------------------------

def holdout_split(dataset, test_fraction=TEST_FRACTION, max_gap=3):
    """ Chronological split of a city record. Normalization and channel statistics are taken
     from the training period only.

    :return: (PreparedCity, first test hour as datetime64[h])
    """
    if not 0 < test_fraction < 1:
        raise InputValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_t = dataset.n_times
    k_split = int(round(n_t*(1.-test_fraction)))
    if k_split < 2*STEP_HOURS+1 or n_t-k_split < 2*STEP_HOURS:
        raise InputValidationError(f"{dataset.name}: record of {n_t} h too short for a {test_fraction:g} hold-out")
    split_time = dataset.times[k_split]
    head = [StationSeries(s.station, s.start_time, s.values[:k_split], s.valid[:k_split]) for s in dataset.series]
    norm = compute_norm_stats(fill_gaps_all(head, max_gap))
    met0 = int((dataset.times[0]-dataset.met.times[0])/HOUR)
    met_stats = compute_grid_stats(dataset.met, slice(0, met0+k_split))
    ems_stats = compute_grid_stats(dataset.ems, slice(0, dataset.ems.index_at_or_before(split_time)+1))
    prepared = PreparedCity(dataset, norm, met_stats, ems_stats, max_gap)
    logger.info("%s: training period ends %s, %d test hours", dataset.name, format_hour(split_time), n_t-k_split)
    return prepared, split_time


def training_windows(prepared, split_time, kind='6h', stride=1, met_offset=None):
    """Windows whose inputs and targets all precede `split_time`."""
    return build_windows(prepared, stride, kind, met_offset, end=to_hour(split_time)-(STEP_HOURS+1)*HOUR)


def evaluation_inits(prepared, start, steps, init_hours=INIT_HOURS):
    """ Init times at `init_hours` UTC from `start` on whose whole horizon lies inside the record. """
    last = prepared.times[-1]-steps*STEP_HOURS*HOUR
    inits = [t for t in prepared.times if start <= t <= last and int(t.astype(int) % 24) in init_hours]
    return inits


def evaluation_states(prepared, inits, steps, mcfg):
    """Stacked InitialState of every usable init; inits with missing inputs are skipped."""
    states = []
    for t0 in inits:
        try:
            states.append(initial_state(prepared, t0, steps, mcfg.met_offset, mcfg.interp_met_offset))
        except (InputValidationError, OutOfBoundsError) as e:
            logger.debug("skipping init %s: %s", format_hour(t0), e)
    if not states:
        raise InputValidationError(f"{prepared.dataset.name}: no usable initialization in the test period")
    logger.info("%d of %d initializations usable", len(states), len(inits))
    return stack_states(states)


def forecast_states(model, state, norm, imodel=None, steps=None):
    """6-hourly bundle, or an hourly one when an interpolation model is given."""
    if imodel is not None:
        return hourly_forecast(model, imodel, state, norm, steps)
    six, attention = rollout(model, state, steps)
    return ForecastBundle.from_normalized(state, model.config.quantiles, norm, six, None, attention)


def interpolation_benchmark(imodel, windows, batch_size=64):
    """ RMSE (normalized units, all pollutants pooled) of the interpolation model's median and of
     straight-line interpolation on the same interp windows.

    :return: {'model': float, 'linear': float, 'n_windows': int}
    """
    if not windows:
        raise InputValidationError("interpolation_benchmark: no window")
    qm = imodel.config.q_median
    sq_model, sq_linear, n = 0., 0., 0
    for i in range(0, len(windows), batch_size):
        b = batch_windows(windows[i:i+batch_size])
        pred = interpolate_frames(imodel, b['x_prev'], b['x_curr'], b['met'], b['ems'], b['doy'], b['hod'],
                                  b['station_pe'], b['grid_pe'])[..., qm]
        line = linear_interpolation(b['x_prev'], b['x_curr'])
        sq_model += float(np.sum((pred-b['target'])**2))
        sq_linear += float(np.sum((line-b['target'])**2))
        n += b['target'].size
    out = {'model': float(np.sqrt(sq_model/n)), 'linear': float(np.sqrt(sq_linear/n)), 'n_windows': len(windows)}
    logger.info("interpolation RMSE %.4f (linear %.4f) over %d windows", out['model'], out['linear'], len(windows))
    return out


# ---------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------

class MetricsReport(object):
    """ Scores of the median forecast.

    hourly[pollutant][metric]: one value per entry of `lead_hours` (NaN where < 2 pairs);
    n_pairs[pollutant]: pair counts per lead hour;
    windows[pollutant][window]: metrics over the pooled pairs of the window plus 'n';
    coverage[pollutant]: share of observations inside the outer quantile band.
    """
    __slots__ = ('label', 'lead_hours', 'hourly', 'n_pairs', 'windows', 'coverage', 'val_loss', 'n_inits')

    def __init__(self, label, lead_hours, hourly, n_pairs, windows, coverage=None, val_loss=None, n_inits=0):
        self.label = label
        self.lead_hours = [int(h) for h in lead_hours]
        self.hourly = hourly
        self.n_pairs = n_pairs
        self.windows = windows
        self.coverage = coverage or {}
        self.val_loss = val_loss
        self.n_inits = n_inits

    @property
    def pollutants(self):
        return list(self.hourly)

    def to_dict(self):
        return {'label': self.label, 'lead_hours': self.lead_hours, 'hourly': self.hourly, 'n_pairs': self.n_pairs,
                'windows': self.windows, 'coverage': self.coverage, 'val_loss': self.val_loss,
                'n_inits': self.n_inits}

    @classmethod
    def from_dict(cls, d):
        def nan(v):
            return float('nan') if v is None else v
        hourly = {p: {m: [nan(v) for v in vals] for m, vals in ms.items()} for p, ms in d['hourly'].items()}
        windows = {p: {w: {k: nan(v) for k, v in ms.items()} for w, ms in ws.items()}
                   for p, ws in d['windows'].items()}
        return cls(d['label'], d['lead_hours'], hourly, d['n_pairs'], windows, d.get('coverage'),
                   d.get('val_loss'), d.get('n_inits', 0))

    @classmethod
    def read(cls, path):
        return cls.from_dict(read_json(path))

    def to_frame(self):
        """Flat rows: pollutant, lead_hour, metric, value, n_pairs."""
        rows = []
        for p in self.pollutants:
            for m in METRICS:
                for h, v, n in zip(self.lead_hours, self.hourly[p][m], self.n_pairs[p]):
                    rows.append((p, h, m, v, n))
        return pd.DataFrame(rows, columns=['pollutant', 'lead_hour', 'metric', 'value', 'n_pairs'])

    def windows_frame(self):
        rows = [(p, w, m, ms[m], ms['n']) for p in self.pollutants for w, ms in self.windows[p].items()
                for m in METRICS]
        return pd.DataFrame(rows, columns=['pollutant', 'window', 'metric', 'value', 'n_pairs'])

    def write(self, out_dir, stem='metrics'):
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, f'{stem}.json'), self.to_dict())
        self.to_frame().to_csv(os.path.join(out_dir, f'{stem}.csv'), index=False, float_format='%.17g')
        windows_name = 'windows.csv' if stem == 'metrics' else f'{stem}_windows.csv'
        self.windows_frame().to_csv(os.path.join(out_dir, windows_name), index=False, float_format='%.17g')


def _observations(bundle, dataset):
    """[B, leads, N_s, 6] raw observations matching the bundle frames (NaN where unknown)."""
    values = np.where(dataset.valid, dataset.values, np.nan)
    order = {s.station.id: i for i, s in enumerate(dataset.series)}
    try:
        cols = [order[sid] for sid in bundle.station_ids]
    except KeyError as e:
        raise InputValidationError(f"forecast station {e} not in {dataset.name}") from e
    k = ((bundle.init_times[:, None]-dataset.times[0])/HOUR).astype(int)+bundle.lead_hours[None, :]
    inside = (k >= 0) & (k < dataset.n_times)
    obs = values[np.clip(k, 0, dataset.n_times-1)][:, :, cols]
    obs[~inside] = np.nan
    return obs


def _metric_values(pred, obs):
    try:
        ms = compute_metrics(pred, obs)
    except InputValidationError:
        return {m: float('nan') for m in METRICS}, 0
    return {m: ms[m] for m in METRICS}, ms.n


def window_report(bundles, dataset, label='', val_loss=None, lead_windows=LEAD_WINDOWS):
    """ Score the median of every bundle against the raw observations of `dataset`.
     Window entries pool all (init, hour, station) pairs with a lead hour inside the window.

    :param bundles: list of ForecastBundle sharing one lead-hour axis
    :return: MetricsReport
    """
    if not bundles:
        raise InputValidationError("window_report: no forecast bundle")
    leads = bundles[0].lead_hours
    if any(not np.array_equal(b.lead_hours, leads) for b in bundles):
        raise InputValidationError("window_report: bundles have different lead hours")
    pred = np.concatenate([b.median() for b in bundles])
    obs = np.concatenate([_observations(b, dataset) for b in bundles])
    if not np.any(np.isfinite(obs)):
        raise InputValidationError("window_report: forecasts and observations do not overlap")
    q = bundles[0].quantiles
    hourly, n_pairs, windows, coverage = {}, {}, {}, {}
    for j, p in enumerate(POLLUTANTS):
        per_lead = [_metric_values(pred[:, i, :, j], obs[:, i, :, j]) for i in range(len(leads))]
        hourly[p] = {m: [v[m] for v, _ in per_lead] for m in METRICS}
        n_pairs[p] = [n for _, n in per_lead]
        windows[p] = {}
        for w, (h0, h1) in lead_windows.items():
            sel = (leads >= h0) & (leads <= h1)
            if not sel.any():
                continue
            vals, n = _metric_values(pred[:, sel, :, j], obs[:, sel, :, j])
            windows[p][w] = dict(vals, n=n)
        if len(q) > 1:
            lo = np.concatenate([b.frames[..., j, 0] for b in bundles])
            hi = np.concatenate([b.frames[..., j, -1] for b in bundles])
            try:
                coverage[p] = interval_coverage(lo, hi, obs[..., j])
            except InputValidationError:
                coverage[p] = float('nan')
    n_inits = sum(b.n_inits for b in bundles)
    logger.info("window_report %s: %d inits, %d lead hours", label, n_inits, len(leads))
    return MetricsReport(label, leads, hourly, n_pairs, windows, coverage, val_loss, n_inits)


# ---------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------

# exp_id -> (use_met, use_ems)
ARM_INPUTS = {'ALL': (True, True),
              'DEMET': (False, True),
              'DEEMS': (True, False),
              'STN_ONLY': (False, False),
              }

# (with the modality, without it)
ABLATION_PAIRS = (('DEEMS', 'STN_ONLY'), ('ALL', 'DEMET'), ('DEMET', 'STN_ONLY'), ('ALL', 'DEEMS'))


@dataclass(frozen=True)
class AblationSpec:
    exp_id: str

    def __post_init__(self):
        if self.exp_id not in ARM_INPUTS:
            raise InputValidationError(f"Unknown ablation arm: {self.exp_id}. "
                                       f"Supported arms: {'|'.join(ABLATION_ARMS)}")

    @property
    def use_met(self):
        return ARM_INPUTS[self.exp_id][0]

    @property
    def use_ems(self):
        return ARM_INPUTS[self.exp_id][1]

    def apply(self, mcfg):
        return with_inputs(mcfg, self.use_met, self.use_ems)


def parse_arms(text):
    arms = [a.strip().upper() for a in text.split(',') if a.strip()] if isinstance(text, str) else list(text)
    if not arms:
        raise InputValidationError("no ablation arm given")
    return [AblationSpec(a) for a in dict.fromkeys(arms)]


def run_ablation(spec, dataset, mcfg, tcfg, seed=None, hourly=False, stride=1, test_fraction=TEST_FRACTION,
                 steps=None):
    """ Train the arm's model(s) on the training period with the dropped inputs zeroed at the model
     boundary, then score forecasts on the test period.

    :param seed: master seed; the arm seed is derived from it (tcfg.seed when None)
    :param hourly: also train the interpolation model and score hourly frames
    :return: MetricsReport labelled by the arm
    """
    master = tcfg.seed if seed is None else seed
    arm_seed = derive_seed(master, f'arm:{spec.exp_id}')
    arm_mcfg = replace(spec.apply(mcfg), seed=arm_seed)
    arm_tcfg = replace(tcfg, seed=arm_seed)
    steps = arm_mcfg.horizon_steps if steps is None else steps
    prepared, split_time = holdout_split(dataset, test_fraction)
    logger.info("ablation arm %s (met=%s, ems=%s, seed=%d)", spec.exp_id, spec.use_met, spec.use_ems, arm_seed)
    model, report = train_6h(training_windows(prepared, split_time, '6h', stride, arm_mcfg.met_offset),
                             arm_mcfg, arm_tcfg)
    imodel = None
    if hourly:
        imodel, _ = train_interp(training_windows(prepared, split_time, 'interp', stride,
                                                  arm_mcfg.interp_met_offset), arm_mcfg, arm_tcfg)
    state = evaluation_states(prepared, evaluation_inits(prepared, split_time, steps), steps, arm_mcfg)
    bundle = forecast_states(model, state, prepared.norm, imodel, steps)
    return window_report([bundle], dataset, spec.exp_id, report.best_val_loss)


def run_ablation_suite(specs, dataset, mcfg, tcfg, seed=None, n_jobs=1, **kwargs):
    """ Every arm of `specs`, optionally on a thread pool. :return: {exp_id: MetricsReport} """
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            reports = list(pool.map(lambda s: run_ablation(s, dataset, mcfg, tcfg, seed, **kwargs), specs))
    else:
        reports = [run_ablation(s, dataset, mcfg, tcfg, seed, **kwargs) for s in specs]
    return {s.exp_id: r for s, r in zip(specs, reports)}


def ablation_deltas(reports):
    """ dR and drRMSE (first arm minus second) of every available pair, per pollutant and window. """
    out = {}
    for a, b in ABLATION_PAIRS:
        if a not in reports or b not in reports:
            continue
        ra, rb = reports[a], reports[b]
        out[f'{a}-{b}'] = {p: {w: {'dR': ra.windows[p][w]['R']-rb.windows[p][w]['R'],
                                   'drRMSE': ra.windows[p][w]['rRMSE']-rb.windows[p][w]['rRMSE']}
                               for w in ra.windows[p] if w in rb.windows[p]}
                           for p in ra.pollutants}
    return out


def write_ablation(out_dir, reports):
    os.makedirs(out_dir, exist_ok=True)
    for arm, r in reports.items():
        write_json(os.path.join(out_dir, f'report_{arm}.json'), r.to_dict())
    summary = {'arms': list(reports),
               'val_loss': {a: r.val_loss for a, r in reports.items()},
               'windows': {a: r.windows for a, r in reports.items()},
               'deltas': ablation_deltas(reports)}
    write_json(os.path.join(out_dir, 'ablation.json'), summary)
    return summary


# ---------------------------------------------------------------------
# metric curves
# ---------------------------------------------------------------------

SVG_STYLE = {'svg.hashsalt': 'aircast', 'svg.fonttype': 'none', 'font.size': 9, 'lines.linewidth': 1.2}


def emit_plot_data(report, out_dir):
    """ plots/<metric>.csv (pollutant, lead_hour, value) and the SVG rendered from it.
    :return: list of CSV paths """
    if not report.pollutants or not report.lead_hours:
        raise InputValidationError("emit_plot_data: empty report")
    plot_dir = os.path.join(out_dir, 'plots')
    os.makedirs(plot_dir, exist_ok=True)
    paths = []
    for m in METRICS:
        rows = [(p, h, v) for p in report.pollutants for h, v in zip(report.lead_hours, report.hourly[p][m])]
        csv_path = os.path.join(plot_dir, f'{m}.csv')
        pd.DataFrame(rows, columns=['pollutant', 'lead_hour', 'value']).to_csv(csv_path, index=False,
                                                                              float_format='%.17g')
        render_svg(csv_path, os.path.join(plot_dir, f'{m}.svg'))
        paths.append(csv_path)
    return paths


def render_svg(csv_path, svg_path):
    """One curve per pollutant against lead hour; same CSV, same bytes."""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    df = pd.read_csv(csv_path)
    metric = os.path.splitext(os.path.basename(csv_path))[0]
    with plt.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        for p in POLLUTANTS:
            sub = df[df['pollutant'] == p]
            if len(sub):
                ax.plot(sub['lead_hour'], sub['value'], marker='.', label=p)
        ax.set_xlabel('lead hour')
        ax.set_ylabel(metric)
        ax.legend(loc='best', fontsize=8)
        fig.tight_layout()
        fig.savefig(svg_path, format='svg', metadata={'Date': None})
        plt.close(fig)
