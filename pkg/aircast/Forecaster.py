#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Forecaster.py
# ==================================
"""Dual-scale forecasting engine.
 AirModel chains site self-attention, the grid encoder and the cross-attention coupling into a
 quantile head. The 6-h model is rolled out autoregressively for 12 steps (72 h), feeding back
 its median; a second AirModel of the same architecture fills the five hours between each pair
 of 6-h frames. Everything runs in normalized space; bundles are denormalized at emission."""

import logging
import os
from dataclasses import dataclass, fields, asdict, replace

import numpy as np
import pandas as pd

from aircast.constants import (POLLUTANTS, N_POLLUTANTS, QUANTILES, HORIZON_STEPS, STEP_HOURS, N_INTERP,
                               MET_CHANNELS, EMS_CHANNELS)
from aircast.Coupling import GridEncoder, CrossAttention
from aircast.Dataset import encode_time
from aircast.SiteAttention import TemporalEmbedding, SiteAttention, assemble_site_input, site_feature_width
from aircast.Station import HOUR, NormStats, denormalize, format_hour, to_hour
from aircast.tensor import ParamStore, as_tensor, getitem, linear, no_grad, reshape, swapaxes, glorot
from aircast.utils import (ConfigError, InputValidationError, OutOfBoundsError, ShapeError, check_finite, substream,
                           write_json)

logger = logging.getLogger(__name__)

MODEL_KINDS = {'6h': 1, 'interp': N_INTERP}  # output frames per instance


@dataclass
class ModelConfig:
    """ Architecture and input description shared by the 6-h and the interpolation model.
     `use_met` / `use_ems` zero the corresponding channels at the model boundary (ablation). """
    d_model: int = 32
    temb_dim: int = 8
    mlp_hidden: int = 64
    resnet_depth: int = 2
    resnet_width: int = 16
    quantiles: tuple = QUANTILES
    horizon_steps: int = HORIZON_STEPS
    n_pollutants: int = N_POLLUTANTS
    n_met: int = len(MET_CHANNELS)
    n_ems: int = len(EMS_CHANNELS)
    n_stations: int = 11
    n_lat: int = 20
    n_lon: int = 20
    seed: int = 0
    use_met: bool = True
    use_ems: bool = True
    met_offset: int = STEP_HOURS
    interp_met_offset: int = STEP_HOURS//2
    zero_head: bool = False

    def validate(self):
        bad = []
        q = tuple(self.quantiles)
        if not q or any(not 0 < t < 1 for t in q) or any(b <= a for a, b in zip(q, q[1:])) or 0.5 not in q:
            bad.append('quantiles')
        if self.horizon_steps < 1:
            bad.append('horizon_steps')
        if self.n_pollutants != N_POLLUTANTS:
            bad.append('n_pollutants')
        for name in ('d_model', 'mlp_hidden', 'resnet_width', 'n_met', 'n_ems', 'n_stations', 'n_lat', 'n_lon'):
            if getattr(self, name) < 1:
                bad.append(name)
        if self.d_model < 2 or self.resnet_width < 2:
            bad.append('d_model/resnet_width (layer norm needs >= 2)')
        if self.temb_dim < 2 or self.temb_dim % 2:
            bad.append('temb_dim')
        if self.resnet_depth < 1:
            bad.append('resnet_depth')
        if not 0 <= self.interp_met_offset <= STEP_HOURS or not 0 <= self.met_offset <= STEP_HOURS:
            bad.append('met_offset/interp_met_offset')
        if bad:
            raise ConfigError(f"Invalid model config, offending fields: {', '.join(bad)}", fields=bad)
        return self

    @property
    def q_median(self):
        return tuple(self.quantiles).index(0.5)

    @property
    def n_quantiles(self):
        return len(self.quantiles)

    @classmethod
    def for_dataset(cls, dataset, **overrides):
        g = dataset.geometry
        return cls(**dict(dict(n_met=len(dataset.met.channels), n_ems=len(dataset.ems.channels),
                               n_stations=len(dataset.series), n_lat=g.n_lat, n_lon=g.n_lon), **overrides))

    def to_dict(self):
        d = asdict(self)
        d['quantiles'] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d)-known)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {unknown}", fields=unknown)
        d = dict(d)
        if 'quantiles' in d:
            d['quantiles'] = tuple(float(q) for q in d['quantiles'])
        return cls(**d)


class AirModel(object):
    """ Site attention -> grid encoder -> cross attention -> linear quantile head.
     The interp head outputs a correction to the straight line between its two input frames.

    :param config: ModelConfig
    :param kind: '6h' (one output frame) or 'interp' (five output frames)
    :param params: optional ParamStore to load (e.g. from a checkpoint); fresh init otherwise
    """
    __slots__ = ('config', 'kind', 'n_frames', 'params', 'temb', 'site', 'encoder', 'cross')

    def __init__(self, config, kind='6h', params=None):
        if kind not in MODEL_KINDS:
            raise InputValidationError(f"Unknown model kind: {kind}. Supported kinds: {'|'.join(MODEL_KINDS)}")
        self.config = config.validate()
        self.kind = kind
        self.n_frames = MODEL_KINDS[kind]
        fresh = ParamStore()
        rng = substream(config.seed, f'init:{kind}')
        c = config
        self.temb = TemporalEmbedding(fresh, rng, c.temb_dim)
        self.site = SiteAttention(fresh, rng, site_feature_width(c.temb_dim), c.d_model, c.mlp_hidden)
        self.encoder = GridEncoder(fresh, rng, c.n_met, c.n_ems, c.d_model, c.resnet_width, c.resnet_depth)
        self.cross = CrossAttention(fresh, rng, c.d_model, c.mlp_hidden)
        n_out = self.n_frames*N_POLLUTANTS*c.n_quantiles
        head = np.zeros((c.d_model, n_out)) if c.zero_head else glorot(rng, (c.d_model, n_out), c.d_model, n_out)
        fresh.add('head.w', head)
        fresh.add('head.b', np.zeros(n_out))
        if params is not None:
            if sorted(params.names) != sorted(fresh.names):
                raise ShapeError(f"parameter set does not match a {kind} model: "
                                 f"{sorted(set(params.names) ^ set(fresh.names))}")
            fresh.load_snapshot(params.snapshot())
            fresh.step_count = params.step_count
        self.params = fresh

    def forward(self, x_prev, x_curr, met, ems, doy, hod, station_pe, grid_pe):
        """ :param x_prev, x_curr: [B, N_s, 6] normalized (arrays or Tensors)
        :param met: [B, n_met, n_lat, n_lon]; ems: [B, n_ems, n_lat, n_lon] standardized
        :param doy, hod: int arrays [B]
        :return: (prediction Tensor [B, N_s, 6, Q] for '6h' or [B, 5, N_s, 6, Q] for 'interp',
                  {'site': [B, N_s, N_s], 'cross': [B, N_s, N_grids]}) """
        c = self.config
        x_prev, x_curr = as_tensor(x_prev), as_tensor(x_curr)
        if x_prev.ndim != 3 or x_prev.shape[1] != c.n_stations:
            raise ShapeError(f"expected [B, {c.n_stations}, {N_POLLUTANTS}] station inputs, got {x_prev.shape}")
        met = np.asarray(met, dtype=np.float64)
        ems = np.asarray(ems, dtype=np.float64)
        if not c.use_met:
            met = np.zeros_like(met)
        if not c.use_ems:
            ems = np.zeros_like(ems)
        t_emb = self.temb(doy, hod)
        x_inp = assemble_site_input(x_prev, x_curr, station_pe, t_emb)
        h_sa, a_site = self.site(x_inp)
        latent = self.encoder(met, ems, grid_pe)
        h_mea, a_cross = self.cross(h_sa, latent)
        out = linear(h_mea, self.params['head.w'], self.params['head.b'])
        n_b, n_s = x_prev.shape[0], x_prev.shape[1]
        if self.kind == '6h':
            out = reshape(out, (n_b, n_s, N_POLLUTANTS, c.n_quantiles))
        else:
            out = swapaxes(reshape(out, (n_b, n_s, self.n_frames, N_POLLUTANTS, c.n_quantiles)), 1, 2)
            out = out+_linear_blend(x_prev, x_curr)
        return out, {'site': a_site, 'cross': a_cross}

    def forward_batch(self, batch, x_prev=None, x_curr=None):
        """forward() on a batch_windows() dict; x_prev/x_curr may be replaced (e.g. by predictions)."""
        return self.forward(batch['x_prev'] if x_prev is None else x_prev,
                            batch['x_curr'] if x_curr is None else x_curr,
                            batch['met'], batch['ems'], batch['doy'], batch['hod'],
                            batch['station_pe'], batch['grid_pe'])

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta.update({'kind': self.kind, 'model_config': self.config.to_dict()})
        self.params.save(path, meta=meta)

    @classmethod
    def load(cls, path, kind=None):
        """ :return: (AirModel, checkpoint meta) """
        params, meta, _ = ParamStore.load(path)
        stored = meta.get('kind')
        if kind is not None and stored != kind:
            raise InputValidationError(f"checkpoint {path} holds a {stored} model, expected {kind}")
        return cls(ModelConfig.from_dict(meta['model_config']), stored, params), meta


def _linear_blend(x_prev, x_curr):
    """Straight line through hours +1..+5 as a [B, 5, N_s, 6, 1] Tensor; the interp head adds to it."""
    n_b, n_s, n_p = x_prev.shape
    w = (np.arange(1, N_INTERP+1)/STEP_HOURS).reshape(1, N_INTERP, 1, 1, 1)
    lo = reshape(x_prev, (n_b, 1, n_s, n_p, 1))
    return lo+(reshape(x_curr, (n_b, 1, n_s, n_p, 1))-lo)*w


def sort_quantiles(pred):
    """Enforce q_lo <= ... <= q_hi along the last axis."""
    return np.sort(pred, axis=-1)


# ---------------------------------------------------------------------
# initial states
# ---------------------------------------------------------------------

@dataclass
class InitialState:
    """ Everything a batch of initializations needs for a full hourly forecast.

    x_prev, x_curr: [B, N_s, 6] normalized X_{t0-6}, X_{t0};
    met: [B, steps, n_met, H, W] frame fed with step k (valid at t0 + 6(k-1) + met_offset);
    met_interp: [B, steps, n_met, H, W] frame fed with the pair ending at step k (central hour);
    ems: [B, steps, n_ems, H, W] emission frame in force at the start of step k.
    """
    init_time: np.ndarray
    x_prev: np.ndarray
    x_curr: np.ndarray
    met: np.ndarray
    met_interp: np.ndarray
    ems: np.ndarray
    station_pe: np.ndarray
    grid_pe: np.ndarray
    station_ids: list

    @property
    def n_inits(self):
        return self.x_prev.shape[0]

    @property
    def steps(self):
        return self.met.shape[1]

    def anchor_codes(self, k):
        """(doy, hod) arrays of the anchor of step k (1-based)."""
        codes = [encode_time(t+(k-1)*STEP_HOURS*HOUR) for t in self.init_time]
        return np.array([c.doy for c in codes]), np.array([c.hod for c in codes])


def initial_state(prepared, init_time, steps=HORIZON_STEPS, met_offset=STEP_HOURS, interp_met_offset=STEP_HOURS//2):
    """ Extract the initial conditions and drivers of one initialization from a PreparedCity.
     X_{t0-6} and X_{t0} must be valid (after gap filling) at every station. """
    k0 = prepared.time_index(init_time)
    if k0 < STEP_HOURS:
        raise OutOfBoundsError(f"init {format_hour(to_hour(init_time))} has no X(t-6) in the record")
    frames_ok = prepared.valid.all(axis=(1, 2))
    if not (frames_ok[k0-STEP_HOURS] and frames_ok[k0]):
        raise InputValidationError(f"init {format_hour(to_hour(init_time))}: missing initial observations")
    met, met_i, ems = [], [], []
    for k in range(1, steps+1):
        anchor = k0+(k-1)*STEP_HOURS
        try:
            met.append(prepared.met_frame(anchor+met_offset))
            met_i.append(prepared.met_frame(anchor+interp_met_offset))
        except OutOfBoundsError as e:
            raise OutOfBoundsError(f"missing met frame for step {k}: {e}") from e
        ems.append(prepared.ems_frame(anchor))
    return InitialState(np.array([prepared.times[k0]]), prepared.z[None, k0-STEP_HOURS], prepared.z[None, k0],
                        np.stack(met)[None], np.stack(met_i)[None], np.stack(ems)[None],
                        prepared.station_pe, prepared.grid_pe, [s.station.id for s in prepared.dataset.series])


def stack_states(states):
    """Concatenate single-init states along the batch axis."""
    if not states:
        raise InputValidationError("stack_states: no initial state")
    cat = lambda name: np.concatenate([getattr(s, name) for s in states])  # noqa: E731
    s0 = states[0]
    return InitialState(cat('init_time'), cat('x_prev'), cat('x_curr'), cat('met'), cat('met_interp'), cat('ems'),
                        s0.station_pe, s0.grid_pe, s0.station_ids)


# ---------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------

def step_forecast(model, x_prev, x_curr, met, ems, tc, station_pe, grid_pe):
    """ One 6-h step for a single instance.
    :return: ([N_s, 6, Q] normalized prediction at t+6 with sorted quantiles, attention dict) """
    with no_grad():
        pred, attn = model.forward(np.asarray(x_prev)[None], np.asarray(x_curr)[None], np.asarray(met)[None],
                                   np.asarray(ems)[None], np.array([tc.doy]), np.array([tc.hod]),
                                   station_pe, grid_pe)
    return sort_quantiles(pred.data[0]), {k: v[0] for k, v in attn.items()}


def rollout(model, state, steps=None):
    """ Autoregressive 6-h rollout: step k feeds (X̂_{k-1}, X̂_k) medians back as inputs.

    :return: (frames [B, steps, N_s, 6, Q] normalized, sorted quantiles; attention per step
              {'site': [B, steps, N, N], 'cross': [B, steps, N, G]})
    """
    steps = state.steps if steps is None else steps
    if steps < 1:
        raise InputValidationError(f"rollout needs steps >= 1, got {steps}")
    if steps > state.steps:
        raise OutOfBoundsError(f"missing met frame for step {state.steps+1}: state covers {state.steps} steps")
    qm = model.config.q_median
    x_prev, x_curr = state.x_prev, state.x_curr
    frames, site, cross = [], [], []
    with no_grad():
        for k in range(1, steps+1):
            doy, hod = state.anchor_codes(k)
            pred, attn = model.forward(x_prev, x_curr, state.met[:, k-1], state.ems[:, k-1], doy, hod,
                                       state.station_pe, state.grid_pe)
            frame = sort_quantiles(pred.data)
            frames.append(frame)
            site.append(attn['site'])
            cross.append(attn['cross'])
            x_prev, x_curr = x_curr, frame[..., qm]
    return np.stack(frames, axis=1), {'site': np.stack(site, axis=1), 'cross': np.stack(cross, axis=1)}


def interpolate_frames(imodel, x_k, x_k6, met, ems, doy, hod, station_pe, grid_pe):
    """ Hours +1..+5 between two consecutive 6-h frames (median slices).
    :param x_k, x_k6: [B, N_s, 6]
    :return: [B, 5, N_s, 6, Q] normalized, sorted quantiles """
    x_k, x_k6 = np.asarray(x_k), np.asarray(x_k6)
    if x_k.shape != x_k6.shape:
        raise ShapeError(f"bracketing frames differ in shape: {x_k.shape} vs {x_k6.shape}")
    with no_grad():
        pred, _ = imodel.forward(x_k, x_k6, met, ems, doy, hod, station_pe, grid_pe)
    return sort_quantiles(pred.data)


def linear_interpolation(x_k, x_k6):
    """Straight-line hours +1..+5 between two frames: [B, 5, N_s, 6], the interpolation baseline."""
    x_k, x_k6 = np.asarray(x_k, dtype=np.float64), np.asarray(x_k6, dtype=np.float64)
    if x_k.shape != x_k6.shape:
        raise ShapeError(f"bracketing frames differ in shape: {x_k.shape} vs {x_k6.shape}")
    w = np.arange(1, N_INTERP+1)/STEP_HOURS
    return x_k[:, None]+w[None, :, None, None]*(x_k6-x_k)[:, None]


def check_model_pair(model, imodel):
    """The interpolation model must read and emit what the 6-h model does."""
    if model.kind != '6h' or imodel.kind != 'interp':
        raise InputValidationError(f"expected a 6h and an interp model, got {model.kind} and {imodel.kind}")
    a, b = model.config, imodel.config
    bad = [name for name in ('n_stations', 'n_met', 'n_ems', 'n_lat', 'n_lon') if getattr(a, name) != getattr(b, name)]
    if tuple(a.quantiles) != tuple(b.quantiles):
        bad.insert(0, 'quantiles')
    if bad:
        raise InputValidationError(f"6h and interp models disagree on {', '.join(bad)}")


def hourly_forecast(model, imodel, state, norm, steps=None):
    """ Rollout then interpolation: [B, 6*steps] hourly frames where lead hours 6k are the
     rollout frames verbatim.
    :return: ForecastBundle in physical units """
    check_model_pair(model, imodel)
    six, attention = rollout(model, state, steps)
    n_b, n_steps = six.shape[:2]
    qm = model.config.q_median
    hourly = np.empty((n_b, n_steps*STEP_HOURS)+six.shape[2:])
    prev = state.x_curr
    for k in range(1, n_steps+1):
        doy, hod = state.anchor_codes(k)
        nxt = six[:, k-1, ..., qm]
        base = (k-1)*STEP_HOURS
        hourly[:, base:base+N_INTERP] = interpolate_frames(imodel, prev, nxt, state.met_interp[:, k-1],
                                                           state.ems[:, k-1], doy, hod, state.station_pe,
                                                           state.grid_pe)
        hourly[:, base+N_INTERP] = six[:, k-1]
        prev = nxt
    return ForecastBundle.from_normalized(state, model.config.quantiles, norm, six, hourly, attention)


class ForecastBundle(object):
    """ Forecasts of a batch of initializations in physical units.

    :param init_times: datetime64[h] [B]
    :param station_ids: list of N_s ids
    :param quantiles: tuple of Q levels
    :param six_hourly: [B, steps, N_s, 6, Q] (lead hours 6, 12, ...)
    :param hourly: [B, 6*steps, N_s, 6, Q] (lead hours 1, 2, ...) or None
    """
    __slots__ = ('init_times', 'station_ids', 'quantiles', 'six_hourly', 'hourly', 'attention')

    def __init__(self, init_times, station_ids, quantiles, six_hourly, hourly=None, attention=None):
        self.init_times = np.asarray(init_times, dtype='datetime64[h]')
        self.station_ids = list(station_ids)
        self.quantiles = tuple(quantiles)
        self.six_hourly = check_finite(six_hourly, 'six-hourly forecast')
        self.hourly = None if hourly is None else check_finite(hourly, 'hourly forecast')
        self.attention = attention or {}

    @classmethod
    def from_normalized(cls, state, quantiles, norm, six, hourly=None, attention=None):
        def physical(z):
            return np.swapaxes(denormalize(np.swapaxes(z, -1, -2), norm), -1, -2)
        return cls(state.init_time, state.station_ids, quantiles, physical(six),
                   None if hourly is None else physical(hourly), attention)

    @property
    def n_inits(self):
        return len(self.init_times)

    @property
    def frames(self):
        return self.six_hourly if self.hourly is None else self.hourly

    @property
    def lead_hours(self):
        if self.hourly is None:
            return STEP_HOURS*np.arange(1, self.six_hourly.shape[1]+1)
        return np.arange(1, self.hourly.shape[1]+1)

    def median(self):
        """[B, leads, N_s, 6] median slice of the finest available frames."""
        return self.frames[..., self.quantiles.index(0.5)]

    def to_frame(self):
        vals = self.frames
        leads = self.lead_hours
        idx = pd.MultiIndex.from_product([[format_hour(t) for t in self.init_times], leads, self.station_ids,
                                          POLLUTANTS, self.quantiles],
                                         names=['init_time', 'lead_hour', 'station_id', 'pollutant', 'quantile'])
        df = pd.DataFrame({'value': vals.reshape(-1)}, index=idx).reset_index()
        return df[['init_time', 'station_id', 'pollutant', 'lead_hour', 'quantile', 'value']]


def write_forecast_csv(path, bundle):
    bundle.to_frame().to_csv(path, index=False, float_format='%.17g')
    logger.info("Wrote %d forecast rows to %s", bundle.frames.size, path)


def dump_attention(out_dir, bundle, geometry=None, step=1, init=0):
    """ Site attention as an N_s x N_s CSV with station-id headers, and every station's cross
     attention as an n_lat x n_lon CSV (rows south to north), for one step of one init. """
    os.makedirs(out_dir, exist_ok=True)
    ids = bundle.station_ids
    site = bundle.attention['site'][init, step-1]
    pd.DataFrame(site, index=ids, columns=ids).to_csv(os.path.join(out_dir, f'site_attention_step{step:02d}.csv'),
                                                      index_label='station_id', float_format='%.17g')
    cross = bundle.attention['cross'][init, step-1]
    if geometry is not None:
        for i, sid in enumerate(ids):
            grid = cross[i].reshape(geometry.n_lat, geometry.n_lon)
            pd.DataFrame(grid, index=np.round(geometry.lats, 6), columns=np.round(geometry.lons, 6)).to_csv(
                os.path.join(out_dir, f'cross_attention_{sid}_step{step:02d}.csv'), index_label='lat',
                float_format='%.17g')
    write_json(os.path.join(out_dir, 'attention.json'), {'init_time': format_hour(bundle.init_times[init]),
                                                          'step': step, 'stations': ids})


def with_inputs(config, use_met=True, use_ems=True):
    return replace(config, use_met=use_met, use_ems=use_ems)


def norm_from_meta(meta):
    return NormStats.from_dict(meta['norm'])


def head_slice(pred, quantile_index):
    """Differentiable slice of one quantile of a prediction Tensor."""
    return getitem(pred, (Ellipsis, quantile_index))
