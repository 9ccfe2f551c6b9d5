#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Trainer.py
# ==================================
"""Quantile-loss training of the 6-h and the interpolation model, and the finite-difference
 verification of every parameter gradient."""

import logging
import time
from dataclasses import dataclass, field, fields, asdict, replace

import numpy as np

from aircast.constants import QUANTILES, STEP_HOURS, N_POLLUTANTS, N_INTERP
from aircast.Dataset import batch_windows, split_windows
from aircast.Forecaster import AirModel, ModelConfig, head_slice
from aircast.tensor import _make, adam_step, backward, clip_grad_norm, no_grad, numerical_gradient
from aircast.utils import (ConfigError, DivergenceError, GradientCheckError, InputValidationError, NonFiniteError,
                           ShapeError, relative_error, substream)

logger = logging.getLogger(__name__)


def quantile_loss(pred, target, taus):
    """ Pinball loss averaged over every element and quantile:
     rho_tau(u) = max(tau*u, (tau-1)*u), u = target - pred.

    :param pred: Tensor [..., Q]
    :param target: array [...]
    :param taus: Q quantile levels in (0, 1)
    :return: scalar Tensor
    """
    taus = np.asarray(taus, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(taus <= 0) or np.any(taus >= 1):
        raise InputValidationError(f"quantile levels must lie in (0, 1), got {taus}")
    if pred.shape[-1] != len(taus) or pred.shape[:-1] != target.shape:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape} x {len(taus)} quantiles")
    if not np.all(np.isfinite(target)):
        raise NonFiniteError("quantile_loss: non-finite target")
    u = target[..., None]-pred.data
    n = u.size
    loss = np.maximum(taus*u, (taus-1.)*u).sum()/n

    def _backward(g):
        return -g*np.where(u >= 0, taus, taus-1.)/n,
    return _make(np.asarray(loss), (pred,), _backward, 'pinball')


@dataclass
class TrainConfig:
    """ Optimizer and schedule. `val_fraction` holds out the chronologically last windows;
     `unroll_steps` > 1 adds multi-step fine-tuning of the 6-h model through its own medians. """
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    quantiles: tuple = QUANTILES
    seed: int = 0
    patience: int = 5
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    unroll_steps: int = 1

    def validate(self, model_config=None):
        bad = []
        if not self.lr >= 0:
            bad.append('lr')
        if self.batch_size < 1:
            bad.append('batch_size')
        if self.epochs < 1:
            bad.append('epochs')
        if not 0 < self.val_fraction < 1:
            bad.append('val_fraction')
        if self.patience < 1:
            bad.append('patience')
        if self.unroll_steps < 1:
            bad.append('unroll_steps')
        if self.clip_norm is not None and not self.clip_norm >= 0:
            bad.append('clip_norm')
        q = tuple(self.quantiles)
        if not q or any(not 0 < t < 1 for t in q) or any(b <= a for a, b in zip(q, q[1:])) or 0.5 not in q:
            bad.append('quantiles')
        elif model_config is not None and q != tuple(model_config.quantiles):
            bad.append('quantiles (differ from the model config)')
        if bad:
            raise ConfigError(f"Invalid training config, offending fields: {', '.join(bad)}", fields=bad)
        return self

    def to_dict(self):
        d = asdict(self)
        d['quantiles'] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d)-known)
        if unknown:
            raise ConfigError(f"Unknown training config keys: {unknown}", fields=unknown)
        d = dict(d)
        if 'quantiles' in d:
            d['quantiles'] = tuple(float(q) for q in d['quantiles'])
        return cls(**d)


@dataclass
class TrainReport:
    kind: str
    seed: int
    initial_loss: float
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float('inf')
    n_train: int = 0
    n_val: int = 0
    stopped_early: bool = False
    checkpoint: str = None
    wall_clock: float = 0.

    def to_dict(self, timing=False):
        d = asdict(self)
        if not timing:
            d.pop('wall_clock')
        return d


def _weighted_loss(model, windows, tcfg, batch_size):
    """Mean loss over `windows` without recording a graph."""
    total = 0.
    with no_grad():
        for b0 in range(0, len(windows), batch_size):
            chunk = windows[b0:b0+batch_size]
            batch = batch_windows(chunk)
            pred, _ = model.forward_batch(batch)
            total += float(quantile_loss(pred, batch['target'], tcfg.quantiles).data)*len(chunk)
    return total/len(windows)


def _unroll_chains(windows, steps):
    """Chains of `steps` windows whose anchors are 6 h apart; chains start at every window that has one."""
    by_anchor = {w.anchor: w for w in windows}
    chains = []
    for w in windows:
        chain = [w]
        for k in range(1, steps):
            nxt = by_anchor.get(w.anchor+k*STEP_HOURS*np.timedelta64(1, 'h'))
            if nxt is None:
                break
            chain.append(nxt)
        if len(chain) == steps:
            chains.append(chain)
    return chains


def _unrolled_loss(model, chains, taus):
    """Average pinball loss over an autoregressive chain, the median prediction feeding the next step."""
    qm = model.config.q_median
    x_prev = x_curr = None
    loss = None
    for j in range(len(chains[0])):
        batch = batch_windows([c[j] for c in chains])
        pred, _ = model.forward_batch(batch, x_prev, x_curr)
        step_loss = quantile_loss(pred, batch['target'], taus)
        loss = step_loss if loss is None else loss+step_loss
        x_prev = batch['x_curr'] if x_curr is None else x_curr
        x_curr = head_slice(pred, qm)
    return loss*(1./len(chains[0]))


def _train(kind, windows, mcfg, tcfg):
    tcfg.validate(mcfg)
    if not windows:
        raise InputValidationError(f"train_{kind}: no training windows")
    if any(w.kind != kind for w in windows):
        raise InputValidationError(f"train_{kind}: windows of another kind in the training set")
    if any(w.target is None for w in windows):
        raise InputValidationError(f"train_{kind}: windows without targets")
    t_start = time.perf_counter()
    if len(windows) > 1:
        train, val = split_windows(windows, tcfg.val_fraction)
    else:
        logger.warning("train_%s: a single window, validating on the training set", kind)
        train, val = windows, windows
    # the interpolator starts from the straight line between its bracketing frames
    model = AirModel(replace(mcfg, zero_head=True) if kind == 'interp' else mcfg, kind)
    params = model.params
    unroll = tcfg.unroll_steps if kind == '6h' else 1
    units = _unroll_chains(train, unroll) if unroll > 1 else train
    if not units:
        raise InputValidationError(f"train_{kind}: no chain of {unroll} consecutive windows for unrolled training")

    report = TrainReport(kind, tcfg.seed, _weighted_loss(model, train, tcfg, tcfg.batch_size),
                         n_train=len(train), n_val=len(val))
    logger.info("train_%s: %d train / %d val windows, %d parameters, initial loss %.6f", kind, len(train),
                len(val), params.n_values, report.initial_loss)
    best = params.snapshot()
    since_best = 0
    for epoch in range(tcfg.epochs):
        order = substream(tcfg.seed, f'batches:{kind}:epoch{epoch}').permutation(len(units))
        total = 0.
        for b0 in range(0, len(units), tcfg.batch_size):
            chunk = [units[i] for i in order[b0:b0+tcfg.batch_size]]
            try:
                if unroll > 1:
                    loss = _unrolled_loss(model, chunk, tcfg.quantiles)
                else:
                    batch = batch_windows(chunk)
                    pred, _ = model.forward_batch(batch)
                    loss = quantile_loss(pred, batch['target'], tcfg.quantiles)
                grads = backward(loss, params)
            except NonFiniteError as e:
                raise DivergenceError(f"train_{kind}: non-finite values at epoch {epoch}, "
                                      f"batch starting at {b0}: {e}") from e
            grads, _ = clip_grad_norm(grads, tcfg.clip_norm)
            adam_step(params, grads, tcfg.lr)
            total += float(loss.data)*len(chunk)
        report.train_loss.append(total/len(units))
        try:
            val_loss = _weighted_loss(model, val, tcfg, tcfg.batch_size)
        except NonFiniteError as e:
            raise DivergenceError(f"train_{kind}: validation diverged at epoch {epoch}: {e}") from e
        report.val_loss.append(val_loss)
        if val_loss < report.best_val_loss:
            report.best_val_loss, report.best_epoch = val_loss, epoch
            best = params.snapshot()
            since_best = 0
        else:
            since_best += 1
        logger.info("train_%s epoch %d: train %.6f val %.6f (best %.6f @ %d)", kind, epoch,
                    report.train_loss[-1], val_loss, report.best_val_loss, report.best_epoch)
        if since_best >= tcfg.patience:
            report.stopped_early = True
            logger.info("train_%s: early stop after %d epochs without improvement", kind, since_best)
            break
    params.load_snapshot(best)
    report.wall_clock = time.perf_counter()-t_start
    return model, report


def train_6h(windows, mcfg, tcfg):
    """ Teacher-forced training of the 6-h model (target X_{t+6}).
    :return: (AirModel holding the best-validation parameters, TrainReport) """
    return _train('6h', windows, mcfg, tcfg)


def train_interp(windows, mcfg, tcfg):
    """ Training of the interpolation model on the five intermediate hours. """
    return _train('interp', windows, mcfg, tcfg)


# ---------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------

MICRO_CONFIG = dict(d_model=4, temb_dim=4, mlp_hidden=6, resnet_depth=1, resnet_width=3, n_met=2, n_ems=2,
                    n_stations=2, n_lat=4, n_lon=4)


def micro_config(**overrides):
    return ModelConfig(**dict(MICRO_CONFIG, **overrides))


def _micro_batch(mcfg, kind, seed, n_b=2):
    rng = substream(seed, f'gradcheck:data:{kind}')
    n_s, h, w = mcfg.n_stations, mcfg.n_lat, mcfg.n_lon
    target_shape = (n_b, n_s, N_POLLUTANTS) if kind == '6h' else (n_b, N_INTERP, n_s, N_POLLUTANTS)
    return {'x_prev': rng.normal(size=(n_b, n_s, N_POLLUTANTS)), 'x_curr': rng.normal(size=(n_b, n_s, N_POLLUTANTS)),
            'met': rng.normal(size=(n_b, mcfg.n_met, h, w)), 'ems': rng.normal(size=(n_b, mcfg.n_ems, h, w)),
            'doy': rng.integers(1, 367, n_b), 'hod': rng.integers(0, 24, n_b),
            'station_pe': rng.normal(size=(n_s, 4)), 'grid_pe': rng.normal(size=(2, h, w)),
            'target': rng.normal(size=target_shape)}


def check_model_gradients(model, batch, h=1e-5, max_entries=None, seed=0):
    """ Max relative error between backward() and central differences per parameter tensor.
     Entries are checked exhaustively unless `max_entries` caps a tensor, in which case the
     entries with the largest analytic gradients and a seeded random sample are checked. """
    taus = model.config.quantiles

    def loss_value():
        pred, _ = model.forward_batch(batch)
        return float(quantile_loss(pred, batch['target'], taus).data)

    pred, _ = model.forward_batch(batch)
    grads = backward(quantile_loss(pred, batch['target'], taus), model.params)
    rng = substream(seed, f'gradcheck:entries:{model.kind}')
    errors = {}
    for name in model.params.names:
        g = grads[name].reshape(-1)
        if max_entries is None or g.size <= max_entries:
            idx = np.arange(g.size)
        else:
            top = np.argsort(-np.abs(g), kind='stable')[:max_entries//2]
            rest = rng.choice(g.size, size=max_entries-len(top), replace=False)
            idx = np.unique(np.concatenate([top, rest]))
        numeric = numerical_gradient(loss_value, model.params[name], idx, h)
        errors[name] = float(np.max(relative_error(g[idx], [numeric[int(k)] for k in idx])))
    return errors


def verify_gradients(mcfg=None, seed=0, h=1e-5, tol=1e-3, max_entries=64):
    """ Gradient check of both models on a micro configuration (<= 2 stations, <= 6x6 grid).
     Tensors with more than `max_entries` values are sampled: the max_entries//2 entries of largest
     analytic |gradient| plus a seeded uniform draw of the rest; max_entries=None checks every entry.
     A tensor fails above `tol`.

    :return: {'6h': {tensor: max rel err}, 'interp': {...}, 'max_rel_error': float, 'tolerance': tol}
    :raise GradientCheckError: listing every tensor above `tol`
    """
    mcfg = micro_config(seed=seed) if mcfg is None else mcfg
    mcfg.validate()
    if mcfg.n_stations > 2 or mcfg.n_lat > 6 or mcfg.n_lon > 6:
        raise ConfigError("verify_gradients needs a micro configuration (<= 2 stations, <= 6x6 grid)",
                          fields=('n_stations', 'n_lat', 'n_lon'))
    report = {'tolerance': tol, 'step': h, 'seed': seed}
    worst = 0.
    failing = []
    for kind in ('6h', 'interp'):
        model = AirModel(replace(mcfg, zero_head=False), kind)
        errors = check_model_gradients(model, _micro_batch(mcfg, kind, seed), h, max_entries, seed)
        report[kind] = errors
        for name, err in errors.items():
            worst = max(worst, err)
            if err > tol:
                failing.append(f'{kind}:{name}')
        logger.info("gradcheck %s: %d tensors, max relative error %.3e", kind, len(errors), max(errors.values()))
    report['max_rel_error'] = worst
    if failing:
        raise GradientCheckError(f"gradient check failed (tol {tol:g}) for: {', '.join(failing)}", tensors=failing)
    return report
