#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: metrics.py
# ==================================
"""Point-forecast verification scores (R, RMSE, rRMSE, MRE, MAE) and quantile-band coverage."""

import logging
from dataclasses import dataclass, asdict

import numpy as np

from aircast.utils import InputValidationError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricSet:
    """ The five scores of one pair set. R is NaN for a constant series; MRE skips O_i == 0
     and counts the skipped pairs in `n_mre_excluded`. """
    R: float
    RMSE: float
    rRMSE: float
    MRE: float
    MAE: float
    n: int
    n_mre_excluded: int = 0

    def to_dict(self):
        return asdict(self)

    def __getitem__(self, name):
        return getattr(self, name)


def _paired(pred, obs):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if pred.shape != obs.shape:
        raise ShapeError(f"prediction and observation lengths differ: {pred.size} vs {obs.size}")
    keep = np.isfinite(pred) & np.isfinite(obs)
    if keep.sum() < 2:
        raise InputValidationError(f"need at least 2 valid pairs, got {int(keep.sum())}")
    return pred[keep], obs[keep]


def pearson_r(pred, obs):
    """ sum((P-P̄)(O-Ō)) / sqrt(sum((P-P̄)²) sum((O-Ō)²)); NaN if either series is constant. """
    dp, do = pred-pred.mean(), obs-obs.mean()
    den = np.sqrt(np.sum(dp*dp)*np.sum(do*do))
    if den == 0:
        return float('nan')
    return float(np.clip(np.sum(dp*do)/den, -1., 1.))


def compute_metrics(pred, obs):
    """ Scores of paired series; pairs with a non-finite member are dropped.

    :param pred: predictions P_i
    :param obs: observations O_i
    :return: MetricSet
    """
    p, o = _paired(pred, obs)
    err = p-o
    rmse = float(np.sqrt(np.mean(err*err)))
    mae = float(np.mean(np.abs(err)))
    o_mean = float(np.mean(o))
    nz = o != 0
    n_excl = int((~nz).sum())
    if n_excl:
        logger.debug("compute_metrics: %d pairs with zero observation excluded from MRE", n_excl)
    mre = float(np.mean(np.abs(err[nz])/o[nz])) if nz.any() else float('nan')
    return MetricSet(R=pearson_r(p, o), RMSE=rmse, rRMSE=rmse/o_mean if o_mean != 0 else float('nan'), MRE=mre,
                     MAE=mae, n=int(p.size), n_mre_excluded=n_excl)


def interval_coverage(q_lo, q_hi, obs):
    """Share of finite observations with q_lo <= obs <= q_hi."""
    q_lo, q_hi, obs = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (q_lo, q_hi, obs))
    if not q_lo.shape == q_hi.shape == obs.shape:
        raise ShapeError(f"band and observation sizes differ: {q_lo.size}, {q_hi.size}, {obs.size}")
    keep = np.isfinite(q_lo) & np.isfinite(q_hi) & np.isfinite(obs)
    if not keep.any():
        raise InputValidationError("interval_coverage: no valid observation")
    inside = (q_lo[keep] <= obs[keep]) & (obs[keep] <= q_hi[keep])
    return float(inside.mean())
