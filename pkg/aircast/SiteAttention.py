#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: SiteAttention.py
# ==================================
"""Monitoring-site interaction: temporal embedding, per-site input assembly and
 single-head self-attention across the stations of a city.
 Tensors are feature-last: site inputs are [B, N_s, F], latents [B, N_s, d_model]."""

import logging

import numpy as np

from aircast.constants import N_POLLUTANTS
from aircast.tensor import (as_tensor, broadcast_to, concat, glorot, layer_norm, linear, matmul, relu,
                            reshape, softmax, swapaxes, take)
from aircast.utils import ConfigError, InputValidationError, ShapeError

logger = logging.getLogger(__name__)

N_DOY = 366
N_HOD = 24
PE_DIM = 4


# ---------------------------------------------------------------------
# building blocks shared with the coupling module
# ---------------------------------------------------------------------

def add_dense(params, rng, prefix, d_in, d_out, bias=True):
    params.add(f'{prefix}.w', glorot(rng, (d_in, d_out), d_in, d_out))
    if bias:
        params.add(f'{prefix}.b', np.zeros(d_out))


def dense(params, prefix, x):
    b = f'{prefix}.b'
    return linear(x, params[f'{prefix}.w'], params[b] if b in params else None)


def add_norm(params, prefix, dim):
    params.add(f'{prefix}.gain', np.ones(dim))
    params.add(f'{prefix}.bias', np.zeros(dim))


def norm(params, prefix, x, axis=-1):
    return layer_norm(x, params[f'{prefix}.gain'], params[f'{prefix}.bias'], axis=axis)


def add_mlp(params, rng, prefix, d_in, hidden, d_out):
    """Two dense layers with a ReLU in between."""
    add_dense(params, rng, f'{prefix}.fc1', d_in, hidden)
    add_dense(params, rng, f'{prefix}.fc2', hidden, d_out)


def mlp(params, prefix, x):
    return dense(params, f'{prefix}.fc2', relu(dense(params, f'{prefix}.fc1', x)))


def attention(q, k, v):
    """ softmax(q kᵀ / sqrt(d)) v over the last two axes.
    :return: (output Tensor, attention weights ndarray)
    """
    d = q.shape[-1]
    scores = matmul(q, swapaxes(k, -1, -2))*(1./np.sqrt(d))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights.data


# ---------------------------------------------------------------------
# temporal embedding
# ---------------------------------------------------------------------

class TemporalEmbedding(object):
    """ Trainable day-of-year (366 rows) and hour-of-day (24 rows) tables of temb_dim/2 columns each. """
    __slots__ = ('params', 'prefix', 'temb_dim')

    def __init__(self, params, rng, temb_dim, prefix='temb'):
        if temb_dim < 2 or temb_dim % 2:
            raise ConfigError(f"temb_dim must be even and >= 2, got {temb_dim}", fields=('temb_dim',))
        half = temb_dim//2
        params.add(f'{prefix}.doy', rng.normal(0., 0.1, (N_DOY, half)))
        params.add(f'{prefix}.hod', rng.normal(0., 0.1, (N_HOD, half)))
        self.params = params
        self.prefix = prefix
        self.temb_dim = temb_dim

    def __call__(self, doy, hod):
        """ :param doy: int array [B] in 1..366; hod: int array [B] in 0..23
        :return: Tensor [B, temb_dim] """
        doy = np.asarray(doy, dtype=np.int64)
        return concat([take(self.params[f'{self.prefix}.doy'], doy-1),
                       take(self.params[f'{self.prefix}.hod'], np.asarray(hod, dtype=np.int64))], axis=-1)


def temporal_embed(tc, emb):
    """ One TimeCode -> [temb_dim] Tensor (doy row followed by hod row). """
    return reshape(emb(np.array([tc.doy]), np.array([tc.hod])), (emb.temb_dim,))


# ---------------------------------------------------------------------
# site input and self-attention
# ---------------------------------------------------------------------

def assemble_site_input(x_prev, x_curr, pe, t_emb):
    """ Per-site feature vector [x_prev ‖ x_curr ‖ pe ‖ t_emb], F = 12 + 4 + temb_dim.

    :param x_prev, x_curr: [B, N_s, 6] (or [N_s, 6]) arrays or Tensors
    :param pe: [N_s, 4] relative positional encoding
    :param t_emb: [B, temb_dim] (or [temb_dim]) Tensor, shared by all sites of an instance
    :return: Tensor [B, N_s, F] ([N_s, F] for unbatched input)
    """
    x_prev, x_curr, pe, t_emb = as_tensor(x_prev), as_tensor(x_curr), as_tensor(pe), as_tensor(t_emb)
    unbatched = x_prev.ndim == 2
    if unbatched:
        x_prev, x_curr = reshape(x_prev, (1,)+x_prev.shape), reshape(x_curr, (1,)+x_curr.shape)
        t_emb = reshape(t_emb, (1,)+t_emb.shape)
    if x_prev.ndim != 3 or x_prev.shape != x_curr.shape or x_prev.shape[-1] != N_POLLUTANTS:
        raise ShapeError(f"site inputs must both be [B, N_s, {N_POLLUTANTS}], "
                         f"got {x_prev.shape} and {x_curr.shape}")
    n_b, n_s, _ = x_prev.shape
    if pe.shape != (n_s, PE_DIM):
        raise ShapeError(f"positional encoding must be [{n_s}, {PE_DIM}], got {pe.shape}")
    if t_emb.ndim != 2 or t_emb.shape[0] != n_b:
        raise ShapeError(f"temporal embedding must be [{n_b}, temb_dim], got {t_emb.shape}")
    parts = [x_prev, x_curr,
             broadcast_to(reshape(pe, (1, n_s, PE_DIM)), (n_b, n_s, PE_DIM)),
             broadcast_to(reshape(t_emb, (n_b, 1, t_emb.shape[1])), (n_b, n_s, t_emb.shape[1]))]
    out = concat(parts, axis=-1)
    return reshape(out, out.shape[1:]) if unbatched else out


class SiteAttention(object):
    """ Q/K/V projections (no bias) of the site inputs, A = softmax(Q Kᵀ / sqrt(d_model)),
     output = MLP(LayerNorm(V + A V)).

    :param params: ParamStore the weights are registered in
    :param rng: numpy Generator for the initialization
    :param d_in: site feature width F
    :param d_model: latent width
    :param hidden: MLP hidden width
    """
    __slots__ = ('params', 'prefix', 'd_in', 'd_model')

    def __init__(self, params, rng, d_in, d_model, hidden, prefix='site'):
        for name in ('q', 'k', 'v'):
            add_dense(params, rng, f'{prefix}.w{name}', d_in, d_model, bias=False)
        add_norm(params, f'{prefix}.ln', d_model)
        add_mlp(params, rng, f'{prefix}.mlp', d_model, hidden, d_model)
        self.params = params
        self.prefix = prefix
        self.d_in = d_in
        self.d_model = d_model

    def __call__(self, x_inp, use_attention=True):
        """ :param x_inp: Tensor [B, N_s, F]
        :param use_attention: False drops the A V term from the residual sum
        :return: (H'_sa Tensor [B, N_s, d_model], attention ndarray [B, N_s, N_s]) """
        x_inp = as_tensor(x_inp)
        if x_inp.ndim != 3 or x_inp.shape[-1] != self.d_in:
            raise ShapeError(f"site attention expects [B, N_s, {self.d_in}], got {x_inp.shape}")
        if x_inp.shape[1] == 0:
            raise InputValidationError("site attention needs at least one station")
        p = self.prefix
        q = dense(self.params, f'{p}.wq', x_inp)
        k = dense(self.params, f'{p}.wk', x_inp)
        v = dense(self.params, f'{p}.wv', x_inp)
        h_sa, weights = attention(q, k, v)
        z = v+h_sa if use_attention else v
        return mlp(self.params, f'{p}.mlp', norm(self.params, f'{p}.ln', z)), weights


def site_self_attention(inp, block, use_attention=True):
    """Functional form of SiteAttention.__call__ accepting an unbatched [N_s, F] input too."""
    inp = as_tensor(inp)
    if inp.ndim == 2:
        out, weights = block(reshape(inp, (1,)+inp.shape), use_attention)
        return reshape(out, out.shape[1:]), weights[0]
    return block(inp, use_attention)


def site_feature_width(temb_dim):
    return 2*N_POLLUTANTS+PE_DIM+temb_dim

