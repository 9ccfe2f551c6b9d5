#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: Coupling.py
# ==================================
"""Meteorology / emission coupling.
 A residual convolutional encoder turns the stacked met + emission + grid-PE channels into
 one latent vector per grid cell; the site latents then query those cells by cross-attention,
 with the attended features added back to the query."""

import logging

import numpy as np

from aircast.SiteAttention import add_mlp, mlp, add_norm, norm, add_dense, dense, attention
from aircast.tensor import as_tensor, broadcast_to, concat, conv2d, glorot, relu, reshape, swapaxes
from aircast.utils import InputValidationError, ShapeError

logger = logging.getLogger(__name__)

GRID_PE_DIM = 2


class ResidualBlock(object):
    """ conv3x3 -> channel norm -> ReLU -> conv3x3 -> channel norm, plus the skip path
     (1x1 projection when the width changes), ReLU after the sum. Stride 1, shape preserving. """
    __slots__ = ('params', 'prefix', 'c_in', 'width')

    def __init__(self, params, rng, prefix, c_in, width, k=3):
        params.add(f'{prefix}.conv1', glorot(rng, (width, c_in, k, k), c_in*k*k, width*k*k))
        add_norm(params, f'{prefix}.ln1', width)
        params.add(f'{prefix}.conv2', glorot(rng, (width, width, k, k), width*k*k, width*k*k))
        add_norm(params, f'{prefix}.ln2', width)
        if c_in != width:
            params.add(f'{prefix}.proj', glorot(rng, (width, c_in, 1, 1), c_in, width))
        self.params = params
        self.prefix = prefix
        self.c_in = c_in
        self.width = width

    def skip(self, x):
        p = f'{self.prefix}.proj'
        return conv2d(x, self.params[p]) if p in self.params else x

    def __call__(self, x):
        p, k = self.params, self.prefix
        pad = (p[f'{k}.conv1'].shape[-1]-1)//2
        h = relu(norm(p, f'{k}.ln1', conv2d(x, p[f'{k}.conv1'], padding=pad), axis=1))
        h = norm(p, f'{k}.ln2', conv2d(h, p[f'{k}.conv2'], padding=pad), axis=1)
        return relu(h+self.skip(x))


class GridLatent(object):
    """ Encoder output: h_em [B, N_grids, d_model]; column k is grid cell divmod(k, n_lon). """
    __slots__ = ('h_em', 'n_lat', 'n_lon')

    def __init__(self, h_em, n_lat, n_lon):
        self.h_em = h_em
        self.n_lat = n_lat
        self.n_lon = n_lon

    @property
    def n_grids(self):
        return self.n_lat*self.n_lon

    def grid_index(self, k):
        return divmod(int(k), self.n_lon)


class GridEncoder(object):
    """ concat(met, ems, grid PE) -> `depth` residual blocks of `width` channels -> 1x1 conv to d_model.

    :param n_met, n_ems: channel counts of the two gridded modalities
    """
    __slots__ = ('params', 'prefix', 'n_met', 'n_ems', 'blocks', 'd_model')

    def __init__(self, params, rng, n_met, n_ems, d_model, width=16, depth=2, prefix='enc'):
        if depth < 1:
            raise InputValidationError(f"encoder depth must be >= 1, got {depth}")
        c_in = n_met+n_ems+GRID_PE_DIM
        self.blocks = []
        for b in range(depth):
            self.blocks.append(ResidualBlock(params, rng, f'{prefix}.block{b}', c_in if b == 0 else width, width))
        params.add(f'{prefix}.out.w', glorot(rng, (d_model, width, 1, 1), width, d_model))
        params.add(f'{prefix}.out.b', np.zeros(d_model))
        self.params = params
        self.prefix = prefix
        self.n_met = n_met
        self.n_ems = n_ems
        self.d_model = d_model

    def features(self, met, ems, pe_grid):
        """Residual-stack features [B, width, n_lat, n_lon] before the output projection."""
        met, ems, pe_grid = as_tensor(met), as_tensor(ems), as_tensor(pe_grid)
        if met.ndim != 4 or ems.ndim != 4:
            raise ShapeError(f"met and ems must be [B, C, n_lat, n_lon], got {met.shape} and {ems.shape}")
        if met.shape[0] != ems.shape[0] or met.shape[2:] != ems.shape[2:] or pe_grid.shape[1:] != met.shape[2:]:
            raise ShapeError(f"grid geometry mismatch: met {met.shape}, ems {ems.shape}, pe {pe_grid.shape}")
        if met.shape[1] != self.n_met or ems.shape[1] != self.n_ems:
            raise ShapeError(f"expected {self.n_met} met and {self.n_ems} ems channels, "
                             f"got {met.shape[1]} and {ems.shape[1]}")
        n_b, _, n_lat, n_lon = met.shape
        pe = broadcast_to(reshape(pe_grid, (1, GRID_PE_DIM, n_lat, n_lon)), (n_b, GRID_PE_DIM, n_lat, n_lon))
        x = concat([met, ems, pe], axis=1)
        for block in self.blocks:
            x = block(x)
        return x

    def __call__(self, met, ems, pe_grid):
        x = self.features(met, ems, pe_grid)
        n_b, _, n_lat, n_lon = x.shape
        h = conv2d(x, self.params[f'{self.prefix}.out.w'], self.params[f'{self.prefix}.out.b'])
        h = swapaxes(reshape(h, (n_b, self.d_model, n_lat*n_lon)), 1, 2)
        return GridLatent(h, n_lat, n_lon)


def grid_encode(met, ems, pe_grid, encoder):
    """ :return: GridLatent with h_em [B, n_lat*n_lon, d_model] """
    return encoder(met, ems, pe_grid)


class CrossAttention(object):
    """ Q from the site latents, K and V from the grid latents (no bias),
     A_cross = softmax(Q Kᵀ / sqrt(d_model)), output = MLP(LayerNorm(Q + A_cross V)). """
    __slots__ = ('params', 'prefix', 'd_model')

    def __init__(self, params, rng, d_model, hidden, prefix='cross'):
        for name in ('q', 'k', 'v'):
            add_dense(params, rng, f'{prefix}.w{name}', d_model, d_model, bias=False)
        add_norm(params, f'{prefix}.ln', d_model)
        add_mlp(params, rng, f'{prefix}.mlp', d_model, hidden, d_model)
        self.params = params
        self.prefix = prefix
        self.d_model = d_model

    def __call__(self, site_latent, grid_latent, use_mlp=True):
        """ :param site_latent: Tensor [B, N_s, d_model]
        :param grid_latent: GridLatent or Tensor [B, N_grids, d_model]
        :param use_mlp: False returns LayerNorm(Q + A_cross V) directly
        :return: (H'_MEA Tensor [B, N_s, d_model], A_cross ndarray [B, N_s, N_grids]) """
        h_em = grid_latent.h_em if isinstance(grid_latent, GridLatent) else as_tensor(grid_latent)
        site_latent = as_tensor(site_latent)
        if h_em.ndim != 3 or h_em.shape[1] == 0:
            raise InputValidationError(f"cross attention needs at least one grid cell, got {h_em.shape}")
        if site_latent.shape[-1] != self.d_model or h_em.shape[-1] != self.d_model:
            raise ShapeError(f"latent widths {site_latent.shape[-1]}/{h_em.shape[-1]} != d_model {self.d_model}")
        p = self.prefix
        q = dense(self.params, f'{p}.wq', site_latent)
        k = dense(self.params, f'{p}.wk', h_em)
        v = dense(self.params, f'{p}.wv', h_em)
        h_mea, weights = attention(q, k, v)
        z = norm(self.params, f'{p}.ln', q+h_mea)
        return (mlp(self.params, f'{p}.mlp', z) if use_mlp else z), weights


def cross_attention_coupling(site_latent, grid_latent, block, use_mlp=True):
    return block(site_latent, grid_latent, use_mlp)
