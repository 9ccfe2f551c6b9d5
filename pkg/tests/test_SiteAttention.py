#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: test_SiteAttention.py
# ==================================

import numpy as np
import pytest
from numpy.testing import assert_allclose

from aircast.Dataset import TimeCode
from aircast.SiteAttention import (SiteAttention, TemporalEmbedding, assemble_site_input, site_feature_width,
                                   site_self_attention, temporal_embed)
from aircast.tensor import ParamStore, Tensor, backward, tsum
from aircast.utils import ConfigError, ShapeError

N_S = 5
TEMB = 4


@pytest.fixture
def block():
    params = ParamStore()
    return SiteAttention(params, np.random.default_rng(0), site_feature_width(TEMB), 8, 10)


def _site_input(n_b=3, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_b, N_S, site_feature_width(TEMB)))


def test_feature_width():
    assert site_feature_width(TEMB) == 6+6+4+TEMB


def test_temporal_embedding_rows():
    params = ParamStore()
    emb = TemporalEmbedding(params, np.random.default_rng(0), TEMB)
    out = emb(np.array([1, 366]), np.array([0, 23]))
    assert out.shape == (2, TEMB)
    assert_allclose(out.data[0, :2], params['temb.doy'].data[0])
    assert_allclose(out.data[1, :2], params['temb.doy'].data[365])
    assert_allclose(out.data[1, 2:], params['temb.hod'].data[23])
    single = temporal_embed(TimeCode(32, 7), emb)
    assert single.shape == (TEMB,)
    assert_allclose(single.data, np.concatenate([params['temb.doy'].data[31], params['temb.hod'].data[7]]))
    with pytest.raises(ConfigError):
        TemporalEmbedding(ParamStore(), np.random.default_rng(0), 3)


def test_assemble_site_input():
    rng = np.random.default_rng(2)
    x_prev, x_curr = rng.normal(size=(2, N_S, 6)), rng.normal(size=(2, N_S, 6))
    pe, t_emb = rng.normal(size=(N_S, 4)), rng.normal(size=(2, TEMB))
    out = assemble_site_input(x_prev, x_curr, pe, t_emb).data
    assert out.shape == (2, N_S, site_feature_width(TEMB))
    assert_allclose(out[1, 3], np.concatenate([x_prev[1, 3], x_curr[1, 3], pe[3], t_emb[1]]))
    flat = assemble_site_input(x_prev[0], x_curr[0], pe, t_emb[0]).data
    assert_allclose(flat, out[0])
    with pytest.raises(ShapeError):
        assemble_site_input(x_prev, x_curr[:, :, :5], pe, t_emb)
    with pytest.raises(ShapeError):
        assemble_site_input(x_prev, x_curr, pe[:4], t_emb)


def test_attention_is_row_stochastic(block):
    out, weights = block(_site_input())
    assert out.shape == (3, N_S, 8)
    assert weights.shape == (3, N_S, N_S)
    assert np.all(weights >= 0)
    assert_allclose(weights.sum(axis=-1), 1., atol=1e-9)


def test_station_permutation_equivariance(block):
    x = _site_input()
    perm = np.random.default_rng(3).permutation(N_S)
    out, weights = block(x)
    out_p, weights_p = block(x[:, perm])
    assert_allclose(out_p.data, out.data[:, perm], atol=1e-12)
    assert_allclose(weights_p, weights[:, perm][:, :, perm], atol=1e-12)


def test_single_station_attends_to_itself(block):
    _, weights = block(_site_input()[:, :1])
    assert_allclose(weights, 1.)


def test_unbatched_matches_batched(block):
    x = _site_input(n_b=1)
    out, weights = block(x)
    flat, flat_weights = site_self_attention(x[0], block)
    assert_allclose(flat.data, out.data[0])
    assert_allclose(flat_weights, weights[0])


def _layer_norm(z, gain, bias, eps=1e-5):
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z-mu)**2).mean(axis=-1, keepdims=True)
    return (z-mu)/np.sqrt(var+eps)*gain+bias


def _mlp(w, prefix, z):
    return np.maximum(z @ w[f'{prefix}.fc1.w']+w[f'{prefix}.fc1.b'], 0.) @ w[f'{prefix}.fc2.w']+w[f'{prefix}.fc2.b']


def _site_reference(block, x, use_attention=True):
    """Straight numpy Q/K/V, softmax(Q Kᵀ / sqrt(d)), MLP(LayerNorm(V + A V))."""
    w = block.params.snapshot()
    q, k, v = x @ w['site.wq.w'], x @ w['site.wk.w'], x @ w['site.wv.w']
    s = q @ np.swapaxes(k, -1, -2)/np.sqrt(q.shape[-1])
    a = np.exp(s-s.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)
    z = v+a @ v if use_attention else v
    return _mlp(w, 'site.mlp', _layer_norm(z, w['site.ln.gain'], w['site.ln.bias'])), a


@pytest.fixture
def shifted_norm(block):
    rng = np.random.default_rng(7)
    snap = block.params.snapshot()
    snap['site.ln.gain'] = 1.+0.3*rng.normal(size=snap['site.ln.gain'].shape)
    snap['site.ln.bias'] = 0.2*rng.normal(size=snap['site.ln.bias'].shape)
    block.params.load_snapshot(snap)
    return block


def test_matches_reference(shifted_norm):
    x = _site_input()
    out, weights = shifted_norm(x)
    ref, ref_weights = _site_reference(shifted_norm, x)
    assert_allclose(weights, ref_weights, rtol=1e-10, atol=1e-12)
    assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)


def test_attention_switch_drops_attended_term(shifted_norm):
    x = _site_input()
    with_att, _ = shifted_norm(x)
    without, _ = shifted_norm(x, use_attention=False)
    ref, _ = _site_reference(shifted_norm, x, use_attention=False)
    assert_allclose(without.data, ref, rtol=1e-10, atol=1e-12)
    assert not np.allclose(with_att.data, without.data)


def test_width_mismatch(block):
    with pytest.raises(ShapeError):
        block(np.zeros((1, N_S, site_feature_width(TEMB)+1)))


def test_every_parameter_gets_a_gradient(block):
    out, _ = block(Tensor(_site_input()))
    backward(tsum(out*out))
    grads = block.params.grads()
    for name, g in grads.items():
        assert g.shape == block.params[name].shape
        assert np.any(g != 0), name


def test_randomized_instances(block):
    rng = np.random.default_rng(4)
    for _ in range(100):
        n_s = int(rng.integers(1, 12))
        x = rng.normal(scale=rng.uniform(0.1, 5.), size=(2, n_s, site_feature_width(TEMB)))
        perm = rng.permutation(n_s)
        out, weights = block(x)
        out_p, _ = block(x[:, perm])
        assert_allclose(weights.sum(axis=-1), 1., atol=1e-9)
        assert np.all(weights >= 0)
        assert_allclose(out_p.data, out.data[:, perm], atol=1e-10)
