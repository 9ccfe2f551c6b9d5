#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: test_tensor.py
# ==================================

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from aircast import tensor as T
from aircast.tensor import ParamStore, Tensor, adam_step, backward, clip_grad_norm, numerical_gradient
from aircast.utils import MissingArtifactError, NonFiniteError, ShapeError


def _check_grad(build, *shapes, seed=0, rtol=1e-6, atol=1e-6):
    """Compare the reverse pass of scalar `build(*leaves)` with central differences."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    loss = build(*leaves)
    backward(loss)
    for leaf in leaves:
        num = numerical_gradient(lambda: float(build(*leaves).data), leaf)
        expect = np.array([num[k] for k in range(leaf.size)]).reshape(leaf.shape)
        assert_allclose(leaf.grad, expect, rtol=rtol, atol=atol)


def test_softmax_example():
    y = T.softmax(Tensor([1., 2., 3.]))
    assert_allclose(y.data, [0.090031, 0.244728, 0.665241], atol=1e-6)
    big = T.softmax(Tensor([1000., 1001., 1002.]))
    assert_allclose(big.data, y.data, rtol=1e-12)


def test_layer_norm_example():
    y = T.layer_norm(Tensor([1., 2., 3.]), np.ones(3), np.zeros(3))
    assert_allclose(y.data, [-1.224742, 0., 1.224742], atol=1e-6)
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor([[1.], [2.]]), np.ones(1), np.zeros(1))


def test_conv2d_identity_and_box():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.
    assert_allclose(T.conv2d(Tensor(x), k, padding=1).data, x, rtol=1e-14)
    c = np.full((1, 1, 5, 5), 2.5)
    box = T.conv2d(Tensor(c), np.ones((1, 1, 3, 3)), padding=1).data
    assert_allclose(box[0, 0, 1:-1, 1:-1], 9*2.5)
    assert_allclose(box[0, 0, 0, 0], 4*2.5)


def test_conv2d_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 7, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), k, bias=b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    assert out.shape == (1, 3, 4, 4)
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref = np.sum(xp[0, :, 2*i:2*i+3, 2*j:2*j+3]*k[o])+b[o]
                assert_allclose(out[0, o, i, j], ref, rtol=1e-12)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(x), rng.normal(size=(3, 4, 3, 3)))


def test_conv2d_unbatched():
    x = np.random.default_rng(3).normal(size=(2, 4, 4))
    k = np.random.default_rng(4).normal(size=(1, 2, 3, 3))
    assert_allclose(T.conv2d(Tensor(x), k, padding=1).data, T.conv2d(Tensor(x[None]), k, padding=1).data[0])


def test_backward_simple():
    p = Tensor(np.arange(4.), requires_grad=True)
    backward(T.tsum(p))
    assert_array_equal(p.grad, np.ones(4))
    backward(T.tsum(T.square(p))*0.5)
    assert_allclose(p.grad, p.data)


def test_shared_node_accumulates():
    p = Tensor([1.5, -2.], requires_grad=True)
    q = p*p
    backward(T.tsum(q+q))
    assert_allclose(p.grad, 4*p.data)


def test_gradients_of_ops():
    _check_grad(lambda a, b: T.tsum((a*b-a/(T.square(b)+1.))*2.), (3, 4), (3, 4))
    _check_grad(lambda a, b: T.tsum(T.matmul(a, b)*T.matmul(a, b)), (2, 3, 4), (4, 5))
    _check_grad(lambda a: T.tsum(T.softmax(a, axis=1)*np.arange(15.).reshape(3, 5)), (3, 5))
    _check_grad(lambda x, g, b: T.tsum(T.square(T.layer_norm(x, g, b))*np.arange(12.).reshape(3, 4)),
                (3, 4), (4,), (4,))
    _check_grad(lambda x, k, b: T.tsum(T.square(T.conv2d(x, k, b, padding=1))), (2, 2, 4, 5), (3, 2, 3, 3), (3,))
    _check_grad(lambda x, k: T.tsum(T.square(T.conv2d(x, k, stride=2))), (1, 1, 5, 5), (2, 1, 3, 3))
    _check_grad(lambda a: T.tsum(T.square(T.concat([a[:, :2], a[..., 1:]], axis=1))), (3, 4))
    _check_grad(lambda a: T.tsum(T.square(T.transpose(T.reshape(a, (4, 3)), (1, 0))*np.arange(12.).reshape(3, 4))),
                (3, 4))
    _check_grad(lambda a, b: T.tsum(T.square(T.add(a, b))), (3, 1), (1, 4))
    _check_grad(lambda a: T.tsum(T.mean(T.square(a), axis=0)), (5, 2))


def test_take_gradient():
    table = Tensor(np.random.default_rng(5).normal(size=(6, 3)), requires_grad=True)
    backward(T.tsum(T.take(table, [1, 1, 4])))
    expect = np.zeros((6, 3))
    expect[1] = 2.
    expect[4] = 1.
    assert_array_equal(table.grad, expect)
    with pytest.raises(IndexError):
        T.take(table, [6])


def test_no_grad_records_nothing():
    p = Tensor([1., 2.], requires_grad=True)
    with T.no_grad():
        y = p*3.
    assert not y.requires_grad
    assert y._prev == ()


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(Tensor([1., 2.], requires_grad=True)*2.)


def test_non_finite_refused():
    with pytest.raises(NonFiniteError):
        Tensor([1., np.nan])
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.]), Tensor([0.]))


def test_adam_first_step():
    store = ParamStore()
    store.add('w', np.zeros(3))
    adam_step(store, {'w': np.ones(3)}, lr=0.1)
    assert_allclose(store['w'].data, -0.1, rtol=1e-6)
    before = store['w'].data.copy()
    store2 = ParamStore()
    store2.add('w', before)
    adam_step(store2, {'w': np.zeros(3)}, lr=0.1)
    assert_array_equal(store2['w'].data, before)
    with pytest.raises(ShapeError):
        adam_step(store, {'v': np.ones(3)}, lr=0.1)


def test_clip_grad_norm():
    grads, norm = clip_grad_norm({'a': np.array([3.]), 'b': np.array([4.])}, 1.)
    assert norm == 5.
    total = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    assert_allclose(total, 1., rtol=1e-9)
    same, _ = clip_grad_norm({'a': np.array([0.3])}, 1.)
    assert_array_equal(same['a'], [0.3])


def test_param_store_round_trip(tmp_path):
    store = ParamStore()
    store.add('enc/w', np.random.default_rng(6).normal(size=(3, 2)))
    store.add('enc/b', np.zeros(2))
    adam_step(store, {'enc/w': np.ones((3, 2)), 'enc/b': np.ones(2)}, lr=0.01)
    store.save(str(tmp_path/'ckpt'), meta={'kind': '6h'})
    back, meta, opt = ParamStore.load(str(tmp_path/'ckpt'))
    assert back.names == store.names
    assert meta == {'kind': '6h'}
    assert opt['step'] == 1 and back.step_count == 1
    for n in store:
        assert_array_equal(back[n].data, store[n].data)
    with pytest.raises(MissingArtifactError):
        ParamStore.load(str(tmp_path/'nowhere'))
    with pytest.raises(ValueError):
        store.add('enc/b', np.ones(2))
