#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: tensor.py
# ==================================
"""A minimal dense-array core with reverse-mode differentiation.
 Only the operations the forecasting model needs are implemented: broadcasting arithmetic,
 batched matmul, softmax, layer normalization, 2-D convolution, embedding lookup, reductions,
 ReLU; plus parameter storage, the Adam update and checkpoints.
 All data are 64-bit floats; every op refuses to produce NaN/Inf."""

import logging
import os
import re
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from aircast.utils import NonFiniteError, ShapeError, MissingArtifactError, central_difference, read_json, write_json

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Forward passes inside this block record no graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def unbroadcast(g, shape):
    """Sum `g` over the axes that were broadcast to reach it from `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor(object):
    """ A node of the computation graph.

    :param data: array-like, stored as float64
    :param requires_grad: whether gradients flow into this tensor
    :param name: parameter name (leaves only)
    """
    __slots__ = ('data', 'grad', 'requires_grad', 'name', 'op', '_prev', '_backward')

    def __init__(self, data, requires_grad=False, name=None, _prev=(), op=''):
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by op '{op or 'leaf'}'"
                                 + (f" ({name})" if name else ''))
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._prev = _prev
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op='{self.op}'" + (f", name='{self.name}')" if self.name else ')')

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    """ Wrap the result of an op. `backward_fn(g)` returns one gradient (or None) per parent. """
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _prev=tuple(parents), op=op)
        out._backward = backward_fn
    else:
        out = Tensor(data, op=op)
    return out


# ---------------------------------------------------------------------
# elementwise arithmetic (with numpy broadcasting)
# ---------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _make(a.data+b.data, (a, b), _backward, 'add')


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _make(a.data-b.data, (a, b), _backward, 'sub')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return unbroadcast(g*b.data, a.shape), unbroadcast(g*a.data, b.shape)
    return _make(a.data*b.data, (a, b), _backward, 'mul')


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")

    def _backward(g):
        return unbroadcast(g/b.data, a.shape), unbroadcast(-g*a.data/b.data**2, b.shape)
    return _make(a.data/b.data, (a, b), _backward, 'div')


def square(a):
    def _backward(g):
        return 2*a.data*g,
    return _make(a.data**2, (a,), _backward, 'square')


def relu(a):
    mask = a.data > 0

    def _backward(g):
        return g*mask,
    return _make(a.data*mask, (a,), _backward, 'relu')


# ---------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------

def reshape(a, shape):
    def _backward(g):
        return g.reshape(a.shape),
    return _make(a.data.reshape(shape), (a,), _backward, 'reshape')


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def _backward(g):
        return g.transpose(inv),
    return _make(a.data.transpose(axes), (a,), _backward, 'transpose')


def swapaxes(a, ax1, ax2):
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a, shape):
    def _backward(g):
        return unbroadcast(g, a.shape),
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), _backward, 'broadcast')


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].ndim
    if any(t.ndim != ref for t in tensors):
        raise ShapeError(f"concat of tensors with ranks {[t.ndim for t in tensors]}")
    axis = axis % ref
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat along axis {axis}: {e}") from e
    bounds = np.cumsum([0]+[t.shape[axis] for t in tensors])

    def _backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i+1]), axis=axis) for i in range(len(tensors)))
    return _make(data, tensors, _backward, 'concat')


def _basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a, idx):
    def _backward(g):
        ga = np.zeros_like(a.data)
        if _basic_index(idx):
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        return ga,
    return _make(a.data[idx], (a,), _backward, 'getitem')


def take(table, indices):
    """ Row lookup `table[indices]` (embedding). Gradient rows of unused indices stay zero. """
    indices = np.asarray(indices, dtype=np.int64)
    n_rows = table.shape[0]
    if np.any(indices < 0) or np.any(indices >= n_rows):
        raise IndexError(f"lookup index out of range [0, {n_rows}): {indices.min()}..{indices.max()}")

    def _backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return gt,
    return _make(table.data[indices], (table,), _backward, 'take')


# ---------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy(),
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, 'sum')


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims)*(1./n)


def matmul(a, b):
    """ Batched matrix product with numpy broadcasting over leading axes (both ranks >= 2). """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b), _backward, 'matmul')


def linear(x, w, b=None):
    """x[..., in] @ w[in, out] (+ b[out])"""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def softmax(x, axis=-1):
    """ Softmax with max-subtraction, rows along `axis` sum to one. """
    z = x.data-x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e/e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return y*(g-(g*y).sum(axis=axis, keepdims=True)),
    return _make(y, (x,), _backward, 'softmax')


def layer_norm(x, gain, bias, eps=1e-5, axis=-1):
    """ Normalize each vector along `axis` to zero mean and unit variance (eps inside the root),
     then scale by `gain` and shift by `bias` (both of length x.shape[axis]). """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    axis = axis % x.ndim
    n = x.shape[axis]
    if n < 2:
        raise ShapeError(f"layer_norm needs at least 2 entries along axis {axis}, got {n}")
    bshape = [1]*x.ndim
    bshape[axis] = n
    g_b, b_b = gain.data.reshape(bshape), bias.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data-mu
    var = (xc*xc).mean(axis=axis, keepdims=True)
    rstd = 1./np.sqrt(var+eps)
    xhat = xc*rstd

    def _backward(g):
        gxhat = g*g_b
        gx = rstd*(gxhat-gxhat.mean(axis=axis, keepdims=True)
                   - xhat*(gxhat*xhat).mean(axis=axis, keepdims=True))
        ggain = unbroadcast(g*xhat, tuple(bshape)).reshape(gain.shape)
        gbias = unbroadcast(g, tuple(bshape)).reshape(bias.shape)
        return gx, ggain, gbias
    return _make(xhat*g_b+b_b, (x, gain, bias), _backward, 'layer_norm')


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """ 2-D cross-correlation (no kernel flip).

    :param x: Tensor [B, C_in, H, W] or [C_in, H, W]
    :param kernels: Tensor [C_out, C_in, k, k]
    :param bias: optional Tensor [C_out]
    :param stride: int
    :param padding: int, zero padding on every side
    :return: Tensor [B, C_out, H_out, W_out] (batch axis dropped again for 3-D input)
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,)+x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects x [B,C,H,W] and kernels [Co,Ci,k,k], got {x.shape}, {kernels.shape}")
    n_b, c_in, h, w = x.shape
    c_out, k_in, k, k2 = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in} channels, kernels expect {k_in}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {k}x{k2}")
    p, s = int(padding), int(stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]  # [B, C, Ho, Wo, k, k]
    h_out, w_out = win.shape[2], win.shape[3]
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w}, k={k}, padding={p}")
    out = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        out = out+bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def _backward(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gwin = np.tensordot(g, kernels.data, axes=([1], [0]))  # [B, Ho, Wo, C, k, k]
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i+s*h_out:s, j:j+s*w_out:s] += gwin[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p+h, p:p+w] if p else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    out = _make(np.ascontiguousarray(out), parents, _backward, 'conv2d')
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------

def topological_order(root):
    """ Nodes reachable from `root`, every node after all of its inputs (iterative DFS). """
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """ Reverse-mode sweep from a scalar `loss`.
     Every node reachable from the loss is visited exactly once; leaf gradients are
     overwritten (not accumulated across calls).

    :param loss: scalar Tensor
    :param params: optional ParamStore; when given, returns {name: gradient} for all its
     parameters (zeros for parameters the loss does not depend on)
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._prev, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad+g
    if params is None:
        return None
    return params.grads()


def numerical_gradient(func, tensor, indices=None, h=1e-5):
    """ Central finite differences of scalar `func()` w.r.t. entries of `tensor.data`.

    :param func: callable returning a float (re-runs the forward pass)
    :param tensor: leaf Tensor whose data is perturbed in place (restored afterwards)
    :param indices: iterable of flat indices, all entries by default
    :return: {flat index: derivative}
    """
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    with no_grad():
        return {int(k): central_difference(func, flat, int(k), h) for k in indices}


# ---------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ---------------------------------------------------------------------

def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6./(fan_in+fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore(object):
    """ Named parameter tensors plus Adam optimizer state. Names are unique and shapes fixed. """
    __slots__ = ('_params', 'm', 'v', 'step_count')

    def __init__(self):
        self._params = {}
        self.m = {}
        self.v = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"Duplicate parameter name: {name}")
        p = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    @property
    def names(self):
        return list(self._params)

    @property
    def n_values(self):
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grads(self):
        return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in self._params.items()}

    def snapshot(self):
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_snapshot(self, snap):
        for n, p in self._params.items():
            arr = np.asarray(snap[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {n}: snapshot shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def save(self, path, meta=None, optimizer=None):
        """ Checkpoint directory: manifest.json + one little-endian float64 blob per tensor. """
        os.makedirs(path, exist_ok=True)
        entries = []
        for i, (n, p) in enumerate(self._params.items()):
            fname = f"p{i:03d}_{re.sub(r'[^A-Za-z0-9_.-]', '_', n)}.bin"
            p.data.astype('<f8').tofile(os.path.join(path, fname))
            entries.append({'name': n, 'shape': list(p.shape), 'file': fname})
        opt = {'step': self.step_count}
        opt.update(optimizer or {})
        write_json(os.path.join(path, 'manifest.json'), {'params': entries, 'optimizer': opt, 'meta': meta or {}})
        logger.debug("Saved %d tensors to %s", len(entries), path)

    @classmethod
    def load(cls, path):
        """ :return: (ParamStore, meta dict, optimizer dict) """
        manifest_path = os.path.join(path, 'manifest.json')
        if not os.path.exists(manifest_path):
            raise MissingArtifactError(f"Missing checkpoint manifest: {manifest_path}", path=manifest_path)
        manifest = read_json(manifest_path)
        store = cls()
        for e in manifest['params']:
            blob = os.path.join(path, e['file'])
            if not os.path.exists(blob):
                raise MissingArtifactError(f"Missing checkpoint blob: {blob}", path=blob)
            arr = np.fromfile(blob, dtype='<f8')
            if arr.size != int(np.prod(e['shape'])):
                raise ShapeError(f"checkpoint blob {e['file']} has {arr.size} values, manifest says {e['shape']}")
            store.add(e['name'], arr.reshape(e['shape']))
        store.step_count = int(manifest['optimizer'].get('step', 0))
        return store, manifest.get('meta', {}), manifest['optimizer']


def clip_grad_norm(grads, max_norm):
    """ Scale all gradients so their global L2 norm is at most `max_norm`.
     Squared norms are reduced in sorted name order. :return: (grads, norm before clipping) """
    total = 0.
    for n in sorted(grads):
        total += float(np.sum(grads[n]**2))
    norm = np.sqrt(total)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm/(norm+1e-12)
        grads = {n: g*scale for n, g in grads.items()}
    return grads, norm


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """ One Adam update with bias correction, in place on `params` (a ParamStore). """
    if set(grads) != set(params.names):
        raise ShapeError(f"gradient names do not match parameters: "
                         f"{sorted(set(grads) ^ set(params.names))}")
    params.step_count += 1
    t = params.step_count
    c1, c2 = 1.-beta1**t, 1.-beta2**t
    for n in params.names:
        p, g = params[n], np.asarray(grads[n], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {n} has shape {g.shape}, parameter has {p.shape}")
        m = params.m.get(n)
        v = params.v.get(n)
        m = (1.-beta1)*g if m is None else beta1*m+(1.-beta1)*g
        v = (1.-beta2)*g*g if v is None else beta2*v+(1.-beta2)*g*g
        params.m[n], params.v[n] = m, v
        p.data -= lr*(m/c1)/(np.sqrt(v/c2)+eps)
    return params
