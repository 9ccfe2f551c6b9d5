#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: utils.py
# ==================================
"""Useful tools shared by all modules: errors, seeds, logging, JSON and numerical helpers."""

import hashlib
import json
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)


class AircastError(Exception):
    """Base class for every error raised on purpose by this package."""


class InputValidationError(AircastError, ValueError):
    pass


class ConfigError(AircastError, ValueError):
    """Invalid configuration; `fields` lists every offending field."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class ShapeError(AircastError, ValueError):
    pass


class OutOfBoundsError(AircastError, ValueError):
    pass


class NonFiniteError(AircastError, FloatingPointError):
    pass


class DivergenceError(AircastError, RuntimeError):
    pass


class GradientCheckError(AircastError, RuntimeError):
    def __init__(self, message, tensors=()):
        super().__init__(message)
        self.tensors = tuple(tensors)


class MissingArtifactError(AircastError, FileNotFoundError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)


def substream(seed, purpose):
    """ Child random generator for a named purpose: seed XOR sha256(purpose).
     Streams for different purposes are independent of the order they are drawn in.

    :param seed: master seed (int)
    :param purpose: str, e.g. 'synth:wind' or 'init:6h'
    :return: numpy.random.Generator
    """
    return np.random.default_rng(derive_seed(seed, purpose))


def derive_seed(seed, purpose):
    digest = hashlib.sha256(purpose.encode('utf-8')).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], 'little')) & 0xFFFFFFFFFFFFFFFF


def check_finite(arr, what='array'):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        n_bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what} contains {n_bad} non-finite value(s)")
    return arr


LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


def setup_logging(level=None, logfile=None):
    """ Configure the package logger. `level` falls back to $AIRCAST_LOG, then INFO. """
    level = (level or os.environ.get('AIRCAST_LOG') or 'INFO').upper()
    if level not in LOG_LEVELS:
        raise ConfigError(f"Unknown log level: {level}. Supported levels: {'|'.join(LOG_LEVELS)}",
                          fields=('log_level',))
    root = logging.getLogger('aircast')
    root.setLevel(level)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s')
    handlers = [logging.StreamHandler()]
    if logfile is not None:
        handlers.append(logging.FileHandler(logfile, mode='w'))
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    return root


def to_jsonable(obj):
    """Convert numpy scalars/arrays (and NaN, reported as missing) to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        obj = float(obj)
        return obj if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, 'w') as fp:
        json.dump(to_jsonable(obj), fp, indent=2, sort_keys=True)
        fp.write('\n')


def read_json(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"Missing file: {path}", path=path)
    with open(path, 'r') as fp:
        return json.load(fp)


def central_difference(func, x, idx, h=1e-5):
    """ Central finite difference of scalar `func()` w.r.t. the entry `idx` of array `x`
     (modified in place, then restored).
     A single-tableau version of Ridders' method: error O(h^2). """
    if h == 0:
        raise ValueError('h must be nonzero in central_difference')
    x0 = x[idx]
    x[idx] = x0+h
    f_plus = func()
    x[idx] = x0-h
    f_minus = func()
    x[idx] = x0
    return (f_plus-f_minus)/(2.0*h)


def relative_error(a, b, floor=1e-5):
    """|a-b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a-b)/np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
