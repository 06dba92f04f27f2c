"""Numeric kernels with selectable backend.

Two interchangeable implementations exist for the hot inner loops
(convolutions, depthwise convolutions, bilinear resampling):

* ``numpy`` - BLAS-backed tap-loop implementation (default: on few-core
  machines the BLAS matmuls win by a wide margin)
* ``numba`` - JIT-compiled parallel loops; worth selecting on many-core
  boxes or where a threaded BLAS is unavailable

Select with the ``PLUTONET_BACKEND`` environment variable or
:func:`set_backend`. ``benchmarks/bench_kernels.py`` compares the two.
Within one backend, results are bitwise reproducible run to run: the
numba loops never reduce across threads, and the numpy path is plain
BLAS with a fixed reduction order.
"""

import logging
import os

import numpy as np

from ..errors import ConfigError
from . import numpy_ops

log = logging.getLogger(__name__)

ENV_VAR = "PLUTONET_BACKEND"
_BACKENDS = ("numba", "numpy")

_active = None
_numba_ops = None


def _load_numba_ops():
    global _numba_ops
    if _numba_ops is None:
        from . import numba_ops as mod

        _numba_ops = mod
    return _numba_ops


def set_backend(name):
    """Select the kernel backend ("numba" or "numpy")."""
    global _active
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}, expected one of {_BACKENDS}")
    if name == "numba":
        try:
            _load_numba_ops()
        except ImportError as exc:
            raise ConfigError(f"numba backend requested but numba is unavailable: {exc}") from exc
    _active = name
    return _active


def active_backend():
    """Return the currently selected backend name, resolving it on first use."""
    global _active
    if _active is None:
        env = os.environ.get(ENV_VAR)
        if env:
            set_backend(env.strip().lower())
        else:
            _active = "numpy"
    return _active


def _ops():
    return _load_numba_ops() if active_backend() == "numba" else numpy_ops


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d_forward(x, w, bias, stride, padding):
    """Cross-correlate x (B,C,H,W) with w (O,C,kh,kw); optional bias (O,)."""
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[2], w.shape[3]
    oh = _out_size(x.shape[2], kh, sh, ph)
    ow = _out_size(x.shape[3], kw, sw, pw)
    xp = _pad(x, ph, pw)
    y = _ops().conv2d_fwd(xp, np.ascontiguousarray(w), sh, sw, oh, ow)
    if bias is not None:
        y += bias[None, :, None, None]
    return y


def conv2d_backward(x, w, stride, padding, grad_out, with_bias):
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad(x, ph, pw)
    g = np.ascontiguousarray(grad_out)
    ops = _ops()
    dw = ops.conv2d_dw(g, xp, sh, sw, kh, kw)
    dxp = ops.conv2d_dx(g, np.ascontiguousarray(w), sh, sw, xp.shape[2], xp.shape[3])
    dx = dxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    db = g.sum(axis=(0, 2, 3)) if with_bias else None
    return dx, dw, db


def depthwise2d_forward(x, w, bias, stride, padding):
    """Per-channel convolution: x (B,C,H,W), w (C,kh,kw)."""
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[1], w.shape[2]
    oh = _out_size(x.shape[2], kh, sh, ph)
    ow = _out_size(x.shape[3], kw, sw, pw)
    xp = _pad(x, ph, pw)
    y = _ops().depthwise2d_fwd(xp, np.ascontiguousarray(w), sh, sw, oh, ow)
    if bias is not None:
        y += bias[None, :, None, None]
    return y


def depthwise2d_backward(x, w, stride, padding, grad_out, with_bias):
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[1], w.shape[2]
    xp = _pad(x, ph, pw)
    g = np.ascontiguousarray(grad_out)
    ops = _ops()
    dw = ops.depthwise2d_dw(g, xp, sh, sw, kh, kw)
    dxp = ops.depthwise2d_dx(g, np.ascontiguousarray(w), sh, sw, xp.shape[2], xp.shape[3])
    dx = dxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    db = g.sum(axis=(0, 2, 3)) if with_bias else None
    return dx, dw, db


# Bilinear resampling uses half-pixel source coordinates clamped to the
# input extent, so same-size resizing is an exact identity.

_plan_cache = {}
_matrix_cache = {}


def _resize_plan(n_in, n_out):
    key = (n_in, n_out)
    plan = _plan_cache.get(key)
    if plan is None:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = src - i0
        plan = (i0, i1, w)
        _plan_cache[key] = plan
    return plan


def _resize_matrix(n_in, n_out, dtype):
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _matrix_cache.get(key)
    if mat is None:
        i0, i1, w = _resize_plan(n_in, n_out)
        a = np.zeros((n_out, n_in), dtype=np.float64)
        rows = np.arange(n_out)
        np.add.at(a, (rows, i0), 1.0 - w)
        np.add.at(a, (rows, i1), w)
        mat = a.astype(dtype)
        _matrix_cache[key] = mat
    return mat


def resize_bilinear_forward(x, out_h, out_w):
    if x.shape[2] == out_h and x.shape[3] == out_w:
        return x.copy()
    if active_backend() == "numba":
        i0h, i1h, wh = _resize_plan(x.shape[2], out_h)
        i0w, i1w, ww = _resize_plan(x.shape[3], out_w)
        ops = _load_numba_ops()
        return ops.resize_fwd(
            np.ascontiguousarray(x), i0h, i1h, wh.astype(x.dtype), i0w, i1w, ww.astype(x.dtype)
        )
    mat_h = _resize_matrix(x.shape[2], out_h, x.dtype)
    mat_w = _resize_matrix(x.shape[3], out_w, x.dtype)
    return numpy_ops.resize_fwd(x, mat_h, mat_w)


def resize_bilinear_backward(grad_out, in_h, in_w):
    if grad_out.shape[2] == in_h and grad_out.shape[3] == in_w:
        return grad_out
    if active_backend() == "numba":
        i0h, i1h, wh = _resize_plan(in_h, grad_out.shape[2])
        i0w, i1w, ww = _resize_plan(in_w, grad_out.shape[3])
        ops = _load_numba_ops()
        return ops.resize_bwd(
            np.ascontiguousarray(grad_out),
            i0h, i1h, wh.astype(grad_out.dtype),
            i0w, i1w, ww.astype(grad_out.dtype),
            in_h, in_w,
        )
    mat_h = _resize_matrix(in_h, grad_out.shape[2], grad_out.dtype)
    mat_w = _resize_matrix(in_w, grad_out.shape[3], grad_out.dtype)
    return numpy_ops.resize_bwd(grad_out, mat_h, mat_w)
