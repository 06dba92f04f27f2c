"""Pure-NumPy kernel implementations.

Convolutions are evaluated as one BLAS matmul per kernel tap over strided
views of the padded input, which avoids materializing an im2col buffer.
All functions receive pre-padded inputs and return arrays of the caller's
dtype; padding, bias, and output-size arithmetic live in the dispatch layer.
"""

import numpy as np


def conv2d_fwd(xp, w, sh, sw, oh, ow):
    acc = None
    kh, kw = w.shape[2], w.shape[3]
    for i in range(kh):
        for j in range(kw):
            view = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
            term = np.tensordot(view, w[:, :, i, j], axes=([1], [1]))
            acc = term if acc is None else acc + term
    # acc is (B, oh, ow, O)
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def conv2d_dx(g, w, sh, sw, hp, wp):
    B, _, oh, ow = g.shape
    _, C, kh, kw = w.shape
    dxp = np.zeros((B, C, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # (B, oh, ow, C)
            dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += contrib.transpose(0, 3, 1, 2)
    return dxp


def conv2d_dw(g, xp, sh, sw, kh, kw):
    _, O, oh, ow = g.shape
    C = xp.shape[1]
    dw = np.empty((O, C, kh, kw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            view = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
            dw[:, :, i, j] = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def depthwise2d_fwd(xp, w, sh, sw, oh, ow):
    B, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((B, C, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            view = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
            out += view * w[None, :, i, j, None, None]
    return out


def depthwise2d_dx(g, w, sh, sw, hp, wp):
    B, C, oh, ow = g.shape
    kh, kw = w.shape[1], w.shape[2]
    dxp = np.zeros((B, C, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += g * w[None, :, i, j, None, None]
    return dxp


def depthwise2d_dw(g, xp, sh, sw, kh, kw):
    _, C, oh, ow = g.shape
    dw = np.empty((C, kh, kw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            view = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
            dw[:, i, j] = np.einsum("bchw,bchw->c", g, view)
    return dw


def resize_fwd(x, mat_h, mat_w):
    B, C, H, W = x.shape
    oh, ow = mat_h.shape[0], mat_w.shape[0]
    flat = x.reshape(B * C, H, W)
    out = np.matmul(np.matmul(mat_h, flat), mat_w.T)
    return out.reshape(B, C, oh, ow)


def resize_bwd(g, mat_h, mat_w):
    B, C, oh, ow = g.shape
    H, W = mat_h.shape[1], mat_w.shape[1]
    flat = g.reshape(B * C, oh, ow)
    dx = np.matmul(np.matmul(mat_h.T, flat), mat_w)
    return dx.reshape(B, C, H, W)
