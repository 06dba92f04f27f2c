"""Numba JIT kernel implementations.

Same contracts as numpy_ops. Every prange iteration writes a disjoint slice
of the output and no reduction crosses threads, so results are bitwise
reproducible regardless of thread count or scheduling.
"""

import numpy as np
from numba import njit, prange

_JIT = dict(parallel=True, fastmath=True, cache=True)


@njit(**_JIT)
def conv2d_fwd(xp, w, sh, sw, oh, ow):
    B, C = xp.shape[0], xp.shape[1]
    O, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    out = np.zeros((B, O, oh, ow), dtype=xp.dtype)
    for bo in prange(B * O):
        b = bo // O
        o = bo % O
        obuf = out[b, o]
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[o, c, i, j]
                    for y in range(oh):
                        xrow = xp[b, c, y * sh + i]
                        orow = obuf[y]
                        for x in range(ow):
                            orow[x] += wv * xrow[x * sw + j]
    return out


@njit(**_JIT)
def conv2d_dx(g, w, sh, sw, hp, wp):
    B, O, oh, ow = g.shape
    C, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dxp = np.zeros((B, C, hp, wp), dtype=g.dtype)
    for b in prange(B):
        for o in range(O):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(oh):
                            grow = g[b, o, y]
                            drow = dxp[b, c, y * sh + i]
                            for x in range(ow):
                                drow[x * sw + j] += wv * grow[x]
    return dxp


@njit(**_JIT)
def conv2d_dw(g, xp, sh, sw, kh, kw):
    B, O, oh, ow = g.shape
    C = xp.shape[1]
    dw = np.empty((O, C, kh, kw), dtype=g.dtype)
    for oc in prange(O * C):
        o = oc // C
        c = oc % C
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for b in range(B):
                    for y in range(oh):
                        grow = g[b, o, y]
                        xrow = xp[b, c, y * sh + i]
                        for x in range(ow):
                            acc += grow[x] * xrow[x * sw + j]
                dw[o, c, i, j] = acc
    return dw


@njit(**_JIT)
def depthwise2d_fwd(xp, w, sh, sw, oh, ow):
    B, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.empty((B, C, oh, ow), dtype=xp.dtype)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        for y in range(oh):
            yb = y * sh
            for x in range(ow):
                xb = x * sw
                acc = 0.0
                for i in range(kh):
                    row = xp[b, c, yb + i]
                    wrow = w[c, i]
                    for j in range(kw):
                        acc += row[xb + j] * wrow[j]
                out[b, c, y, x] = acc
    return out


@njit(**_JIT)
def depthwise2d_dx(g, w, sh, sw, hp, wp):
    B, C, oh, ow = g.shape
    kh, kw = w.shape[1], w.shape[2]
    dxp = np.zeros((B, C, hp, wp), dtype=g.dtype)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        for y in range(oh):
            yb = y * sh
            for x in range(ow):
                gv = g[b, c, y, x]
                xb = x * sw
                for i in range(kh):
                    drow = dxp[b, c, yb + i]
                    wrow = w[c, i]
                    for j in range(kw):
                        drow[xb + j] += gv * wrow[j]
    return dxp


@njit(**_JIT)
def depthwise2d_dw(g, xp, sh, sw, kh, kw):
    B, C, oh, ow = g.shape
    dw = np.empty((C, kh, kw), dtype=g.dtype)
    for c in prange(C):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for b in range(B):
                    for y in range(oh):
                        grow = g[b, c, y]
                        xrow = xp[b, c, y * sh + i]
                        for x in range(ow):
                            acc += grow[x] * xrow[x * sw + j]
                dw[c, i, j] = acc
    return dw


@njit(**_JIT)
def resize_fwd(x, i0h, i1h, wh, i0w, i1w, ww):
    B, C = x.shape[0], x.shape[1]
    oh, ow = i0h.shape[0], i0w.shape[0]
    out = np.empty((B, C, oh, ow), dtype=x.dtype)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        plane = x[b, c]
        for y in range(oh):
            t = wh[y]
            r0 = plane[i0h[y]]
            r1 = plane[i1h[y]]
            for xx in range(ow):
                s = ww[xx]
                top = r0[i0w[xx]] * (1.0 - s) + r0[i1w[xx]] * s
                bot = r1[i0w[xx]] * (1.0 - s) + r1[i1w[xx]] * s
                out[b, c, y, xx] = top * (1.0 - t) + bot * t
    return out


@njit(**_JIT)
def resize_bwd(g, i0h, i1h, wh, i0w, i1w, ww, H, W):
    B, C, oh, ow = g.shape
    dx = np.zeros((B, C, H, W), dtype=g.dtype)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        plane = dx[b, c]
        for y in range(oh):
            t = wh[y]
            for xx in range(ow):
                s = ww[xx]
                gv = g[b, c, y, xx]
                plane[i0h[y], i0w[xx]] += gv * (1.0 - t) * (1.0 - s)
                plane[i0h[y], i1w[xx]] += gv * (1.0 - t) * s
                plane[i1h[y], i0w[xx]] += gv * t * (1.0 - s)
                plane[i1h[y], i1w[xx]] += gv * t * s
    return dx
